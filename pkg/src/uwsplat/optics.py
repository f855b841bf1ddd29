"""Underwater image formation and the per-Gaussian color it induces.

A Gaussian at camera depth ``d`` with intrinsic color ``c`` is seen through the
water as ``exp(-beta_d d) * c + (1 - exp(-beta_b d)) * veil``. The water branch
blends those colors; the clear branch blends ``c`` with identical geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ContractViolation
from .rasterizer import DEFAULT_TILE, Projection, blend, project
from .scene import Camera, GaussianCloud, RenderOutput, camera_distance, decode_medium, sigmoid, softplus

BRANCHES = ("water", "clear")


@dataclass
class MediumSample:
    direct: np.ndarray  # exp(-beta_d d)
    backscatter: np.ndarray  # exp(-beta_b d)
    veil: np.ndarray


def formation_model(J, z, beta_d, beta_b, b_inf):
    """Observed radiance of an object of radiance ``J`` seen through ``z`` of water."""
    if np.any(np.asarray(z) < 0):
        raise ArgumentError("distance must be nonnegative")
    J, z = np.asarray(J, dtype=np.float64), np.asarray(z, dtype=np.float64)
    direct = J * np.exp(-np.asarray(beta_d) * z)
    return direct + np.asarray(b_inf) * (1.0 - np.exp(-np.asarray(beta_b) * z))


def medium_sample(cloud: GaussianCloud, index: int, distance: float) -> MediumSample:
    beta_d, beta_b, veil = decode_medium(cloud, index)
    return MediumSample(np.exp(-beta_d * distance), np.exp(-beta_b * distance), veil)


def resolve_color(cloud: GaussianCloud, index: int, camera: Camera, branch: str = "water") -> np.ndarray:
    if branch not in BRANCHES:
        raise ArgumentError(f"unknown branch {branch!r}")
    base = cloud.base_colors[index].copy()
    if branch == "clear":
        return base
    d = camera_distance(cloud.positions[index], camera)
    if d <= 0:
        raise ContractViolation(f"Gaussian {index} has nonpositive distance {d}; it must be culled")
    m = medium_sample(cloud, index, d)
    return m.direct * base + (1.0 - m.backscatter) * m.veil


@dataclass
class WaterColors:
    """Vectorized water-branch colors for a projection, with what the adjoint needs."""

    colors: np.ndarray
    base: np.ndarray
    distance: np.ndarray
    beta_d: np.ndarray
    beta_b: np.ndarray
    veil: np.ndarray
    direct: np.ndarray
    backscatter: np.ndarray


def water_colors(cloud: GaussianCloud, projection: Projection) -> WaterColors:
    ids = projection.ids
    d = projection.depth[:, None]
    beta_d = softplus(cloud.atten_raw[ids])
    beta_b = softplus(cloud.backsc_raw[ids])
    veil = sigmoid(cloud.veil_raw[ids])
    base = cloud.base_colors[ids]
    td = np.exp(-beta_d * d)
    tb = np.exp(-beta_b * d)
    return WaterColors(td * base + (1.0 - tb) * veil, base, d[:, 0], beta_d, beta_b, veil, td, tb)


def water_colors_backward(cloud: GaussianCloud, projection: Projection, wc: WaterColors,
                          grad_colors: np.ndarray):
    """Scatter color gradients to base colors, raw medium parameters and depth."""
    ids = projection.ids
    d = wc.distance[:, None]
    g = grad_colors
    grads = {name: np.zeros_like(getattr(cloud, name)) for name in ("base_colors", "atten_raw", "backsc_raw", "veil_raw")}
    grads["base_colors"][ids] = g * wc.direct
    # d softplus(raw) = sigmoid(raw); d sigmoid(raw) = s (1 - s)
    grads["atten_raw"][ids] = g * (-d * wc.direct * wc.base) * sigmoid(cloud.atten_raw[ids])
    grads["backsc_raw"][ids] = g * (d * wc.backscatter * wc.veil) * sigmoid(cloud.backsc_raw[ids])
    grads["veil_raw"][ids] = g * (1.0 - wc.backscatter) * wc.veil * (1.0 - wc.veil)
    g_depth = np.sum(g * (-wc.beta_d * wc.direct * wc.base + wc.beta_b * wc.backscatter * wc.veil), axis=1)
    return grads, g_depth


@dataclass
class DualRender:
    water: RenderOutput
    clear: RenderOutput
    projection: Projection
    water_colors: WaterColors

    def __iter__(self):
        return iter((self.water, self.clear))


def render_dual(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0),
                tile_size: int = DEFAULT_TILE, record: bool = True) -> DualRender:
    """Render the water and clear branches from one shared projection."""
    proj = project(cloud, camera)
    wc = water_colors(cloud, proj)
    water = blend(proj.with_colors(wc.colors), camera, background, tile_size, record)
    clear = blend(proj.with_colors(cloud.base_colors[proj.ids]), camera, background, tile_size, record)
    return DualRender(water, clear, proj, wc)


def render_branch(cloud: GaussianCloud, camera: Camera, branch: str, background=(0.0, 0.0, 0.0),
                  tile_size: int = DEFAULT_TILE, record: bool = False) -> RenderOutput:
    if branch not in BRANCHES:
        raise ArgumentError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    proj = project(cloud, camera)
    if branch == "water":
        colors = water_colors(cloud, proj).colors
    else:
        colors = cloud.base_colors[proj.ids]
    return blend(proj.with_colors(colors), camera, background, tile_size, record)
