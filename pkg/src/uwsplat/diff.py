"""Composed objective with analytic gradients, and a finite-difference oracle to check them.

The forward chain is project -> resolve colors -> blend (water and clear) -> loss
terms; ``evaluate`` runs it and, when asked, its hand-written adjoint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateDepthError, NumericalFailure
from .losses import (
    LossReport,
    LossWeights,
    exposure_loss_grad,
    pcc_depth_loss_grad,
    spatial_smoothness_grad,
    spectral_prior_grad,
    total_loss,
    weighted_image_loss,
)
from .optics import DualRender, render_dual, water_colors_backward
from .rasterizer import DEFAULT_TILE, BlendGrads, blend_backward, project_backward
from .scene import PARAM_NAMES, Camera, GaussianCloud

DEPTH_ALPHA_MASK = 0.5


@dataclass
class Targets:
    """Supervision for one view: the captured image and optional pseudo-depth."""

    image: np.ndarray
    pseudo_depth: np.ndarray | None = None


@dataclass
class GradientBundle:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    base_colors: np.ndarray
    atten_raw: np.ndarray
    backsc_raw: np.ndarray
    veil_raw: np.ndarray
    loss: float = 0.0

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud, loss: float = 0.0) -> GradientBundle:
        return cls(**{k: np.zeros_like(v) for k, v in cloud.params().items()}, loss=loss)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def add(self, name: str, value, scale: float = 1.0) -> None:
        getattr(self, name)[...] += scale * value

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


@dataclass
class Evaluation:
    report: LossReport
    grads: GradientBundle | None
    dual: DualRender
    water_grads: BlendGrads | None = None
    clear_grads: BlendGrads | None = None
    signature: str = ""
    extras: dict = field(default_factory=dict)


def _check_finite(report: LossReport) -> None:
    for name in LossReport.TERMS + ("total",):
        v = getattr(report, name)
        if v is not None and not np.isfinite(v):
            raise NumericalFailure(f"loss term {name} is not finite ({v})", term=name)


def _digest(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def evaluate(
    cloud: GaussianCloud,
    camera: Camera,
    targets: Targets,
    weights: LossWeights = LossWeights(),
    *,
    regularize: bool = True,
    background=(0.0, 0.0, 0.0),
    tile_size: int = DEFAULT_TILE,
    frozen: np.ndarray | None = None,
    need_grad: bool = True,
) -> Evaluation:
    """Evaluate the total objective for one view, plus its gradient.

    ``frozen`` overrides the stop-gradient tone-mapping denominator (defaults to the
    current water render). ``regularize`` toggles the spatial and spectral terms.
    The returned ``signature`` fingerprints every discrete choice the forward pass
    made (contributor lists, masks, neighbour sets); within one signature the
    objective is smooth.
    """
    image = np.asarray(targets.image, dtype=np.float64)
    if image.shape != (camera.height, camera.width, 3):
        raise ArgumentError(f"target image {image.shape} does not match camera {(camera.height, camera.width, 3)}")
    pseudo = targets.pseudo_depth
    if pseudo is not None and np.shape(pseudo) != (camera.height, camera.width):
        raise ArgumentError("pseudo-depth does not match camera resolution")

    dual = render_dual(cloud, camera, background, tile_size, record=True)
    water, clear = dual.water, dual.clear
    report = LossReport()
    h, w = camera.height, camera.width
    g_water = np.zeros((h, w, 3))
    g_depth = np.zeros((h, w))
    g_clear = np.zeros((h, w, 3))

    img = weighted_image_loss(water.color, image, weights.lambda_ssim, frozen, weights.psi_eps)
    report.w_l2, report.w_dssim = img.w_l2, img.w_dssim
    g_water += img.grad

    depth_mask = water.alpha > DEPTH_ALPHA_MASK
    if pseudo is not None:
        try:
            report.depth_pcc, g = pcc_depth_loss_grad(water.depth, pseudo, depth_mask)
            g_depth += weights.depth * g
        except DegenerateDepthError:
            report.flags.append("depth_degenerate")

    report.exposure, g = exposure_loss_grad(clear.color, weights.tau)
    g_clear += weights.exposure * g
    exposure_mask = clear.color > weights.tau

    spatial = None
    spectral_grads = None
    if regularize:
        spatial = spatial_smoothness_grad(cloud, dual.projection.ids, weights.smooth_radius,
                                          weights.smooth_min_neighbors, weights.smooth_eps)
        report.spatial = spatial.value
        if spatial.empty:
            report.flags.append("spatial_empty")
        report.spectral, spectral_grads = spectral_prior_grad(cloud, weights.delta)

    total_loss(report, weights)
    _check_finite(report)

    rec = water.blend_record
    sig_parts = [dual.projection.ids, rec.offsets, rec.slot, depth_mask, exposure_mask]
    if spatial is not None:
        sig_parts += [spatial.valid, spatial.pairs[0], spatial.pairs[1]]
    ev = Evaluation(report, None, dual, signature=_digest(*sig_parts))
    if not need_grad:
        return ev

    grads = GradientBundle.zeros_like(cloud, loss=report.total)
    proj = dual.projection
    bw = blend_backward(water, g_water, g_depth)
    bc = blend_backward(clear, g_clear, None)
    color_grads, g_dist = water_colors_backward(cloud, proj, dual.water_colors, bw.color)
    for k, v in color_grads.items():
        grads.add(k, v)
    grads.base_colors[proj.ids] += bc.color
    grads.opacity_logits[proj.ids] += bw.opacity_logit + bc.opacity_logit
    geo = project_backward(proj, cloud, camera, bw.mean2d + bc.mean2d, bw.cov2d + bc.cov2d,
                           bw.depth + bc.depth + g_dist)
    for k, v in geo.items():
        grads.add(k, v)
    if spatial is not None:
        for k, v in spatial.grads.items():
            grads.add(k, v, weights.spatial)
        for k, v in spectral_grads.items():
            grads.add(k, v, weights.spectral)
    ev.grads = grads
    ev.water_grads = bw
    ev.clear_grads = bc
    return ev


def loss_and_grad(cloud: GaussianCloud, camera: Camera, targets: Targets,
                  weights: LossWeights = LossWeights(), **kwargs):
    """``(LossReport, GradientBundle)`` of the total objective for one view."""
    ev = evaluate(cloud, camera, targets, weights, **kwargs)
    return ev.report, ev.grads


def finite_diff_oracle(fn, cloud: GaussianCloud, step: float = 1e-4, *, refine: int = 3,
                       params=PARAM_NAMES) -> GradientBundle:
    """Central-difference gradient of a scalar function of the cloud.

    ``fn(cloud)`` returns a float, or ``(float, signature)`` where ``signature``
    identifies the smooth piece the point lies in. When a step crosses into a
    different piece the step is divided by 10 (up to ``refine`` times); entries
    that never settle are NaN. Costs two evaluations per parameter entry.
    """
    if step <= 0:
        raise ArgumentError("step must be positive")

    def call(c):
        out = fn(c)
        return out if isinstance(out, tuple) else (float(out), None)

    base_val, base_sig = call(cloud)
    bundle = GradientBundle.zeros_like(cloud, loss=base_val)
    for name in params:
        arr = getattr(cloud, name)
        out = getattr(bundle, name)
        for idx in np.ndindex(arr.shape):
            h = step
            result = np.nan
            for _ in range(refine + 1):
                orig = arr[idx]
                arr[idx] = orig + h
                fp, sp = call(cloud)
                arr[idx] = orig - h
                fm, sm = call(cloud)
                arr[idx] = orig
                if base_sig is None or (sp == base_sig and sm == base_sig):
                    result = (fp - fm) / (2 * h)
                    break
                h /= 10.0
            out[idx] = result
    return bundle


def gradient_mismatch(analytic: GradientBundle, numeric: GradientBundle, floor: float = 1e-6):
    """Per-parameter worst relative error ``|a - n| / max(|a|, |n|, floor)``; NaN entries skipped."""
    worst = {}
    for name in PARAM_NAMES:
        a, n = analytic[name], numeric[name]
        ok = np.isfinite(n)
        if not ok.any():
            worst[name] = 0.0
            continue
        err = np.abs(a[ok] - n[ok]) / np.maximum(np.maximum(np.abs(a[ok]), np.abs(n[ok])), floor)
        worst[name] = float(err.max()) if err.size else 0.0
    return worst
