"""Projection of Gaussians to screen space and tile-parallel front-to-back blending.

Forward: ``project`` computes EWA screen-space footprints and a global depth order,
``blend`` composites them per pixel and records the contributor list of every pixel.
Backward: ``blend_backward`` replays those lists back to front; ``project_backward``
chains the result to positions, rotations and log-scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit, prange

from . import _threads  # noqa: F401  (sizes the numba pool before first use)
from .errors import ContractViolation
from .scene import BlendRecord, Camera, GaussianCloud, RenderOutput, sigmoid

NEAR_PLANE = 0.01
DILATION = 0.3
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
DEFAULT_TILE = 16
# beyond this Mahalanobis radius the density is below MIN_ALPHA for any opacity
_EXTENT_SIGMAS = math.sqrt(2.0 * math.log(255.0)) * 1.001


@dataclass
class Projected2D:
    gaussian_id: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray | None


@dataclass
class Projection:
    """Depth-sorted screen-space Gaussians (structure of arrays).

    Entry ``k`` is the k-th nearest surviving Gaussian; ``ids[k]`` is its index in
    the cloud. ``cov2d`` holds (a, b, c) of [[a, b], [b, c]], dilation included.
    """

    ids: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    p_cam: np.ndarray
    width: int
    height: int
    colors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, k: int) -> Projected2D:
        a, b, c = self.cov2d[k]
        return Projected2D(
            int(self.ids[k]),
            self.mean2d[k].copy(),
            np.array([[a, b], [b, c]]),
            float(self.depth[k]),
            float(self.opacity[k]),
            None if self.colors is None else self.colors[k].copy(),
        )

    def with_colors(self, colors: np.ndarray) -> Projection:
        colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(len(self), 3)
        return replace(self, colors=colors)

    def subset(self, order) -> Projection:
        """Reordered/filtered copy; used to build permuted or unsorted inputs."""
        return replace(
            self,
            ids=self.ids[order],
            mean2d=self.mean2d[order],
            cov2d=self.cov2d[order],
            conic=self.conic[order],
            depth=self.depth[order],
            opacity=self.opacity[order],
            radius=self.radius[order],
            p_cam=self.p_cam[order],
            colors=None if self.colors is None else self.colors[order],
        )


@dataclass
class TileBins:
    tile_size: int
    width: int
    height: int
    nx: int
    ny: int
    offsets: np.ndarray
    slots: np.ndarray


@dataclass
class BlendGrads:
    """Gradients per projection entry (same order as ``Projection``)."""

    color: np.ndarray
    opacity: np.ndarray
    opacity_logit: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray


# ---------------------------------------------------------------------------
# projection


@njit(cache=True)
def _quat_rot(qw, qx, qy, qz, R):
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w, x, y, z = qw / n, qx / n, qy / n, qz / n
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return n


@njit(cache=True)
def _project_kernel(pos, quat, log_s, W, t, fx, fy, cx, cy, width, height, near, dilation,
                    valid, p_cam, mean2d, cov2d, conic, radius):
    R = np.empty((3, 3))
    M = np.empty((3, 3))
    S = np.empty((3, 3))
    T = np.empty((2, 3))
    for i in range(pos.shape[0]):
        valid[i] = False
        X = W[0, 0] * pos[i, 0] + W[0, 1] * pos[i, 1] + W[0, 2] * pos[i, 2] + t[0]
        Y = W[1, 0] * pos[i, 0] + W[1, 1] * pos[i, 1] + W[1, 2] * pos[i, 2] + t[1]
        Z = W[2, 0] * pos[i, 0] + W[2, 1] * pos[i, 1] + W[2, 2] * pos[i, 2] + t[2]
        p_cam[i, 0] = X
        p_cam[i, 1] = Y
        p_cam[i, 2] = Z
        if not Z > near:
            continue
        _quat_rot(quat[i, 0], quat[i, 1], quat[i, 2], quat[i, 3], R)
        for r in range(3):
            for c in range(3):
                M[r, c] = R[r, c] * math.exp(log_s[i, c])
        for r in range(3):
            for c in range(3):
                S[r, c] = M[r, 0] * M[c, 0] + M[r, 1] * M[c, 1] + M[r, 2] * M[c, 2]
        j00 = fx / Z
        j02 = -fx * X / (Z * Z)
        j11 = fy / Z
        j12 = -fy * Y / (Z * Z)
        for c in range(3):
            T[0, c] = j00 * W[0, c] + j02 * W[2, c]
            T[1, c] = j11 * W[1, c] + j12 * W[2, c]
        a = 0.0
        b = 0.0
        d = 0.0
        for r in range(3):
            for c in range(3):
                a += T[0, r] * S[r, c] * T[0, c]
                b += T[0, r] * S[r, c] * T[1, c]
                d += T[1, r] * S[r, c] * T[1, c]
        a += dilation
        d += dilation
        det = a * d - b * b
        if not det > 0.0:
            continue
        u = fx * X / Z + cx
        v = fy * Y / Z + cy
        lam = 0.5 * (a + d) + math.sqrt(0.25 * (a - d) * (a - d) + b * b)
        r_px = _EXTENT_SIGMAS * math.sqrt(lam)
        # any pixel center within reach?
        if u + r_px < 0.5 or u - r_px > width - 0.5 or v + r_px < 0.5 or v - r_px > height - 0.5:
            continue
        valid[i] = True
        mean2d[i, 0] = u
        mean2d[i, 1] = v
        cov2d[i, 0] = a
        cov2d[i, 1] = b
        cov2d[i, 2] = d
        conic[i, 0] = d / det
        conic[i, 1] = -b / det
        conic[i, 2] = a / det
        radius[i] = r_px


def project(cloud: GaussianCloud, camera: Camera, near: float = NEAR_PLANE,
            dilation: float = DILATION) -> Projection:
    """Screen-space footprints of the Gaussians that reach at least one pixel.

    Gaussians at camera depth <= ``near`` are culled. Output is sorted by depth,
    ties broken by Gaussian id.
    """
    n = cloud.count
    valid = np.zeros(n, dtype=np.bool_)
    p_cam = np.zeros((n, 3))
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    radius = np.zeros(n)
    if n:
        _project_kernel(cloud.positions, cloud.rotations, cloud.log_scales, camera.rotation,
                        camera.translation, camera.fx, camera.fy, camera.cx, camera.cy,
                        camera.width, camera.height, near, dilation,
                        valid, p_cam, mean2d, cov2d, conic, radius)
    idx = np.flatnonzero(valid)
    order = idx[np.argsort(p_cam[idx, 2], kind="stable")]
    return Projection(
        ids=order,
        mean2d=mean2d[order],
        cov2d=cov2d[order],
        conic=conic[order],
        depth=p_cam[order, 2].copy(),
        opacity=sigmoid(cloud.opacity_logits[order]),
        radius=radius[order],
        p_cam=p_cam[order],
        width=camera.width,
        height=camera.height,
    )


@njit(cache=True)
def _project_backward_kernel(ids, pos, quat, log_s, W, fx, fy, p_cam,
                             g_mean, g_cov, g_depth, g_pos, g_quat, g_logs):
    R = np.empty((3, 3))
    M = np.empty((3, 3))
    S = np.empty((3, 3))
    T = np.empty((2, 3))
    G = np.empty((2, 2))
    GT = np.empty((2, 3))
    gT = np.empty((2, 3))
    gS = np.empty((3, 3))
    gM = np.empty((3, 3))
    gR = np.empty((3, 3))
    s = np.empty(3)
    for k in range(ids.shape[0]):
        i = ids[k]
        X, Y, Z = p_cam[k, 0], p_cam[k, 1], p_cam[k, 2]
        qn = _quat_rot(quat[i, 0], quat[i, 1], quat[i, 2], quat[i, 3], R)
        for c in range(3):
            s[c] = math.exp(log_s[i, c])
        for r in range(3):
            for c in range(3):
                M[r, c] = R[r, c] * s[c]
        for r in range(3):
            for c in range(3):
                S[r, c] = M[r, 0] * M[c, 0] + M[r, 1] * M[c, 1] + M[r, 2] * M[c, 2]
        j00 = fx / Z
        j02 = -fx * X / (Z * Z)
        j11 = fy / Z
        j12 = -fy * Y / (Z * Z)
        for c in range(3):
            T[0, c] = j00 * W[0, c] + j02 * W[2, c]
            T[1, c] = j11 * W[1, c] + j12 * W[2, c]

        # cov2d = T S T^T + dilation; (a, b, c) -> symmetric gradient G
        G[0, 0] = g_cov[k, 0]
        G[0, 1] = 0.5 * g_cov[k, 1]
        G[1, 0] = 0.5 * g_cov[k, 1]
        G[1, 1] = g_cov[k, 2]
        for r in range(2):
            for c in range(3):
                GT[r, c] = G[r, 0] * T[0, c] + G[r, 1] * T[1, c]
        # gT = 2 G T S ; gS = T^T G T
        for r in range(2):
            for c in range(3):
                gT[r, c] = 2.0 * (GT[r, 0] * S[0, c] + GT[r, 1] * S[1, c] + GT[r, 2] * S[2, c])
        for r in range(3):
            for c in range(3):
                gS[r, c] = T[0, r] * GT[0, c] + T[1, r] * GT[1, c]
        # T = J W  ->  gJ = gT W^T
        gj00 = gT[0, 0] * W[0, 0] + gT[0, 1] * W[0, 1] + gT[0, 2] * W[0, 2]
        gj02 = gT[0, 0] * W[2, 0] + gT[0, 1] * W[2, 1] + gT[0, 2] * W[2, 2]
        gj11 = gT[1, 0] * W[1, 0] + gT[1, 1] * W[1, 1] + gT[1, 2] * W[1, 2]
        gj12 = gT[1, 0] * W[2, 0] + gT[1, 1] * W[2, 1] + gT[1, 2] * W[2, 2]

        gu = g_mean[k, 0]
        gv = g_mean[k, 1]
        Z2 = Z * Z
        Z3 = Z2 * Z
        gX = gu * fx / Z - gj02 * fx / Z2
        gY = gv * fy / Z - gj12 * fy / Z2
        gZ = (g_depth[k] - gu * fx * X / Z2 - gv * fy * Y / Z2
              - gj00 * fx / Z2 + gj02 * 2.0 * fx * X / Z3
              - gj11 * fy / Z2 + gj12 * 2.0 * fy * Y / Z3)
        for c in range(3):
            g_pos[i, c] += W[0, c] * gX + W[1, c] * gY + W[2, c] * gZ

        # S = M M^T with M = R diag(s)
        for r in range(3):
            for c in range(3):
                gM[r, c] = 2.0 * (gS[r, 0] * M[0, c] + gS[r, 1] * M[1, c] + gS[r, 2] * M[2, c])
        for c in range(3):
            acc = 0.0
            for r in range(3):
                gR[r, c] = gM[r, c] * s[c]
                acc += gM[r, c] * R[r, c]
            g_logs[i, c] += acc * s[c]

        w, x, y, z = quat[i, 0] / qn, quat[i, 1] / qn, quat[i, 2] / qn, quat[i, 3] / qn
        gw = 2 * (-z * gR[0, 1] + y * gR[0, 2] + z * gR[1, 0] - x * gR[1, 2] - y * gR[2, 0] + x * gR[2, 1])
        gx = 2 * (y * gR[0, 1] + z * gR[0, 2] + y * gR[1, 0] - 2 * x * gR[1, 1] - w * gR[1, 2]
                  + z * gR[2, 0] + w * gR[2, 1] - 2 * x * gR[2, 2])
        gy = 2 * (-2 * y * gR[0, 0] + x * gR[0, 1] + w * gR[0, 2] + x * gR[1, 0] + z * gR[1, 2]
                  - w * gR[2, 0] + z * gR[2, 1] - 2 * y * gR[2, 2])
        gz = 2 * (-2 * z * gR[0, 0] - w * gR[0, 1] + x * gR[0, 2] + w * gR[1, 0] - 2 * z * gR[1, 1]
                  + y * gR[1, 2] + x * gR[2, 0] + y * gR[2, 1])
        dot = w * gw + x * gx + y * gy + z * gz
        g_quat[i, 0] += (gw - w * dot) / qn
        g_quat[i, 1] += (gx - x * dot) / qn
        g_quat[i, 2] += (gy - y * dot) / qn
        g_quat[i, 3] += (gz - z * dot) / qn


def project_backward(projection: Projection, cloud: GaussianCloud, camera: Camera,
                     grad_mean2d: np.ndarray, grad_cov2d: np.ndarray, grad_depth: np.ndarray):
    """Chain screen-space gradients to ``positions``, ``rotations`` and ``log_scales``.

    ``grad_depth`` is the gradient w.r.t. each entry's camera-frame z from every
    source (rendered depth and medium distance alike).
    """
    g_pos = np.zeros_like(cloud.positions)
    g_quat = np.zeros_like(cloud.rotations)
    g_logs = np.zeros_like(cloud.log_scales)
    if len(projection):
        _project_backward_kernel(projection.ids, cloud.positions, cloud.rotations, cloud.log_scales,
                                 camera.rotation, camera.fx, camera.fy, projection.p_cam,
                                 np.ascontiguousarray(grad_mean2d), np.ascontiguousarray(grad_cov2d),
                                 np.ascontiguousarray(grad_depth), g_pos, g_quat, g_logs)
    return {"positions": g_pos, "rotations": g_quat, "log_scales": g_logs}


# ---------------------------------------------------------------------------
# tile binning


@njit(cache=True)
def _bin_kernel(mean2d, radius, width, height, ts, nx, ny):
    n = mean2d.shape[0]
    rect = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(nx * ny + 1, dtype=np.int64)
    for s in range(n):
        c0 = max(int(math.floor(mean2d[s, 0] - radius[s] - 0.5)), 0)
        c1 = min(int(math.ceil(mean2d[s, 0] + radius[s] - 0.5)), width - 1)
        r0 = max(int(math.floor(mean2d[s, 1] - radius[s] - 0.5)), 0)
        r1 = min(int(math.ceil(mean2d[s, 1] + radius[s] - 0.5)), height - 1)
        if c0 > c1 or r0 > r1:
            rect[s, 0] = 1
            rect[s, 1] = 0
            continue
        rect[s, 0] = c0 // ts
        rect[s, 1] = c1 // ts
        rect[s, 2] = r0 // ts
        rect[s, 3] = r1 // ts
        for ty in range(rect[s, 2], rect[s, 3] + 1):
            for tx in range(rect[s, 0], rect[s, 1] + 1):
                counts[ty * nx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    slots = np.empty(offsets[-1], dtype=np.int64)
    for s in range(n):
        if rect[s, 0] > rect[s, 1]:
            continue
        for ty in range(rect[s, 2], rect[s, 3] + 1):
            for tx in range(rect[s, 0], rect[s, 1] + 1):
                tile = ty * nx + tx
                slots[fill[tile]] = s
                fill[tile] += 1
    return offsets, slots


def bin_tiles(projection: Projection, tile_size: int = DEFAULT_TILE) -> TileBins:
    """Per-tile lists of projection entries, each list in depth order."""
    w, h = projection.width, projection.height
    ts = int(tile_size)
    if ts <= 0:
        ts = max(w, h)
    nx, ny = -(-w // ts), -(-h // ts)
    offsets, slots = _bin_kernel(projection.mean2d.reshape(-1, 2), projection.radius, w, h, ts, nx, ny)
    return TileBins(ts, w, h, nx, ny, offsets, slots)


# ---------------------------------------------------------------------------
# blending


@njit(parallel=True, cache=True)
def _blend_kernel(mean2d, conic, opacity, colors, depth, bg, ts, nx, ny, width, height,
                  tile_off, tile_slots, out_color, out_depth, out_T, counts,
                  fill, rec_off, rec_slot, rec_dup, rec_alpha, rec_T):
    # exponent below which alpha is surely under MIN_ALPHA; borderline cases fall
    # through to the exact test so the output does not depend on this shortcut
    cutoff = np.empty(opacity.shape[0])
    for s in range(opacity.shape[0]):
        cutoff[s] = math.log(MIN_ALPHA / opacity[s]) - 1e-6 if opacity[s] > 0 else np.inf
    for tile in prange(nx * ny):
        ty = tile // nx
        tx = tile - ty * nx
        lo = tile_off[tile]
        hi = tile_off[tile + 1]
        for row in range(ty * ts, min((ty + 1) * ts, height)):
            py = row + 0.5
            for col in range(tx * ts, min((tx + 1) * ts, width)):
                px = col + 0.5
                p = row * width + col
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                n = 0
                w_at = rec_off[p] if fill else 0
                for k in range(lo, hi):
                    s = tile_slots[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                                    + conic[s, 2] * dy * dy)
                    if power < cutoff[s]:
                        continue
                    alpha = opacity[s] * math.exp(power)
                    if alpha < MIN_ALPHA:
                        continue
                    wgt = alpha * T
                    c0 += colors[s, 0] * wgt
                    c1 += colors[s, 1] * wgt
                    c2 += colors[s, 2] * wgt
                    d += depth[s] * wgt
                    if fill:
                        rec_slot[w_at] = s
                        rec_dup[w_at] = k
                        rec_alpha[w_at] = alpha
                        rec_T[w_at] = T
                        w_at += 1
                    T = T * (1.0 - alpha)
                    n += 1
                    if T < MIN_TRANSMITTANCE:
                        break
                out_color[row, col, 0] = c0 + T * bg[0]
                out_color[row, col, 1] = c1 + T * bg[1]
                out_color[row, col, 2] = c2 + T * bg[2]
                out_depth[row, col] = d
                out_T[row, col] = T
                counts[p] = n


def _check_sorted(projection: Projection) -> None:
    if len(projection) < 2:
        return
    dz = np.diff(projection.depth)
    di = np.diff(projection.ids)
    if np.any(dz < 0) or np.any((dz == 0) & (di <= 0)):
        raise ContractViolation("projection is not sorted by (depth, gaussian id)")


def blend(projection: Projection, camera: Camera, background=(0.0, 0.0, 0.0),
          tile_size: int = DEFAULT_TILE, record: bool = True) -> RenderOutput:
    """Front-to-back alpha compositing of a depth-sorted projection.

    Contributions with alpha below 1/255 are skipped and a pixel stops once its
    transmittance drops below 1e-4. The depth map is the unnormalized
    transmittance-weighted sum of camera-frame depths.
    """
    if projection.colors is None:
        raise ContractViolation("projection carries no resolved colors")
    if (projection.width, projection.height) != (camera.width, camera.height):
        raise ContractViolation("projection was made for a different image size")
    _check_sorted(projection)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    tiles = bin_tiles(projection, tile_size)
    h, w = camera.height, camera.width
    color = np.empty((h, w, 3))
    depth = np.empty((h, w))
    T = np.empty((h, w))
    counts = np.empty(h * w, dtype=np.int64)
    mean2d = projection.mean2d.reshape(-1, 2)
    conic = projection.conic.reshape(-1, 3)
    colors = projection.colors.reshape(-1, 3)
    empty_i = np.zeros(0, dtype=np.int64)
    empty_f = np.zeros(0)
    args = (mean2d, conic, projection.opacity, colors, projection.depth, bg, tiles.tile_size,
            tiles.nx, tiles.ny, w, h, tiles.offsets, tiles.slots, color, depth, T, counts)
    _blend_kernel(*args, False, np.zeros(h * w + 1, dtype=np.int64), empty_i, empty_i, empty_f, empty_f)
    rec = None
    if record:
        offsets = np.zeros(h * w + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        total = int(offsets[-1])
        rec_slot = np.empty(total, dtype=np.int64)
        rec_dup = np.empty(total, dtype=np.int64)
        rec_alpha = np.empty(total)
        rec_T = np.empty(total)
        _blend_kernel(*args, True, offsets, rec_slot, rec_dup, rec_alpha, rec_T)
        rec = BlendRecord(offsets, rec_slot, rec_dup, rec_alpha, rec_T, T.copy(), projection, bg, tiles)
    return RenderOutput(color=color, depth=depth, alpha=1.0 - T, blend_record=rec)


@njit(parallel=True, cache=True)
def _blend_backward_kernel(mean2d, conic, opacity, colors, depth, bg, ts, nx, ny, width, height,
                           tile_off, rec_off, rec_slot, rec_dup, rec_alpha, rec_T,
                           g_color, g_depth, dbuf):
    for tile in prange(nx * ny):
        ty = tile // nx
        tx = tile - ty * nx
        for row in range(ty * ts, min((ty + 1) * ts, height)):
            py = row + 0.5
            for col in range(tx * ts, min((tx + 1) * ts, width)):
                px = col + 0.5
                p = row * width + col
                gc0 = g_color[row, col, 0]
                gc1 = g_color[row, col, 1]
                gc2 = g_color[row, col, 2]
                gd = g_depth[row, col]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                    continue
                # colour/depth seen behind the current contributor, per unit transmittance
                a0 = bg[0]
                a1 = bg[1]
                a2 = bg[2]
                ad = 0.0
                for e in range(rec_off[p + 1] - 1, rec_off[p] - 1, -1):
                    s = rec_slot[e]
                    k = rec_dup[e]
                    alpha = rec_alpha[e]
                    T = rec_T[e]
                    wgt = alpha * T
                    cs0 = colors[s, 0]
                    cs1 = colors[s, 1]
                    cs2 = colors[s, 2]
                    z = depth[s]
                    dbuf[k, 0] += gc0 * wgt
                    dbuf[k, 1] += gc1 * wgt
                    dbuf[k, 2] += gc2 * wgt
                    dbuf[k, 9] += gd * wgt
                    g_alpha = T * (gc0 * (cs0 - a0) + gc1 * (cs1 - a1) + gc2 * (cs2 - a2) + gd * (z - ad))
                    a0 = cs0 * alpha + (1.0 - alpha) * a0
                    a1 = cs1 * alpha + (1.0 - alpha) * a1
                    a2 = cs2 * alpha + (1.0 - alpha) * a2
                    ad = z * alpha + (1.0 - alpha) * ad
                    dbuf[k, 3] += g_alpha * alpha / opacity[s]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    g_q = -0.5 * g_alpha * alpha
                    dbuf[k, 4] -= g_q * (2.0 * conic[s, 0] * dx + 2.0 * conic[s, 1] * dy)
                    dbuf[k, 5] -= g_q * (2.0 * conic[s, 1] * dx + 2.0 * conic[s, 2] * dy)
                    dbuf[k, 6] += g_q * dx * dx
                    dbuf[k, 7] += g_q * 2.0 * dx * dy
                    dbuf[k, 8] += g_q * dy * dy


@njit(cache=True)
def _reduce_dups(slots, dbuf, out):
    for k in range(slots.shape[0]):
        s = slots[k]
        for j in range(dbuf.shape[1]):
            out[s, j] += dbuf[k, j]


def conic_to_cov_grad(cov2d: np.ndarray, g_conic: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. (a, b, c) of [[a, b], [b, c]] given gradient w.r.t. its inverse's (A, B, C)."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    gA, gB, gC = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    det2 = (a * c - b * b) ** 2
    ga = (-c * c * gA + b * c * gB - b * b * gC) / det2
    gb = (2 * b * c * gA - (a * c + b * b) * gB + 2 * a * b * gC) / det2
    gc = (-b * b * gA + a * b * gB - a * a * gC) / det2
    return np.stack([ga, gb, gc], axis=1)


def blend_backward(output: RenderOutput, grad_color: np.ndarray, grad_depth: np.ndarray | None = None) -> BlendGrads:
    """Adjoint of ``blend`` for the recorded pass.

    Returns gradients for every projection entry: resolved color, decoded opacity,
    opacity logit, screen-space mean, conic, 2D covariance (a, b, c) and depth.
    """
    rec = output.blend_record
    if rec is None:
        raise ContractViolation("render output has no blend record")
    proj, tiles = rec.projection, rec.tiles
    h, w = tiles.height, tiles.width
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    if grad_color.shape != (h, w, 3):
        raise ContractViolation(f"grad_color shape {grad_color.shape} does not match record {(h, w, 3)}")
    if grad_depth is None:
        grad_depth = np.zeros((h, w))
    grad_depth = np.ascontiguousarray(grad_depth, dtype=np.float64)
    if grad_depth.shape != (h, w):
        raise ContractViolation(f"grad_depth shape {grad_depth.shape} does not match record {(h, w)}")
    if output.color.shape != (h, w, 3) or len(rec.offsets) != h * w + 1:
        raise ContractViolation("blend record does not belong to this output")

    m = len(proj)
    dbuf = np.zeros((len(tiles.slots), 10))
    if m:
        _blend_backward_kernel(proj.mean2d, proj.conic, proj.opacity, proj.colors, proj.depth, rec.background,
                               tiles.tile_size, tiles.nx, tiles.ny, w, h, tiles.offsets, rec.offsets,
                               rec.slot, rec.dup, rec.alpha, rec.transmittance, grad_color, grad_depth, dbuf)
    acc = np.zeros((m, 10))
    _reduce_dups(tiles.slots, dbuf, acc)
    g_conic = acc[:, 6:9].copy()
    return BlendGrads(
        color=acc[:, 0:3].copy(),
        opacity=acc[:, 3].copy(),
        opacity_logit=acc[:, 3] * proj.opacity * (1.0 - proj.opacity),
        mean2d=acc[:, 4:6].copy(),
        conic=g_conic,
        cov2d=conic_to_cov_grad(proj.cov2d, g_conic) if m else np.zeros((0, 3)),
        depth=acc[:, 9].copy(),
    )


def contribution_weights(output: RenderOutput, count: int) -> np.ndarray:
    """Total blending weight (alpha * transmittance) each Gaussian received in a render."""
    rec = output.blend_record
    if rec is None:
        raise ContractViolation("render output has no blend record")
    ids = rec.projection.ids[rec.slot]
    return np.bincount(ids, weights=rec.alpha * rec.transmittance, minlength=count)


def render(cloud: GaussianCloud, camera: Camera, colors: np.ndarray | None = None,
           background=(0.0, 0.0, 0.0), tile_size: int = DEFAULT_TILE, record: bool = False) -> RenderOutput:
    """Project and blend in one call using per-Gaussian colors (default: base colors)."""
    proj = project(cloud, camera)
    base = cloud.base_colors if colors is None else np.asarray(colors, dtype=np.float64)
    return blend(proj.with_colors(base[proj.ids]), camera, background, tile_size, record)
