"""Training objective terms and their gradients.

Every ``*_grad`` function returns the loss value together with its gradient,
written out by hand; the plain functions return only the value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ArgumentError, DegenerateDepthError
from .scene import GaussianCloud, sigmoid, softplus

PSI_EPS = 1e-3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    depth: float = 0.2
    spatial: float = 0.1
    spectral: float = 0.1
    exposure: float = 0.1
    tau: float = 0.9
    delta: float = 0.01
    smooth_radius: float = 0.05
    smooth_min_neighbors: int = 2
    smooth_eps: float = 1e-3
    psi_eps: float = PSI_EPS

    def __post_init__(self):
        for f in ("lambda_ssim", "depth", "spatial", "spectral", "exposure"):
            if getattr(self, f) < 0:
                raise ArgumentError(f"loss weight {f} must be nonnegative")
        if not 0 <= self.lambda_ssim <= 1:
            raise ArgumentError("lambda_ssim must lie in [0, 1]")


@dataclass
class LossReport:
    """Per-term values; ``None`` marks a term not evaluated this step."""

    w_l2: float = 0.0
    w_dssim: float = 0.0
    depth_pcc: float | None = None
    exposure: float | None = None
    spatial: float | None = None
    spectral: float | None = None
    total: float = 0.0
    flags: list = field(default_factory=list)

    TERMS = ("w_l2", "w_dssim", "depth_pcc", "exposure", "spatial", "spectral")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "flags"}


def total_loss(report: LossReport, weights: LossWeights = LossWeights()) -> LossReport:
    """Fill ``report.total`` with the weighted sum; missing terms count as zero."""

    def val(name):
        v = getattr(report, name)
        return 0.0 if v is None else float(v)

    ls = weights.lambda_ssim
    report.total = (
        (1.0 - ls) * val("w_l2")
        + ls * val("w_dssim")
        + weights.depth * val("depth_pcc")
        + weights.spatial * val("spatial")
        + weights.spectral * val("spectral")
        + weights.exposure * val("exposure")
    )
    return report


# ---------------------------------------------------------------------------
# image terms


def psi_map(y, y_hat_frozen, eps: float = PSI_EPS):
    """Tone-map ``y`` by the (gradient-inert) current estimate: y / (y_hat + eps)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat_frozen = np.asarray(y_hat_frozen, dtype=np.float64)
    if y.shape != y_hat_frozen.shape:
        raise ArgumentError(f"shape mismatch {y.shape} vs {y_hat_frozen.shape}")
    return y / (y_hat_frozen + eps)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_WINDOW = gaussian_window()
_HALF = SSIM_WINDOW // 2


def _filter_valid(x: np.ndarray) -> np.ndarray:
    y = correlate1d(x, _WINDOW, axis=0, mode="constant")
    y = correlate1d(y, _WINDOW, axis=1, mode="constant")
    return y[_HALF:-_HALF, _HALF:-_HALF]


def _filter_adjoint(g: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = g
    # symmetric window: correlation is its own flip
    full = correlate1d(full, _WINDOW, axis=0, mode="constant")
    return correlate1d(full, _WINDOW, axis=1, mode="constant")


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_parts(x, y):
    if x.shape != y.shape:
        raise ArgumentError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ArgumentError(f"image {x.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    mx, my = _filter_valid(x), _filter_valid(y)
    exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    n1 = 2 * mx * my + SSIM_C1
    n2 = 2 * (exy - mx * my) + SSIM_C2
    d1 = mx * mx + my * my + SSIM_C1
    d2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return mx, my, n1, n2, d1, d2


def ssim(a, b) -> float:
    """Mean SSIM over all valid window positions and channels."""
    x, y = _as_hwc(a), _as_hwc(b)
    _, _, n1, n2, d1, d2 = _ssim_parts(x, y)
    return float(np.mean((n1 * n2) / (d1 * d2)))


def ssim_grad(a, b):
    """SSIM(a, b) and its gradient with respect to ``a``."""
    x, y = _as_hwc(a), _as_hwc(b)
    mx, my, n1, n2, d1, d2 = _ssim_parts(x, y)
    s = (n1 * n2) / (d1 * d2)
    value = float(np.mean(s))
    g = 1.0 / s.size
    g_mx = g * s * (2 * my / n1 - 2 * my / n2 - 2 * mx / d1 + 2 * mx / d2)
    g_exx = -g * s / d2
    g_exy = g * 2 * s / n2
    grad = np.empty_like(x)
    for ch in range(x.shape[2]):
        shape = x.shape[:2]
        grad[..., ch] = (
            _filter_adjoint(g_mx[..., ch], shape)
            + 2 * x[..., ch] * _filter_adjoint(g_exx[..., ch], shape)
            + y[..., ch] * _filter_adjoint(g_exy[..., ch], shape)
        )
    return value, grad.reshape(np.shape(a))


@dataclass
class ImageLoss:
    w_l2: float
    w_dssim: float
    combined: float
    grad: np.ndarray


def weighted_image_loss(rendered, target, lambda_ssim: float = 0.2, frozen=None,
                        eps: float = PSI_EPS) -> ImageLoss:
    """Tone-mapped L2 + D-SSIM between a render and its target.

    Both images are divided by ``frozen + eps`` where ``frozen`` defaults to the
    render itself and is excluded from differentiation.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ArgumentError(f"shape mismatch {rendered.shape} vs {target.shape}")
    frozen = rendered if frozen is None else np.asarray(frozen, dtype=np.float64)
    denom = frozen + eps
    pr, pt = psi_map(rendered, frozen, eps), psi_map(target, frozen, eps)
    diff = pr - pt
    w_l2 = float(np.mean(diff * diff))
    g_l2 = 2.0 * diff / diff.size
    s, g_s = ssim_grad(pr, pt)
    w_dssim = 1.0 - s
    combined = (1.0 - lambda_ssim) * w_l2 + lambda_ssim * w_dssim
    grad = ((1.0 - lambda_ssim) * g_l2 - lambda_ssim * g_s) / denom
    return ImageLoss(w_l2, w_dssim, combined, grad)


# ---------------------------------------------------------------------------
# depth


def _pcc_parts(pred, pseudo, mask):
    pred = np.asarray(pred, dtype=np.float64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if pred.shape != pseudo.shape:
        raise ArgumentError(f"shape mismatch {pred.shape} vs {pseudo.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.sum() < 2:
        raise DegenerateDepthError("fewer than 2 masked depth pixels")
    x = pred[mask] - pred[mask].mean()
    y = pseudo[mask] - pseudo[mask].mean()
    nx, ny = np.sqrt(x @ x), np.sqrt(y @ y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateDepthError("zero depth variance inside the mask")
    return mask, x, y, nx, ny


def pcc_depth_loss(pred, pseudo, mask=None) -> float:
    """1 - Pearson correlation between rendered depth and pseudo-depth over ``mask``."""
    _, x, y, nx, ny = _pcc_parts(pred, pseudo, mask)
    r = (x @ y) / (nx * ny)
    return float(1.0 - np.clip(r, -1.0, 1.0))


def pcc_depth_loss_grad(pred, pseudo, mask=None):
    mask, x, y, nx, ny = _pcc_parts(pred, pseudo, mask)
    r = (x @ y) / (nx * ny)
    grad = np.zeros(np.shape(pred))
    # x, y are centered, so this is already orthogonal to the mean direction
    grad[mask] = -(y / (nx * ny) - r * x / (nx * nx))
    return float(1.0 - np.clip(r, -1.0, 1.0)), grad


# ---------------------------------------------------------------------------
# exposure


def exposure_loss(clear_image, tau: float = 0.9) -> float:
    if not 0 < tau <= 1:
        raise ArgumentError("tau must lie in (0, 1]")
    img = np.asarray(clear_image, dtype=np.float64)
    return float(np.mean(np.maximum(img - tau, 0.0)))


def exposure_loss_grad(clear_image, tau: float = 0.9):
    img = np.asarray(clear_image, dtype=np.float64)
    return exposure_loss(img, tau), (img > tau).astype(np.float64) / img.size


# ---------------------------------------------------------------------------
# medium regularizers


def radius_pairs(points: np.ndarray, radius: float):
    """All ordered pairs (i, j), i != j, with ``|p_i - p_j| < radius``.

    Uses a uniform hash grid with cell size ``radius``; returned pairs are sorted
    by (i, j). Also returns the pair distances.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    cells = np.floor(points / radius).astype(np.int64)
    lo = cells.min(axis=0) - 1
    span = cells.max(axis=0) - lo + 2
    c = cells - lo

    def key(cc):
        return (cc[:, 0] * span[1] + cc[:, 1]) * span[2] + cc[:, 2]

    keys = key(c)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    ii, jj = [], []
    for off in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij")).reshape(3, -1).T:
        nk = key(c + off)
        a = np.searchsorted(sorted_keys, nk, "left")
        b = np.searchsorted(sorted_keys, nk, "right")
        cnt = b - a
        src = np.repeat(np.arange(n), cnt)
        starts = np.repeat(a - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
        dst = order[np.arange(cnt.sum()) + starts]
        ii.append(src)
        jj.append(dst)
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    keep = i != j
    i, j = i[keep], j[keep]
    dist = np.linalg.norm(points[i] - points[j], axis=1)
    keep = dist < radius
    i, j, dist = i[keep], j[keep], dist[keep]
    o = np.lexsort((j, i))
    return i[o], j[o], dist[o]


def _medium_theta(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate([softplus(cloud.atten_raw), softplus(cloud.backsc_raw), sigmoid(cloud.veil_raw)], axis=1)


def _theta_to_raw(cloud: GaussianCloud, g_theta: np.ndarray) -> dict:
    sv = sigmoid(cloud.veil_raw)
    return {
        "atten_raw": g_theta[:, 0:3] * sigmoid(cloud.atten_raw),
        "backsc_raw": g_theta[:, 3:6] * sigmoid(cloud.backsc_raw),
        "veil_raw": g_theta[:, 6:9] * sv * (1.0 - sv),
    }


@dataclass
class SpatialResult:
    value: float
    grads: dict
    valid: np.ndarray  # ids of Gaussians in the valid set
    empty: bool
    pairs: tuple


def spatial_smoothness_grad(cloud: GaussianCloud, visible=None, radius: float = 0.05, n_min: int = 2,
                            eps: float = 1e-3) -> SpatialResult:
    """Distance-weighted neighbourhood smoothness of the decoded medium parameters."""
    if radius <= 0:
        raise ArgumentError("radius must be positive")
    n = cloud.count
    grads = {k: np.zeros_like(getattr(cloud, k)) for k in ("positions", "atten_raw", "backsc_raw", "veil_raw")}
    visible = np.arange(n) if visible is None else np.unique(np.asarray(visible, dtype=np.int64))
    i, j, dist = radius_pairs(cloud.positions, radius)
    is_vis = np.zeros(n, dtype=bool)
    is_vis[visible] = True
    sel = is_vis[i]
    i, j, dist = i[sel], j[sel], dist[sel]
    nb = np.bincount(i, minlength=n)
    valid = np.flatnonzero(is_vis & (nb >= n_min))
    if len(valid) == 0:
        return SpatialResult(0.0, grads, valid, True, (i, j))
    sel = nb[i] >= n_min
    i, j, dist = i[sel], j[sel], dist[sel]

    theta = _medium_theta(cloud)
    diff = theta[i] - theta[j]
    e = np.sum(diff * diff, axis=1)
    w = 1.0 / (dist + eps)
    W = np.bincount(i, weights=w, minlength=n)
    E = np.bincount(i, weights=w * e, minlength=n)
    per = np.zeros(n)
    per[valid] = E[valid] / W[valid]
    value = float(per[valid].mean())

    scale = 1.0 / len(valid)
    coef = (scale * 2.0 * w / W[i])[:, None] * diff
    g_theta = np.zeros_like(theta)
    np.add.at(g_theta, i, coef)
    np.add.at(g_theta, j, -coef)
    grads.update(_theta_to_raw(cloud, g_theta))

    g_w = scale * (e - per[i]) / W[i]
    g_d = g_w * (-1.0 / (dist + eps) ** 2)
    delta = cloud.positions[i] - cloud.positions[j]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, delta / dist[:, None], 0.0)
    g_p = g_d[:, None] * unit
    np.add.at(grads["positions"], i, g_p)
    np.add.at(grads["positions"], j, -g_p)
    return SpatialResult(value, grads, valid, False, (i, j))


def spatial_smoothness_loss(cloud: GaussianCloud, visible=None, radius: float = 0.05, n_min: int = 2,
                            eps: float = 1e-3) -> float:
    return spatial_smoothness_grad(cloud, visible, radius, n_min, eps).value


def spectral_differences(cloud: GaussianCloud) -> np.ndarray:
    """(N, 6) ordering residuals; negative entries mean the physical ordering holds."""
    bd, bb, v = softplus(cloud.atten_raw), softplus(cloud.backsc_raw), sigmoid(cloud.veil_raw)
    return np.stack(
        [
            bd[:, 1] - bd[:, 0],
            bd[:, 2] - bd[:, 1],
            bb[:, 0] - bb[:, 1],
            bb[:, 1] - bb[:, 2],
            v[:, 0] - v[:, 1],
            v[:, 1] - v[:, 2],
        ],
        axis=1,
    )


def spectral_penalty(residuals, delta: float = 0.01) -> float:
    """Mean softplus(residual + delta); zero-size input gives 0."""
    if delta < 0:
        raise ArgumentError("delta must be nonnegative")
    r = np.asarray(residuals, dtype=np.float64)
    return float(np.mean(softplus(r + delta))) if r.size else 0.0


def spectral_prior_loss(cloud: GaussianCloud, delta: float = 0.01) -> float:
    return spectral_penalty(spectral_differences(cloud), delta)


def spectral_prior_grad(cloud: GaussianCloud, delta: float = 0.01):
    value = spectral_prior_loss(cloud, delta)
    n = cloud.count
    g_theta = np.zeros((n, 9))
    if n:
        s = sigmoid(spectral_differences(cloud) + delta) / (6 * n)
        g_theta[:, 0] = -s[:, 0]
        g_theta[:, 1] = s[:, 0] - s[:, 1]
        g_theta[:, 2] = s[:, 1]
        for base, k in ((3, 2), (6, 4)):
            g_theta[:, base] = s[:, k]
            g_theta[:, base + 1] = -s[:, k] + s[:, k + 1]
            g_theta[:, base + 2] = -s[:, k + 1]
    return value, _theta_to_raw(cloud, g_theta)
