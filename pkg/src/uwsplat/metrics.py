"""Image-quality and color-fidelity metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DegeneratePatchError, ParseError
from .losses import ssim as _ssim

PSNR_CAP = 100.0
CHART_PATCHES = 12

# IEC 61966-2-1 linear sRGB -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5); the same kernel the loss uses."""
    return _ssim(a, b)


def srgb_to_linear(rgb):
    c = np.asarray(rgb, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(rgb):
    xyz = srgb_to_linear(rgb) @ _RGB_TO_XYZ.T / D65_WHITE
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def delta_e2000_lab(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """CIEDE2000 difference of CIELAB colors (broadcasts over leading axes)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2
    c7 = c_bar**7
    G = 0.5 * (1 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, np.degrees(np.arctan2(b1, a1p)) % 360)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, np.degrees(np.arctan2(b2, a2p)) % 360)

    dLp = L2 - L1
    dCp = c2p - c1p
    zero_chroma = c1p * c2p == 0
    dh = h2p - h1p
    dhp = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dhp = np.where(zero_chroma, 0.0, dhp)
    dHp = 2 * np.sqrt(c1p * c2p) * np.sin(np.radians(dhp) / 2)

    Lbar = (L1 + L2) / 2
    Cbar = (c1p + c2p) / 2
    hsum = h1p + h2p
    hbar = np.where(
        zero_chroma,
        hsum,
        np.where(np.abs(h1p - h2p) <= 180, hsum / 2, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2)),
    )
    T = (
        1
        - 0.17 * np.cos(np.radians(hbar - 30))
        + 0.24 * np.cos(np.radians(2 * hbar))
        + 0.32 * np.cos(np.radians(3 * hbar + 6))
        - 0.20 * np.cos(np.radians(4 * hbar - 63))
    )
    d_theta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    Cbar7 = Cbar**7
    RC = 2 * np.sqrt(Cbar7 / (Cbar7 + 25.0**7))
    SL = 1 + 0.015 * (Lbar - 50) ** 2 / np.sqrt(20 + (Lbar - 50) ** 2)
    SC = 1 + 0.045 * Cbar
    SH = 1 + 0.015 * Cbar * T
    RT = -np.sin(np.radians(2 * d_theta)) * RC
    tL, tC, tH = dLp / (kL * SL), dCp / (kC * SC), dHp / (kH * SH)
    return np.sqrt(tL**2 + tC**2 + tH**2 + RT * tC * tH)


def delta_e2000(rgb1, rgb2):
    """CIEDE2000 between sRGB colors in [0, 1]."""
    return delta_e2000_lab(srgb_to_lab(rgb1), srgb_to_lab(rgb2))


@dataclass
class ChartSpec:
    """Color-chart patches: pixel rectangles (x, y, w, h) and sRGB references."""

    rects: np.ndarray
    references: np.ndarray

    def __post_init__(self):
        self.rects = np.asarray(self.rects, dtype=np.int64).reshape(-1, 4)
        self.references = np.asarray(self.references, dtype=np.float64).reshape(-1, 3)
        if len(self.rects) != len(self.references):
            raise ArgumentError("each patch needs one reference color")
        if len(self.rects) != CHART_PATCHES:
            raise ArgumentError(f"a chart has {CHART_PATCHES} patches, got {len(self.rects)}")
        if np.any(self.rects[:, 2:] <= 0) or np.any(self.rects[:, :2] < 0):
            raise ArgumentError("patch rectangles need nonnegative origin and positive size")

    def check_bounds(self, shape) -> None:
        h, w = shape[:2]
        x, y, rw, rh = self.rects.T
        bad = np.flatnonzero((x + rw > w) | (y + rh > h))
        if bad.size:
            raise ArgumentError(f"patch {int(bad[0])} lies outside the {w}x{h} image")

    def patch_means(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        self.check_bounds(image.shape)
        return np.array([image[y : y + h, x : x + w].reshape(-1, 3).mean(axis=0) for x, y, w, h in self.rects])


def read_chart(path) -> ChartSpec:
    """Sidecar: one line per patch, ``x y w h ref_r ref_g ref_b``; '#' starts a comment."""
    rects, refs = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        tok = text.split()
        if len(tok) != 7:
            raise ParseError("expected 'x y w h ref_r ref_g ref_b'", path, lineno)
        try:
            rects.append([int(t) for t in tok[:4]])
            refs.append([float(t) for t in tok[4:]])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return ChartSpec(rects, refs)


def write_chart(chart: ChartSpec, path) -> None:
    lines = [
        f"{x} {y} {w} {h} {r!r} {g!r} {b!r}"
        for (x, y, w, h), (r, g, b) in zip(chart.rects.tolist(), chart.references.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def patch_angles(restored, chart: ChartSpec) -> np.ndarray:
    means = chart.patch_means(restored)
    refs = chart.references
    nm = np.linalg.norm(means, axis=1)
    nr = np.linalg.norm(refs, axis=1)
    for k in range(len(means)):
        if nm[k] == 0:
            raise DegeneratePatchError(f"patch {k} has zero mean color")
        if nr[k] == 0:
            raise DegeneratePatchError(f"patch {k} has a zero reference color")
    cos = np.sum(means * refs, axis=1) / (nm * nr)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def mean_angular_error(restored, chart: ChartSpec) -> float:
    """Mean angle in degrees between patch-mean RGB and reference RGB."""
    return float(np.mean(patch_angles(restored, chart)))


def chart_delta_e(restored, chart: ChartSpec) -> float:
    """Mean CIEDE2000 between patch-mean colors and references."""
    return float(np.mean(delta_e2000(chart.patch_means(restored), chart.references)))
