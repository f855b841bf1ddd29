"""Synthetic underwater scenes with planted medium parameters.

Observations come from ``oracle_render``, a plain per-pixel implementation of
projection, medium colouring and alpha compositing that shares no code with the
tile rasterizer. Agreement between the two is what the synthetic experiments rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import dataio
from .errors import ArgumentError
from .metrics import psnr
from .optics import render_dual
from .rasterizer import contribution_weights
from .scene import Camera, GaussianCloud, SceneBundle, matrix_to_quat

LAYOUTS = ("grid", "random-box", "textured-plane")
RECOVERY_PSNR_CAP = 60.0


@dataclass
class SynthSpec:
    layout: str = "random-box"
    count: int = 50
    beta_d: tuple = (0.4, 0.15, 0.05)
    beta_b: tuple = (0.02, 0.06, 0.12)
    veil: tuple = (0.1, 0.3, 0.55)
    # extra media as ((beta_d, beta_b, veil), ...); with k entries the box is cut
    # into k + 1 equal slabs along x, the first slab using the fields above
    regions: tuple = ()
    cameras: int = 12
    ring_radius: float = 4.0
    ring_height: float = 1.5
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    fov_deg: float = 70.0
    extent: tuple = (2.5, 2.5, 1.0)
    scale_range: tuple = (0.1, 0.3)
    opacity_range: tuple = (0.6, 0.95)
    color_range: tuple = (0.15, 0.85)
    noise_sigma: float = 0.0
    init_jitter: float = 0.02
    holdout: int = 6
    ordering: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ArgumentError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.count < 1 or self.cameras < 1:
            raise ArgumentError("gaussian and camera counts must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ArgumentError("image size must be positive")
        if self.noise_sigma < 0:
            raise ArgumentError("noise sigma must be nonnegative")
        for bd, bb, v in self.media():
            if np.any(bd < 0) or np.any(bb < 0):
                raise ArgumentError("planted attenuation/backscatter must be >= 0")
            if np.any(v < 0) or np.any(v > 1):
                raise ArgumentError("planted veiling light must lie in [0, 1]")
            if self.ordering and not (bd[0] > bd[1] > bd[2] and bb[2] > bb[1] > bb[0] and v[2] > v[1] > v[0]):
                raise ArgumentError("planted medium violates the red/green/blue ordering (set ordering=False to allow)")

    def media(self) -> list:
        out = [tuple(np.asarray(x, dtype=np.float64).reshape(3) for x in (self.beta_d, self.beta_b, self.veil))]
        for reg in self.regions:
            out.append(tuple(np.asarray(x, dtype=np.float64).reshape(3) for x in reg))
        return out

    def region_of(self, positions) -> np.ndarray:
        positions = np.atleast_2d(positions)
        k = len(self.regions) + 1
        ex = float(self.extent[0])
        idx = np.floor((positions[:, 0] + ex) / (2 * ex) * k).astype(np.int64)
        return np.clip(idx, 0, k - 1)

    def planted_medium(self, positions):
        media = self.media()
        reg = self.region_of(positions)
        bd = np.stack([media[r][0] for r in reg])
        bb = np.stack([media[r][1] for r in reg])
        v = np.stack([media[r][2] for r in reg])
        return bd, bb, v

    def to_dict(self) -> dict:
        return asdict(self)


def ring_cameras(spec: SynthSpec) -> list:
    target = np.asarray(spec.look_at, dtype=np.float64)
    cams = []
    for k in range(spec.cameras):
        ang = 2 * math.pi * k / spec.cameras
        eye = target + [spec.ring_radius * math.cos(ang), spec.ring_radius * math.sin(ang), spec.ring_height]
        cams.append(Camera.look_at(eye, target, width=spec.width, height=spec.height,
                                   fov_deg=spec.fov_deg, name=f"view_{k:03d}.png"))
    return cams


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.sign(q[:, :1] + (q[:, :1] == 0))


def _layout(spec: SynthSpec, rng):
    n = spec.count
    ext = np.asarray(spec.extent, dtype=np.float64)
    lo, hi = spec.scale_range
    if spec.layout == "grid":
        k = int(math.ceil(n ** (1 / 3)))
        axes = [np.linspace(-e, e, k) if k > 1 else np.zeros(1) for e in ext]
        lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)[:n]
        spacing = float(np.min(2 * ext / max(k - 1, 1)))
        # break the lattice's mirror symmetry so no two depths tie exactly
        pos = lattice + rng.uniform(-0.02, 0.02, size=lattice.shape) * spacing
        scales = np.full((n, 3), np.clip(0.35 * spacing, lo, hi))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        colors = rng.uniform(*spec.color_range, size=(n, 3))
    elif spec.layout == "random-box":
        pos = rng.uniform(-ext, ext, size=(n, 3))
        scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 3)))
        quats = _random_quats(rng, n)
        colors = rng.uniform(*spec.color_range, size=(n, 3))
    else:
        kx = max(1, int(math.ceil(math.sqrt(n * ext[0] / ext[1]))))
        ky = int(math.ceil(n / kx))
        sx = 2 * ext[0] / max(kx - 1, 1)
        sy = 2 * ext[1] / max(ky - 1, 1)
        ii, jj = np.divmod(np.arange(n), ky)
        pos = np.stack([-ext[0] + ii * sx, -ext[1] + jj * sy, np.zeros(n)], axis=1)
        pos[:, :2] += rng.uniform(-0.02, 0.02, size=(n, 2)) * min(sx, sy)
        s = np.clip(0.6 * min(sx, sy), lo, hi)
        scales = np.tile([s, s, 0.1 * s], (n, 1))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        checker = ((ii + jj) % 2).astype(np.float64)[:, None]
        palette = np.array([[0.8, 0.7, 0.3], [0.25, 0.45, 0.7]])
        colors = checker * palette[0] + (1 - checker) * palette[1]
        colors = np.clip(colors + rng.uniform(-0.1, 0.1, size=(n, 3)), *spec.color_range)
    opac = rng.uniform(*spec.opacity_range, size=n)
    return pos, quats, scales, opac, colors


# ---------------------------------------------------------------------------
# scalar oracle renderer


def _rotate(q, v):
    w, u = q[0], q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def _oracle_footprints(gaussians, camera: Camera):
    """Camera-frame depth, pixel mean and inverse 2D covariance for each Gaussian."""
    out = []
    Rc, tc = camera.rotation, camera.translation
    for gid, g in enumerate(gaussians):
        pc = Rc @ g["pos"] + tc
        x, y, z = (float(v) for v in pc)
        if z <= 0.01:
            continue
        q = g["quat"] / math.sqrt(float(g["quat"] @ g["quat"]))
        axes = [_rotate(q, e) for e in np.eye(3)]
        sigma = sum(s * s * np.outer(a, a) for s, a in zip(g["scale"], axes))
        sig_cam = Rc @ sigma @ Rc.T
        J = np.array([[camera.fx / z, 0.0, -camera.fx * x / z**2], [0.0, camera.fy / z, -camera.fy * y / z**2]])
        cov = J @ sig_cam @ J.T + 0.3 * np.eye(2)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
        out.append(
            dict(
                id=gid,
                z=z,
                u=camera.fx * x / z + camera.cx,
                v=camera.fy * y / z + camera.cy,
                ia=float(inv[0, 0]),
                ib=float(inv[0, 1]),
                ic=float(inv[1, 1]),
                o=g["opacity"],
            )
        )
    out.sort(key=lambda f: (f["z"], f["id"]))
    return out


def oracle_render(gaussians, camera: Camera, background=(0.0, 0.0, 0.0)) -> dict:
    """Water and clear colour, depth and alpha by brute force over every pixel and Gaussian.

    ``gaussians`` is a list of dicts with decoded fields ``pos, quat, scale,
    opacity, color, beta_d, beta_b, veil`` (see ``oracle_gaussians``).
    """
    foot = _oracle_footprints(gaussians, camera)
    for f in foot:
        g = gaussians[f["id"]]
        c = [float(v) for v in g["color"]]
        f["clear"] = c
        f["water"] = [
            c[k] * math.exp(-float(g["beta_d"][k]) * f["z"])
            + float(g["veil"][k]) * (1.0 - math.exp(-float(g["beta_b"][k]) * f["z"]))
            for k in range(3)
        ]
    H, W = camera.height, camera.width
    water = np.zeros((H, W, 3))
    clear = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha_map = np.zeros((H, W))
    bg = [float(b) for b in background]
    thresh = 1.0 / 255.0
    for i in range(H):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            trans = 1.0
            cw = [0.0, 0.0, 0.0]
            cc = [0.0, 0.0, 0.0]
            dep = 0.0
            for f in foot:
                dx, dy = px - f["u"], py - f["v"]
                a = f["o"] * math.exp(-0.5 * (f["ia"] * dx * dx + 2.0 * f["ib"] * dx * dy + f["ic"] * dy * dy))
                if a < thresh:
                    continue
                wgt = a * trans
                for k in range(3):
                    cw[k] += wgt * f["water"][k]
                    cc[k] += wgt * f["clear"][k]
                dep += wgt * f["z"]
                trans *= 1.0 - a
                if trans < 1e-4:
                    break
            for k in range(3):
                water[i, j, k] = cw[k] + trans * bg[k]
                clear[i, j, k] = cc[k] + trans * bg[k]
            depth[i, j] = dep
            alpha_map[i, j] = 1.0 - trans
    return {"water": water, "clear": clear, "depth": depth, "alpha": alpha_map}


def oracle_gaussians(cloud: GaussianCloud) -> list:
    """Decode a cloud into the oracle's per-Gaussian records with scalar math."""
    out = []
    for k in range(cloud.count):
        out.append(
            dict(
                pos=cloud.positions[k].copy(),
                quat=cloud.rotations[k].copy(),
                scale=[math.exp(float(s)) for s in cloud.log_scales[k]],
                opacity=1.0 / (1.0 + math.exp(-float(cloud.opacity_logits[k]))),
                color=cloud.base_colors[k].copy(),
                beta_d=[math.log1p(math.exp(float(r))) if r < 30 else float(r) for r in cloud.atten_raw[k]],
                beta_b=[math.log1p(math.exp(float(r))) if r < 30 else float(r) for r in cloud.backsc_raw[k]],
                veil=[1.0 / (1.0 + math.exp(-float(r))) for r in cloud.veil_raw[k]],
            )
        )
    return out


# ---------------------------------------------------------------------------
# generation


@dataclass
class SynthScene:
    """Everything ``generate`` produced, including oracle renders of both branches."""

    spec: SynthSpec
    truth: GaussianCloud
    bundle: SceneBundle
    clear_images: list
    depths: list
    depth_affine: np.ndarray
    extras: dict = field(default_factory=dict)


def _init_points(spec, pos, cameras, images, rng):
    pts = pos + rng.normal(scale=spec.init_jitter, size=pos.shape) if spec.init_jitter > 0 else pos.copy()
    colors = np.zeros_like(pts)
    for k, p in enumerate(pts):
        samples = []
        for cam, img in zip(cameras, images):
            pc = cam.rotation @ p + cam.translation
            if pc[2] <= 0.01:
                continue
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            j, i = int(math.floor(u)), int(math.floor(v))
            if 0 <= i < cam.height and 0 <= j < cam.width:
                samples.append(img[i, j])
        colors[k] = np.mean(samples, axis=0) if samples else 0.5
    return pts, colors


def generate_scene(spec: SynthSpec) -> SynthScene:
    rng = np.random.default_rng(spec.seed)
    pos, quats, scales, opac, colors = _layout(spec, rng)
    bd, bb, veil = spec.planted_medium(pos)
    truth = GaussianCloud.from_decoded(pos, quats, scales, opac, colors, bd, bb, veil)
    cameras = ring_cameras(spec)
    records = oracle_gaussians(truth)
    images, clears, depths, pseudo, affine = [], [], [], [], []
    for cam in cameras:
        out = oracle_render(records, cam)
        img = out["water"]
        if spec.noise_sigma > 0:
            img = np.clip(img + rng.normal(scale=spec.noise_sigma, size=img.shape), 0.0, 1.0)
        a, b = rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0)
        images.append(img)
        clears.append(out["clear"])
        depths.append(out["depth"])
        pseudo.append(a * out["depth"] + b)
        affine.append((a, b))
    init = _init_points(spec, pos, cameras, images, rng)
    train, test = dataio.holdout_split(len(cameras), spec.holdout)
    bundle = SceneBundle(cameras, images, pseudo, init, train, test)
    return SynthScene(spec, truth, bundle, clears, depths, np.array(affine))


def generate(spec: SynthSpec):
    """``(ground-truth cloud, SceneBundle)``, deterministic in ``spec.seed``."""
    scene = generate_scene(spec)
    return scene.truth, scene.bundle


def write_scene_dir(scene: SynthScene, out_dir) -> Path:
    """Write COLMAP text, images/, depths/, clear/, gt_cloud.ply and planted_medium.txt."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(exist_ok=True)
    (out / "clear").mkdir(exist_ok=True)
    b = scene.bundle
    cam0 = b.cameras[0]
    cams = {1: dataio.ColmapCamera(1, "PINHOLE", cam0.width, cam0.height,
                                   np.array([cam0.fx, cam0.fy, cam0.cx, cam0.cy]))}
    images = {}
    for k, (cam, img, pd, clear) in enumerate(zip(b.cameras, b.images, b.pseudo_depths, scene.clear_images)):
        images[k + 1] = dataio.ColmapImage(k + 1, matrix_to_quat(cam.rotation), cam.translation.copy(), 1, cam.name)
        dataio.write_image(img, out / "images" / cam.name)
        dataio.write_image(clear, out / "clear" / cam.name)
        lo, hi = float(pd.min()), float(pd.max())
        norm = (pd - lo) / (hi - lo) if hi > lo else np.zeros_like(pd)
        dataio.write_depth16(norm, out / "depths" / f"{Path(cam.name).stem}_depth.png", 1.0)
    xyz, rgb = b.init_points
    model = dataio.ColmapModel(
        cams, images, np.arange(1, len(xyz) + 1), xyz, dataio.quantize(rgb), np.zeros(len(xyz))
    )
    dataio.write_colmap_text(model, out)
    dataio.write_ply(scene.truth, out / "gt_cloud.ply")
    media = scene.spec.media()
    record = {
        "layout": scene.spec.layout,
        "seed": scene.spec.seed,
        "holdout": scene.spec.holdout,
        "media": [{"beta_d": m[0].tolist(), "beta_b": m[1].tolist(), "veil": m[2].tolist()} for m in media],
        "region_axis": "x",
        "extent": list(scene.spec.extent),
    }
    (out / "planted_medium.txt").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# recovery statistics


@dataclass
class RecoveryReport:
    weighted_beta_d: np.ndarray
    weighted_beta_b: np.ndarray
    weighted_veil: np.ndarray
    mae_beta_d: np.ndarray
    mae_beta_b: np.ndarray
    mae_veil: np.ndarray
    ordering_fraction: float
    water_psnr_test: float
    clear_psnr: float
    total_weight: float

    def as_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def ordering_mask(cloud: GaussianCloud) -> np.ndarray:
    bd = cloud.beta_d
    return (bd[:, 0] > bd[:, 1]) & (bd[:, 1] > bd[:, 2])


def recovery_report(trained: GaussianCloud, truth: GaussianCloud, bundle: SceneBundle,
                    clear_images=None, views=None) -> RecoveryReport:
    """Contribution-weighted medium errors plus water/clear PSNR.

    Each trained Gaussian is compared with the planted medium of its nearest
    ground-truth Gaussian. Weights are the total blend weight a Gaussian receives
    over ``views`` (default: all bundle views). Water PSNR is averaged over the
    held-out views, clear PSNR over all views against ``clear_images`` (oracle
    clear renders); both are capped at 60 dB.
    """
    views = range(len(bundle.cameras)) if views is None else views
    weight = np.zeros(trained.count)
    water_psnr, clear_psnr = [], []
    test = set(bundle.test)
    for v in views:
        cam = bundle.cameras[v]
        dual = render_dual(trained, cam, record=True)
        weight += contribution_weights(dual.water, trained.count)
        if v in test:
            water_psnr.append(psnr(dual.water.color, bundle.images[v], RECOVERY_PSNR_CAP))
        if clear_images is not None:
            clear_psnr.append(psnr(dual.clear.color, clear_images[v], RECOVERY_PSNR_CAP))
    total = float(weight.sum())
    w = weight / total if total > 0 else np.full(trained.count, 1.0 / max(trained.count, 1))
    _, nearest = cKDTree(truth.positions).query(trained.positions)
    planted = (truth.beta_d[nearest], truth.beta_b[nearest], truth.veil[nearest])
    got = (trained.beta_d, trained.beta_b, trained.veil)
    means = [w @ g for g in got]
    maes = [w @ np.abs(g - p) for g, p in zip(got, planted)]
    return RecoveryReport(
        weighted_beta_d=means[0],
        weighted_beta_b=means[1],
        weighted_veil=means[2],
        mae_beta_d=maes[0],
        mae_beta_b=maes[1],
        mae_veil=maes[2],
        ordering_fraction=float(w @ ordering_mask(trained)),
        water_psnr_test=float(np.mean(water_psnr)) if water_psnr else float("nan"),
        clear_psnr=float(np.mean(clear_psnr)) if clear_psnr else float("nan"),
        total_weight=total,
    )
