"""Training loop: per-group Adam, densification, checkpoints and loss logging."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import dataio
from .diff import Targets, evaluate
from .errors import ArgumentError, NumericalFailure
from .losses import LossReport, LossWeights
from .metrics import psnr
from .optics import render_dual
from .scene import PARAM_NAMES, GaussianCloud, SceneBundle, inverse_softplus, logit, sigmoid, softplus

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
INIT_OPACITY = 0.1
INIT_MEDIUM_RAW = -4.0
FALLBACK_SCALE = 0.01
MEDIUM_FLOOR = 1e-8
VEIL_MARGIN = 1e-6

LR_FIELDS = {
    "positions": "lr_positions",
    "rotations": "lr_rotations",
    "log_scales": "lr_log_scales",
    "opacity_logits": "lr_opacity",
    "base_colors": "lr_colors",
    "atten_raw": "lr_atten",
    "backsc_raw": "lr_backsc",
    "veil_raw": "lr_veil",
}


@dataclass
class TrainConfig:
    iterations: int = 15000
    densify_interval: int = 500
    reg_interval: int = 10
    lr_positions: float = 1.6e-4
    lr_positions_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_atten: float = 1e-4
    lr_backsc: float = 1e-4
    lr_veil: float = 1e-3
    # "decoded": medium groups step in physical units; "raw": on the raw parameters
    medium_space: str = "decoded"
    scale_position_lr: bool = True
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.2
    lambda_spatial: float = 0.1
    lambda_spectral: float = 0.1
    lambda_exposure: float = 0.1
    tau: float = 0.9
    delta: float = 0.01
    smooth_radius: float = 0.05
    smooth_min_neighbors: int = 2
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    densify_until: float = 0.5
    clone_scale_fraction: float = 0.01
    split_scale_divisor: float = 1.6
    # 0 = unlimited; otherwise densification keeps the highest-gradient candidates that fit
    max_gaussians: int = 0
    clamp_colors: bool = True
    checkpoint_interval: int = 0
    tile_size: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in LR_FIELDS.values():
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be > 0")
        if not self.lr_positions_final > 0:
            raise ArgumentError("lr_positions_final must be > 0")
        if self.densify_interval < 1 or self.reg_interval < 1:
            raise ArgumentError("densify_interval and reg_interval must be >= 1")
        if self.iterations < 0:
            raise ArgumentError("iterations must be >= 0")
        if self.medium_space not in ("decoded", "raw"):
            raise ArgumentError("medium_space must be 'decoded' or 'raw'")
        if self.checkpoint_interval < 0:
            raise ArgumentError("checkpoint_interval must be >= 0")
        if self.max_gaussians < 0:
            raise ArgumentError("max_gaussians must be >= 0")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_ssim=self.lambda_ssim,
            depth=self.lambda_depth,
            spatial=self.lambda_spatial,
            spectral=self.lambda_spectral,
            exposure=self.lambda_exposure,
            tau=self.tau,
            delta=self.delta,
            smooth_radius=self.smooth_radius,
            smooth_min_neighbors=self.smooth_min_neighbors,
        )

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


# ---------------------------------------------------------------------------
# initialization


def scene_extent(cameras) -> float:
    """1.1 x the largest camera-center distance from the mean center (at least 1e-6)."""
    centers = np.stack([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) if len(centers) else 0.0
    return max(1.1 * radius, 1e-6)


def initial_log_scales(points: np.ndarray) -> np.ndarray:
    """Log of the mean distance to the 3 nearest other points; a lone point gets log(0.01)."""
    n = len(points)
    if n < 2:
        return np.full(n, math.log(FALLBACK_SCALE))
    k = min(3, n - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean = dist[:, 1:].mean(axis=1)
    mean = np.where(mean > 0, mean, FALLBACK_SCALE)
    return np.log(mean)


def init_from_points(points, colors, images=None) -> GaussianCloud:
    """One isotropic, near-transparent, near-clear-water Gaussian per sparse point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ArgumentError("cannot initialize from an empty point list")
    colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
    if images:
        mean = np.mean([np.asarray(im, dtype=np.float64).reshape(-1, 3).mean(axis=0) for im in images], axis=0)
    else:
        mean = np.full(3, 0.5)
    veil = logit(np.clip(mean, 1e-3, 1 - 1e-3))
    return GaussianCloud(
        positions=points.copy(),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(initial_log_scales(points)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(INIT_OPACITY))),
        base_colors=np.clip(colors, 0.0, 1.0),
        atten_raw=np.full((n, 3), INIT_MEDIUM_RAW),
        backsc_raw=np.full((n, 3), INIT_MEDIUM_RAW),
        veil_raw=np.tile(veil, (n, 1)),
    )


# ---------------------------------------------------------------------------
# Adam


def position_lr(config: TrainConfig, iteration: int, extent: float = 1.0) -> float:
    """Log-linear decay from lr_positions to lr_positions_final over the run."""
    r = min(max(iteration / max(config.iterations, 1), 0.0), 1.0)
    lr = math.exp((1 - r) * math.log(config.lr_positions) + r * math.log(config.lr_positions_final))
    return lr * (extent if config.scale_position_lr else 1.0)


_DECODERS = {
    "atten_raw": (softplus, lambda raw: sigmoid(raw), lambda v: inverse_softplus(np.maximum(v, MEDIUM_FLOOR))),
    "backsc_raw": (softplus, lambda raw: sigmoid(raw), lambda v: inverse_softplus(np.maximum(v, MEDIUM_FLOOR))),
    "veil_raw": (
        sigmoid,
        lambda raw: sigmoid(raw) * (1 - sigmoid(raw)),
        lambda v: logit(np.clip(v, VEIL_MARGIN, 1 - VEIL_MARGIN)),
    ),
}


class Adam:
    """Per-parameter-group Adam; moments live in the units each group steps in."""

    def __init__(self, cloud: GaussianCloud, config: TrainConfig, extent: float = 1.0):
        self.config = config
        self.extent = extent
        self.m = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        self.t = 0

    def lr(self, name: str, iteration: int) -> float:
        if name == "positions":
            return position_lr(self.config, iteration, self.extent)
        return getattr(self.config, LR_FIELDS[name])

    def step(self, cloud: GaussianCloud, grads: dict, iteration: int) -> None:
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(grads[name])):
                raise NumericalFailure(f"non-finite gradient in parameter group {name}", term=name)
        self.t += 1
        bc1 = 1 - ADAM_BETA1**self.t
        bc2 = 1 - ADAM_BETA2**self.t
        for name in PARAM_NAMES:
            g = grads[name]
            arr = getattr(cloud, name)
            decoded = self.config.medium_space == "decoded" and name in _DECODERS
            if decoded:
                decode, slope, encode = _DECODERS[name]
                value = decode(arr)
                g = g / slope(arr)
            else:
                value = arr
            m, v = self.m[name], self.v[name]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            update = self.lr(name, iteration) * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            if decoded:
                arr[...] = encode(value - update)
            else:
                arr -= update
        if self.config.clamp_colors:
            np.clip(cloud.base_colors, 0.0, 1.0, out=cloud.base_colors)

    def remap(self, keep: np.ndarray, n_new: int) -> None:
        """Keep moments of surviving Gaussians (in order) and append zeros for new ones."""
        for store in (self.m, self.v):
            for k, arr in store.items():
                pad = np.zeros((n_new,) + arr.shape[1:])
                store[k] = np.concatenate([arr[keep], pad])


# ---------------------------------------------------------------------------
# state, densification


@dataclass
class TrainState:
    cloud: GaussianCloud
    config: TrainConfig
    adam: Adam
    extent: float
    rng: np.random.Generator
    iteration: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    queue: list = field(default_factory=list)

    def __post_init__(self):
        if self.grad_accum is None:
            self.reset_accumulators()

    def reset_accumulators(self) -> None:
        self.grad_accum = np.zeros(self.cloud.count)
        self.grad_count = np.zeros(self.cloud.count, dtype=np.int64)


def new_state(cloud: GaussianCloud, config: TrainConfig, cameras) -> TrainState:
    extent = scene_extent(cameras)
    return TrainState(cloud, config, Adam(cloud, config, extent), extent, np.random.default_rng(config.seed))


@dataclass
class DensifyStats:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(state: TrainState) -> DensifyStats:
    """Clone small / split large high-gradient Gaussians, then prune transparent ones."""
    cfg = state.config
    cloud = state.cloud
    n = cloud.count
    mean_grad = state.grad_accum / np.maximum(state.grad_count, 1)
    hot = mean_grad > cfg.densify_grad_threshold
    if cfg.max_gaussians:
        room = max(cfg.max_gaussians - n, 0)
        cand = np.flatnonzero(hot)
        if cand.size > room:
            # every candidate adds one Gaussian (clone: +1, split: 2 replace 1)
            order = cand[np.argsort(-mean_grad[cand], kind="stable")]
            hot = np.zeros(n, dtype=bool)
            hot[order[:room]] = True
    max_scale = cloud.scales.max(axis=1) if n else np.zeros(0)
    small = max_scale < cfg.clone_scale_fraction * state.extent
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)

    children = [cloud.subset(clone_idx)]
    if split_idx.size:
        parent = cloud.subset(split_idx)
        two = parent.subset(np.repeat(np.arange(split_idx.size), 2))
        local = state.rng.normal(size=(two.count, 3)) * two.scales
        rot = two.rotation_matrices()
        two.positions += np.einsum("nij,nj->ni", rot, local)
        two.log_scales -= math.log(cfg.split_scale_divisor)
        children.append(two)
    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    grown = cloud.subset(np.flatnonzero(keep))
    for c in children:
        grown = grown.concat(c)
    n_new = sum(c.count for c in children)
    keep_idx = np.flatnonzero(keep)

    alive = grown.opacities >= cfg.prune_opacity
    pruned = int((~alive).sum())
    state.adam.remap(keep_idx, n_new)
    if pruned:
        idx = np.flatnonzero(alive)
        grown = grown.subset(idx)
        state.adam.remap(idx, 0)
    state.cloud = grown
    state.reset_accumulators()
    return DensifyStats(cloned=int(clone_idx.size), split=int(split_idx.size), pruned=pruned)


# ---------------------------------------------------------------------------
# one step


def next_view(state: TrainState, views) -> int:
    if not state.queue:
        state.queue = [int(views[i]) for i in state.rng.permutation(len(views))]
    return state.queue.pop(0)


def regularizers_active(config: TrainConfig, iteration: int) -> bool:
    return iteration % config.reg_interval == 0


def train_step(state: TrainState, camera, targets: Targets) -> LossReport:
    """Evaluate the objective on one view and apply one Adam update."""
    cfg = state.config
    ev = evaluate(
        state.cloud,
        camera,
        targets,
        cfg.loss_weights(),
        regularize=regularizers_active(cfg, state.iteration),
        tile_size=cfg.tile_size,
    )
    ids = ev.dual.projection.ids
    g2d = ev.water_grads.mean2d + ev.clear_grads.mean2d
    ndc = g2d * np.array([camera.width / 2.0, camera.height / 2.0])
    state.grad_accum[ids] += np.linalg.norm(ndc, axis=1)
    state.grad_count[ids] += 1
    state.adam.step(state.cloud, ev.grads.as_dict(), state.iteration)
    return ev.report


def should_densify(config: TrainConfig, iteration: int) -> bool:
    done = iteration + 1
    return done % config.densify_interval == 0 and done < config.densify_until * config.iterations


# ---------------------------------------------------------------------------
# checkpoints and logs

LOG_COLUMNS = ("iteration", "view") + LossReport.TERMS + ("total", "gaussians")


def checkpoint_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    return path, path.with_suffix(".state.npz")


def save_checkpoint(state: TrainState, path) -> None:
    """PLY of the cloud plus ``<stem>.state.npz`` with the optimizer state.

    npz keys: ``iteration`` (int64 scalar), ``adam_step`` (int64 scalar),
    ``config_hash`` (sha256 hex of the config, unicode scalar), ``config_json``,
    ``extent`` (float64 scalar), ``m_<group>`` / ``v_<group>`` (float64, same shape
    as the group), ``grad_accum`` (N,), ``grad_count`` (N,) int64.
    """
    ply, side = checkpoint_paths(path)
    ply.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_ply(state.cloud, ply)
    arrays = {
        "iteration": np.int64(state.iteration),
        "adam_step": np.int64(state.adam.t),
        "config_hash": np.str_(state.config.digest()),
        "config_json": np.str_(json.dumps(state.config.as_dict(), sort_keys=True)),
        "extent": np.float64(state.extent),
        "grad_accum": state.grad_accum,
        "grad_count": state.grad_count,
    }
    for k in PARAM_NAMES:
        arrays[f"m_{k}"] = state.adam.m[k]
        arrays[f"v_{k}"] = state.adam.v[k]
    np.savez(side, **arrays)


def load_checkpoint(path):
    """``(cloud, metadata dict or None)``; metadata is None when no sidecar exists."""
    ply, side = checkpoint_paths(path)
    cloud = dataio.read_ply(ply)
    if not side.is_file():
        return cloud, None
    with np.load(side) as data:
        meta = {k: data[k] for k in data.files}
    return cloud, meta


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


@dataclass
class TrainResult:
    cloud: GaussianCloud
    reports: list
    state: TrainState
    train_psnr: dict


def training_targets(bundle: SceneBundle, view: int, use_depth: bool) -> Targets:
    depth = bundle.pseudo_depths[view] if use_depth and bundle.has_depth else None
    return Targets(bundle.images[view], depth)


def train(bundle: SceneBundle, config: TrainConfig, out_dir=None, cloud: GaussianCloud | None = None,
          callback=None) -> TrainResult:
    """Run ``config.iterations`` steps over the bundle's training views.

    With ``out_dir`` set, writes ``loss_log.tsv`` (one line per iteration),
    ``checkpoints/iter_XXXXXX.ply`` every ``checkpoint_interval`` iterations,
    ``final.ply`` (when at least one step ran) and ``train_psnr.tsv`` (water-branch PSNR per training view).
    ``callback(state, report)`` runs after every step.
    """
    views = list(bundle.train) or list(range(len(bundle.cameras)))
    if cloud is None:
        xyz, rgb = bundle.init_points
        cloud = init_from_points(xyz, rgb, [bundle.images[i] for i in views])
    state = new_state(cloud.copy(), config, [bundle.cameras[i] for i in views])
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "loss_log.tsv", "w", encoding="utf-8")
        log.write("\t".join(LOG_COLUMNS) + "\n")
    use_depth = config.lambda_depth > 0
    reports = []
    try:
        if out is not None:
            save_checkpoint(state, out / "checkpoints" / "iter_000000.ply")
        for it in range(config.iterations):
            state.iteration = it
            v = next_view(state, views)
            report = train_step(state, bundle.cameras[v], training_targets(bundle, v, use_depth))
            reports.append(report)
            if log is not None:
                row = [str(it), bundle.cameras[v].name or str(v)]
                row += [_fmt(getattr(report, t)) for t in LossReport.TERMS]
                row += [_fmt(report.total), str(state.cloud.count)]
                log.write("\t".join(row) + "\n")
            if should_densify(config, it):
                densify_and_prune(state)
            state.iteration = it + 1
            if out is not None and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
                save_checkpoint(state, out / "checkpoints" / f"iter_{it + 1:06d}.ply")
            if callback is not None:
                callback(state, report)
    finally:
        if log is not None:
            log.close()
    train_psnr = {}
    for v in views:
        cam = bundle.cameras[v]
        train_psnr[cam.name or str(v)] = float(psnr(render_dual(state.cloud, cam, tile_size=config.tile_size,
                                                          record=False).water.color, bundle.images[v]))
    if out is not None and config.iterations > 0:
        save_checkpoint(state, out / "final.ply")
        with open(out / "train_psnr.tsv", "w", encoding="utf-8") as fh:
            fh.write("view\tpsnr_water\n")
            for k, p in train_psnr.items():
                fh.write(f"{k}\t{p!r}\n")
    return TrainResult(state.cloud, reports, state, train_psnr)
