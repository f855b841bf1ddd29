"""Shared data types: the Gaussian cloud, cameras, scene bundles and render outputs.

Medium coefficients are stored raw and decoded on read:
``beta = softplus(raw)`` for attenuation/backscatter and ``veil = sigmoid(raw)``.
Opacities are stored as logits and scales as logarithms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, DegenerateRotationError

PARAM_NAMES = (
    "positions",
    "rotations",
    "log_scales",
    "opacity_logits",
    "base_colors",
    "atten_raw",
    "backsc_raw",
    "veil_raw",
)

PARAM_WIDTH = {
    "positions": 3,
    "rotations": 4,
    "log_scales": 3,
    "opacity_logits": None,
    "base_colors": 3,
    "atten_raw": 3,
    "backsc_raw": 3,
    "veil_raw": 3,
}

MEDIUM_PARAMS = ("atten_raw", "backsc_raw", "veil_raw")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) loses precision for large y; y + log(1 - exp(-y)) does not
    with np.errstate(divide="ignore"):
        return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, normalizing first.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm == 0.0):
        raise DegenerateRotationError("zero-norm quaternion")
    w, x, y, z = (q / norm[:, None]).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) unit quaternion with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass
class GaussianCloud:
    """Structure-of-arrays store for N Gaussian primitives."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    base_colors: np.ndarray
    atten_raw: np.ndarray
    backsc_raw: np.ndarray
    veil_raw: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.positions.shape[0]
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            width = PARAM_WIDTH[name]
            expected = (n,) if width is None else (n, width)
            if arr.shape != expected:
                raise ArgumentError(f"{name} has shape {arr.shape}, expected {expected}")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> GaussianCloud:
        return cls(**{n: np.zeros((0,) if PARAM_WIDTH[n] is None else (0, PARAM_WIDTH[n])) for n in PARAM_NAMES})

    @classmethod
    def from_decoded(
        cls,
        positions,
        rotations=None,
        scales=None,
        opacities=None,
        colors=None,
        beta_d=None,
        beta_b=None,
        veil=None,
    ) -> GaussianCloud:
        """Build a cloud from physical values; medium defaults are ~zero."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = positions.shape[0]

        def per_gaussian(value, default, width=3):
            if value is None:
                value = default
            arr = np.asarray(value, dtype=np.float64)
            shape = (n,) if width is None else (n, width)
            return np.broadcast_to(arr, shape).copy()

        rot = per_gaussian(rotations, [1.0, 0.0, 0.0, 0.0], 4)
        tiny = 1e-12
        return cls(
            positions=positions,
            rotations=rot,
            log_scales=np.log(per_gaussian(scales, 0.1)),
            opacity_logits=logit(per_gaussian(opacities, 0.9, None)),
            base_colors=per_gaussian(colors, 0.5),
            atten_raw=inverse_softplus(np.maximum(per_gaussian(beta_d, 0.0), tiny)),
            backsc_raw=inverse_softplus(np.maximum(per_gaussian(beta_b, 0.0), tiny)),
            veil_raw=logit(np.clip(per_gaussian(veil, 0.5), tiny, 1 - tiny)),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, index) -> GaussianCloud:
        return GaussianCloud(**{k: v[index] for k, v in self.params().items()})

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        return GaussianCloud(
            **{k: np.concatenate([getattr(self, k), getattr(other, k)]) for k in PARAM_NAMES}
        )

    # decoded views
    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def beta_d(self) -> np.ndarray:
        return softplus(self.atten_raw)

    @property
    def beta_b(self) -> np.ndarray:
        return softplus(self.backsc_raw)

    @property
    def veil(self) -> np.ndarray:
        return sigmoid(self.veil_raw)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations) if self.count else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        M = R * self.scales[:, None, :]
        return M @ np.swapaxes(M, 1, 2)


def _check_index(cloud: GaussianCloud, index: int) -> None:
    if not 0 <= index < cloud.count:
        raise ArgumentError(f"index {index} out of range for cloud of {cloud.count}")


def decode_medium(cloud: GaussianCloud, index: int):
    """Return ``(beta_d, beta_b, veil)`` of one Gaussian in physical units."""
    _check_index(cloud, index)
    return (
        softplus(cloud.atten_raw[index]),
        softplus(cloud.backsc_raw[index]),
        sigmoid(cloud.veil_raw[index]),
    )


def covariance_of(cloud: GaussianCloud, index: int) -> np.ndarray:
    _check_index(cloud, index)
    R = quat_to_matrix(cloud.rotations[index])
    M = R * np.exp(cloud.log_scales[index])[None, :]
    return M @ M.T


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera frame.

    Pixel (row i, column j) has its center at image coordinates (j + 0.5, i + 0.5),
    the convention COLMAP intrinsics use.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise ArgumentError("camera dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ArgumentError("principal point must lie inside the image")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ArgumentError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: int) -> Camera:
        return replace(
            self,
            width=self.width // factor,
            height=self.height // factor,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
        )

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width, height, fov_deg=60.0, name=""):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, R, -R @ eye, name=name)


def camera_distance(position, camera: Camera) -> float:
    """Signed depth of a world point along the camera's optical axis."""
    p = np.asarray(position, dtype=np.float64)
    return float(camera.rotation[2] @ p + camera.translation[2])


@dataclass
class SceneBundle:
    cameras: list
    images: list
    pseudo_depths: list
    init_points: tuple  # (positions (P, 3), colors (P, 3) in [0, 1])
    train: list
    test: list
    root: str | None = None

    def __post_init__(self):
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape[:2] != (cam.height, cam.width):
                raise ArgumentError(f"image {i} is {img.shape[:2]}, camera expects {(cam.height, cam.width)}")
        for i, depth in enumerate(self.pseudo_depths):
            if depth is not None and depth.shape != self.images[i].shape[:2]:
                raise ArgumentError(f"pseudo-depth {i} does not match its image")

    @property
    def has_depth(self) -> bool:
        return len(self.pseudo_depths) > 0 and all(d is not None for d in self.pseudo_depths)


@dataclass
class BlendRecord:
    """Per-pixel contributor lists in CSR layout.

    Pixel ``p = row * width + col`` owns entries ``offsets[p]:offsets[p + 1]``, in
    front-to-back order. ``slot`` indexes the projection's sorted arrays, ``dup``
    the tile-binned list used to accumulate gradients without write conflicts.
    """

    offsets: np.ndarray
    slot: np.ndarray
    dup: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    final_transmittance: np.ndarray
    projection: object
    background: np.ndarray
    tiles: object

    def gaussian_ids(self) -> np.ndarray:
        return self.projection.ids[self.slot]

    def contributors(self, row: int, col: int):
        """``(gaussian_id, alpha, transmittance_before)`` tuples for one pixel."""
        p = row * self.tiles.width + col
        lo, hi = self.offsets[p], self.offsets[p + 1]
        ids = self.projection.ids[self.slot[lo:hi]]
        return list(zip(ids.tolist(), self.alpha[lo:hi].tolist(), self.transmittance[lo:hi].tolist()))


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    blend_record: BlendRecord | None = None

