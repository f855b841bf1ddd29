"""Reading and writing scenes: COLMAP text models, PNG/JPEG images, pseudo-depth, PLY clouds."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ContractViolation, ParseError, UnsupportedModelError
from .scene import Camera, GaussianCloud, SceneBundle, quat_to_matrix

SUPPORTED_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}

# ---------------------------------------------------------------------------
# COLMAP text format


@dataclass
class ColmapCamera:
    id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    def intrinsics(self):
        if self.model == "PINHOLE":
            fx, fy, cx, cy = self.params
        else:
            f, cx, cy = self.params
            fx = fy = f
        return float(fx), float(fy), float(cx), float(cy)


@dataclass
class ColmapImage:
    id: int
    qvec: np.ndarray  # (w, x, y, z), world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str
    points2d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass
class ColmapModel:
    cameras: dict
    images: dict
    point_ids: np.ndarray
    xyz: np.ndarray
    rgb: np.ndarray
    errors: np.ndarray

    def camera_for(self, image: ColmapImage, scale: int = 1) -> Camera:
        cam = self.cameras[image.camera_id]
        fx, fy, cx, cy = cam.intrinsics()
        c = Camera(cam.width, cam.height, fx, fy, cx, cy, quat_to_matrix(image.qvec), image.tvec, name=image.name)
        return c.scaled(scale) if scale != 1 else c


def _data_lines(path: Path):
    """Yield (line number, stripped text) for non-comment lines, blanks included."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if text.startswith("#"):
                continue
            yield lineno, text


def _floats(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"bad number: {exc}", path, lineno) from None


def _int(token, path, lineno):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"bad integer {token!r}", path, lineno) from None


def _read_cameras(path: Path) -> dict:
    cams = {}
    for lineno, text in _data_lines(path):
        if not text:
            continue
        tok = text.split()
        if len(tok) < 4:
            raise ParseError("camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]", path, lineno)
        model = tok[1]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedModelError(f"unsupported camera model {model} ({path}:{lineno})")
        params = _floats(tok[4:], path, lineno)
        if len(params) != SUPPORTED_MODELS[model]:
            raise ParseError(f"{model} expects {SUPPORTED_MODELS[model]} parameters, got {len(params)}", path, lineno)
        cid = _int(tok[0], path, lineno)
        cams[cid] = ColmapCamera(cid, model, _int(tok[2], path, lineno), _int(tok[3], path, lineno), np.array(params))
    return cams


def _read_images(path: Path, cameras: dict) -> dict:
    images = {}
    lines = iter(_data_lines(path))
    for lineno, text in lines:
        if not text:
            continue
        tok = text.split()
        if len(tok) < 10:
            raise ParseError("image line needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME", path, lineno)
        vals = _floats(tok[1:8], path, lineno)
        q = np.array(vals[:4])
        norm = np.linalg.norm(q)
        if not norm > 0:
            raise ParseError("zero quaternion", path, lineno)
        iid = _int(tok[0], path, lineno)
        cid = _int(tok[8], path, lineno)
        if cid not in cameras:
            raise ParseError(f"image {iid} references unknown camera {cid}", path, lineno)
        name = " ".join(tok[9:])
        pts_line = next(lines, (lineno + 1, ""))
        pts = pts_line[1].split()
        if len(pts) % 3:
            raise ParseError("POINTS2D line must hold X Y POINT3D_ID triples", path, pts_line[0])
        p2d = np.array(_floats(pts, path, pts_line[0])).reshape(-1, 3)
        images[iid] = ColmapImage(iid, q / norm, np.array(vals[4:7]), cid, name, p2d)
    return images


def _read_points(path: Path):
    ids, xyz, rgb, err = [], [], [], []
    for lineno, text in _data_lines(path):
        if not text:
            continue
        tok = text.split()
        if len(tok) < 8:
            raise ParseError("point line needs POINT3D_ID X Y Z R G B ERROR", path, lineno)
        ids.append(_int(tok[0], path, lineno))
        xyz.append(_floats(tok[1:4], path, lineno))
        rgb.append([_int(t, path, lineno) for t in tok[4:7]])
        err.append(_floats(tok[7:8], path, lineno)[0])
    return (
        np.array(ids, dtype=np.int64),
        np.array(xyz, dtype=np.float64).reshape(-1, 3),
        np.array(rgb, dtype=np.uint8).reshape(-1, 3),
        np.array(err, dtype=np.float64),
    )


def read_colmap_text(directory) -> ColmapModel:
    """Parse cameras.txt, images.txt and points3D.txt from ``directory``."""
    d = Path(directory)
    paths = [d / "cameras.txt", d / "images.txt", d / "points3D.txt"]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"missing COLMAP file {p}")
    cams = _read_cameras(paths[0])
    images = _read_images(paths[1], cams)
    return ColmapModel(cams, images, *_read_points(paths[2]))


def write_colmap_text(model: ColmapModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in model.cameras.values():
            fh.write(" ".join([str(c.id), c.model, str(c.width), str(c.height)] + [repr(float(p)) for p in c.params]) + "\n")
    with open(d / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in model.images.values():
            nums = [repr(float(v)) for v in (*im.qvec, *im.tvec)]
            fh.write(" ".join([str(im.id), *nums, str(im.camera_id), im.name]) + "\n")
            fh.write(" ".join(f"{float(x)!r} {float(y)!r} {int(pid)}" for x, y, pid in im.points2d.tolist()) + "\n")
    with open(d / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid, p, c, e in zip(model.point_ids, model.xyz, model.rgb, model.errors):
            x, y, z = (float(v) for v in p)
            fh.write(f"{int(pid)} {x!r} {y!r} {z!r} {int(c[0])} {int(c[1])} {int(c[2])} {float(e)!r}\n")


# ---------------------------------------------------------------------------
# images


def quantize(image) -> np.ndarray:
    """Clamp to [0, 1] and round half away from zero to 8-bit."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def write_image(image, path) -> None:
    img = quantize(image)
    if img.ndim == 3:
        img = img[..., ::-1]
    path = str(path)
    try:
        ok = cv2.imwrite(path, np.ascontiguousarray(img))
    except cv2.error as exc:
        raise OSError(f"cannot write {path}: {exc}") from None
    if not ok:
        raise OSError(f"cannot write {path}")


def read_image(path) -> np.ndarray:
    """Decode PNG/JPEG (8- or 16-bit) to float RGB in [0, 1]; no gamma change."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read image {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / scale
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[..., 2::-1]
    else:
        img = img[..., ::-1]
    return np.ascontiguousarray(img)


def write_depth16(depth, path, max_value: float | None = None) -> float:
    """Store ``depth / max_value`` as 16-bit grayscale; returns the scale used."""
    depth = np.asarray(depth, dtype=np.float64)
    if max_value is None:
        max_value = float(depth.max()) if depth.size and depth.max() > 0 else 1.0
    q = np.floor(np.clip(depth / max_value, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write {path}")
    return max_value


def read_depth(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read depth map {path}")
    if raw.ndim == 3:
        raw = raw[..., 0]
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale


# ---------------------------------------------------------------------------
# scene loading


def find_model_dir(root) -> Path:
    root = Path(root)
    for cand in (root, root / "sparse" / "0", root / "sparse"):
        if (cand / "cameras.txt").is_file():
            return cand
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    raise FileNotFoundError(f"no cameras.txt under {root}")


def holdout_split(n: int, every: int):
    """Every ``every``-th view (0, every, 2*every, ...) is held out for testing."""
    if every <= 0:
        return list(range(n)), []
    test = [i for i in range(n) if i % every == 0]
    return [i for i in range(n) if i % every != 0], test


def load_scene(root, downscale: int = 1, holdout: int = 8) -> SceneBundle:
    """Load a COLMAP text scene with images/ and optional depths/ subdirectories."""
    if downscale < 1:
        raise ValueError("downscale must be >= 1")
    root = Path(root)
    model = read_colmap_text(find_model_dir(root))
    image_dir = root / "images"
    depth_dirs = [root / "depths", image_dir]
    records = sorted(model.images.values(), key=lambda im: im.name)
    cameras, images, depths = [], [], []
    for rec in records:
        path = image_dir / rec.name
        if not path.is_file():
            raise FileNotFoundError(f"missing image file {rec.name} (looked in {image_dir})")
        cam = model.camera_for(rec, downscale)
        img = read_image(path)
        if img.shape[:2] != (cam.height, cam.width):
            img = cv2.resize(img, (cam.width, cam.height), interpolation=cv2.INTER_AREA)
        cameras.append(cam)
        images.append(img)
        stem = os.path.splitext(rec.name)[0]
        dpath = next((d / f"{stem}_depth.png" for d in depth_dirs if (d / f"{stem}_depth.png").is_file()), None)
        if dpath is None:
            depths.append(None)
            continue
        dep = read_depth(dpath)
        if dep.shape != img.shape[:2]:
            dep = cv2.resize(dep, (cam.width, cam.height), interpolation=cv2.INTER_NEAREST)
        if dep.shape != img.shape[:2]:
            raise ContractViolation(f"depth map {dpath.name} does not match image {rec.name}")
        depths.append(dep)
    if all(d is None for d in depths):
        depths = []
    train, test = holdout_split(len(records), holdout)
    points = (model.xyz.copy(), model.rgb.astype(np.float64) / 255.0)
    return SceneBundle(cameras, images, depths, points, train, test, root=str(root))


# ---------------------------------------------------------------------------
# PLY


PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"rot_{i}" for i in range(4)]
    + [f"scale_{i}" for i in range(3)]
    + ["opacity"]
    + [f"color_{c}" for c in "rgb"]
    + [f"beta_d_{c}" for c in "rgb"]
    + [f"beta_b_{c}" for c in "rgb"]
    + [f"veil_{c}" for c in "rgb"]
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def cloud_to_table(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate(
        [
            cloud.positions,
            cloud.rotations,
            cloud.log_scales,
            cloud.opacity_logits[:, None],
            cloud.base_colors,
            cloud.atten_raw,
            cloud.backsc_raw,
            cloud.veil_raw,
        ],
        axis=1,
    )


def table_to_cloud(t: np.ndarray) -> GaussianCloud:
    t = np.asarray(t, dtype=np.float64).reshape(-1, len(PLY_PROPERTIES))
    return GaussianCloud(
        positions=t[:, 0:3], rotations=t[:, 3:7], log_scales=t[:, 7:10], opacity_logits=t[:, 10],
        base_colors=t[:, 11:14], atten_raw=t[:, 14:17], backsc_raw=t[:, 17:20], veil_raw=t[:, 20:23],
    )


def write_ply(cloud: GaussianCloud, path) -> None:
    """Binary little-endian PLY, one float32 property per raw parameter."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.count}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    data = cloud_to_table(cloud).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ParseError("not a PLY file", path)
        count, props, fmt, lineno = None, [], None, 1
        in_vertex = False
        while True:
            line = fh.readline()
            lineno += 1
            if not line:
                raise ParseError("unterminated PLY header", path, lineno)
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unsupported property type {tok[1]}", path, lineno)
                props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
        if fmt != "binary_little_endian":
            raise ParseError(f"unsupported PLY format {fmt}", path)
        if count is None:
            raise ParseError("PLY has no vertex element", path)
        missing = [p for p in PLY_PROPERTIES if p not in dict(props)]
        if missing:
            raise ParseError(f"PLY lacks properties {missing}", path)
        data = np.fromfile(fh, dtype=np.dtype(props), count=count)
    if len(data) != count:
        raise ParseError(f"PLY truncated: {len(data)} of {count} vertices", path)
    return table_to_cloud(np.stack([data[p].astype(np.float64) for p in PLY_PROPERTIES], axis=1))
