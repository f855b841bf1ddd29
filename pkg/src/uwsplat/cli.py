"""Command-line entry point: ``uwsplat {synth,train,render,restore,eval}``.

Configuration is a flat ``key = value`` text file ('#' comments). Command-line
flags override file values. Exit codes: 0 success, 1 pipeline failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import _threads, dataio
from .errors import ArgumentError, ConfigError, SplatError
from .metrics import ChartSpec, chart_delta_e, mean_angular_error, psnr, read_chart, ssim
from .optics import BRANCHES, render_branch
from .optim import TrainConfig, load_checkpoint, train
from .synth import SynthSpec, generate_scene, write_scene_dir

log = logging.getLogger("uwsplat")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

RUN_KEYS = {
    "scene": str,
    "output": str,
    "downscale": int,
    "holdout": int,
    "branch": str,
    "depth": bool,
    "views": str,
    "charts": str,
}


class UsageError(SplatError):
    pass


# ---------------------------------------------------------------------------
# config files


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into a dict of raw strings."""
    out = {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in text.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _parse_regions(text: str) -> tuple:
    # regions = bd_r,bd_g,bd_b bb_r,bb_g,bb_b v_r,v_g,v_b ; ...
    out = []
    for chunk in text.split(";"):
        parts = chunk.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ValueError("each region needs three comma-separated triples")
        out.append(tuple(_parse_floats(p) for p in parts))
    return tuple(out)


def _convert(key: str, text: str, kind):
    if key == "regions":
        return _parse_regions(text)
    if isinstance(kind, str):
        kind = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(kind, str)
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return _parse_floats(text)
    return text


def typed_config(raw: dict, schema: dict) -> dict:
    """Convert raw strings with ``schema`` (key -> type); unknown keys are an error."""
    out = {}
    for key, text in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _convert(key, text, schema[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return out


def _schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def synth_schema() -> dict:
    return _schema(SynthSpec)


def run_schema() -> dict:
    schema = _schema(TrainConfig)
    schema.update(RUN_KEYS)
    return schema


def split_run_config(values: dict):
    train_keys = {f.name for f in fields(TrainConfig)}
    tc = {k: v for k, v in values.items() if k in train_keys}
    run = {k: v for k, v in values.items() if k not in train_keys}
    try:
        return TrainConfig(**tc), run
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(args) -> tuple[TrainConfig, dict]:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    values = typed_config(raw, run_schema())
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "downscale", None) is not None:
        values["downscale"] = args.downscale
    return split_run_config(values)


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def _scene_dir(path) -> Path:
    if path is None:
        raise UsageError("no scene directory given")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"scene directory {p} does not exist")
    return p


def _select_views(bundle, which: str):
    if which == "all":
        return list(range(len(bundle.cameras)))
    if which == "train":
        return list(bundle.train)
    if which == "test":
        return list(bundle.test)
    names = {c.name: i for i, c in enumerate(bundle.cameras)}
    wanted = [w.strip() for w in which.split(",") if w.strip()]
    missing = [w for w in wanted if w not in names]
    if missing:
        raise UsageError(f"unknown camera name(s): {', '.join(missing)}")
    return [names[w] for w in wanted]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    raw = read_config_file(args.config) if args.config else {}
    values = typed_config(raw, synth_schema())
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        spec = SynthSpec(**values)
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    _prepare_out(out, args.force)
    scene = generate_scene(spec)
    write_scene_dir(scene, out)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    config, run = load_run_config(args)
    scene = _scene_dir(args.scene or run.get("scene"))
    output = args.out or run.get("output")
    if output is None:
        raise UsageError("no output directory given")
    out = Path(output)
    _prepare_out(out, args.force)
    bundle = dataio.load_scene(scene, run.get("downscale", 1), run.get("holdout", 8))
    (out / "config.txt").write_text(
        "".join(f"{k} = {_config_value(v)}\n" for k, v in config.as_dict().items()), encoding="utf-8"
    )
    result = train(bundle, config, out)
    log.info("trained %d iterations, %d gaussians", config.iterations, result.cloud.count)
    print(out / ("final.ply" if config.iterations else "checkpoints/iter_000000.ply"))
    return EXIT_OK


def _config_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return str(v)


def render_views(checkpoint, scene, out, branches, depth: bool = False, downscale: int = 1,
                 views: str = "all", tile_size: int = 16, holdout: int = 8) -> list:
    cloud, _ = load_checkpoint(checkpoint)
    bundle = dataio.load_scene(scene, downscale, holdout)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for v in _select_views(bundle, views):
        cam = bundle.cameras[v]
        stem = Path(cam.name).stem if cam.name else f"view_{v:03d}"
        for br in branches:
            r = render_branch(cloud, cam, br, tile_size=tile_size)
            path = out / f"{stem}_{br}.png"
            dataio.write_image(r.color, path)
            written.append(path)
        if depth:
            r = render_branch(cloud, cam, "clear", tile_size=tile_size)
            path = out / f"{stem}_depth.png"
            m = dataio.write_depth16(r.depth, path)
            (out / f"{stem}_depth.txt").write_text(f"{m!r}\n", encoding="utf-8")
            written.append(path)
    return written


def _branches(name: str):
    if name == "both":
        return list(BRANCHES)
    if name not in BRANCHES:
        raise UsageError(f"unknown branch {name!r}; expected water, clear or both")
    return [name]


def cmd_render(args, branch=None) -> int:
    _, run = load_run_config(args)
    branch = branch or args.branch or run.get("branch", "both")
    branches = _branches(branch)
    depth = args.depth or run.get("depth", False)
    scene = _scene_dir(args.scene)
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    written = render_views(args.checkpoint, scene, args.out, branches, depth,
                           run.get("downscale", 1), args.views or run.get("views", "all"),
                           holdout=run.get("holdout", 8))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_restore(args) -> int:
    return cmd_render(args, branch="clear")


def _match_pairs(renders: Path, refs: Path):
    ref_files = {p.stem: p for p in sorted(refs.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".jpeg")}
    pairs = []
    for p in sorted(renders.iterdir()):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        stem = p.stem
        if stem not in ref_files:
            for suffix in ("_water", "_clear"):
                if stem.endswith(suffix) and stem[: -len(suffix)] in ref_files:
                    stem = stem[: -len(suffix)]
                    break
        if stem in ref_files:
            pairs.append((p, ref_files[stem], stem))
    return pairs


def evaluate_dirs(renders, refs, charts=None):
    """Rows of (name, psnr, ssim, delta_e00 or None, angular error or None)."""
    renders, refs = Path(renders), Path(refs)
    for d in (renders, refs):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    pairs = _match_pairs(renders, refs)
    if not pairs:
        raise UsageError(f"no filename-matched image pairs between {renders} and {refs}")
    chart_dir = Path(charts) if charts else refs
    rows = []
    for rp, fp, stem in pairs:
        a, b = dataio.read_image(rp), dataio.read_image(fp)
        if a.shape != b.shape:
            raise ArgumentError(f"{rp.name} and {fp.name} differ in size")
        de = ang = None
        sidecar = chart_dir / f"{stem}.chart.txt"
        if sidecar.is_file():
            chart: ChartSpec = read_chart(sidecar)
            de = chart_delta_e(a, chart)
            ang = mean_angular_error(a, chart)
        rows.append((rp.name, psnr(a, b), ssim(a, b), de, ang))
    return rows


def format_rows(rows) -> str:
    def f(v):
        return "-" if v is None else f"{v:.6f}"

    lines = ["name\tpsnr\tssim\tdelta_e00\tangular_error"]
    for r in rows:
        lines.append("\t".join([r[0]] + [f(v) for v in r[1:]]))
    mean = []
    for k in range(1, 5):
        vals = [r[k] for r in rows if r[k] is not None]
        mean.append(float(np.mean(vals)) if vals else None)
    lines.append("\t".join(["mean"] + [f(v) for v in mean]))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    _, run = load_run_config(args)
    rows = evaluate_dirs(args.renders, args.references, args.charts or run.get("charts"))
    text = format_rows(rows)
    sys.stdout.write(text)
    out = Path(args.out) if args.out else Path(args.renders) / "metrics.tsv"
    out.write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uwsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene directory")
    s.add_argument("out")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="optimize a cloud on a scene")
    t.add_argument("scene", nargs="?")
    t.add_argument("out", nargs="?")
    t.add_argument("--downscale", type=int, default=None)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func in (("render", cmd_render), ("restore", cmd_restore)):
        r = sub.add_parser(name, parents=[common], help=f"{name} views from a checkpoint")
        r.add_argument("checkpoint")
        r.add_argument("scene")
        r.add_argument("out")
        if name == "render":
            r.add_argument("--branch", default=None, help="water, clear or both (default both)")
        r.add_argument("--depth", action="store_true", help="also write 16-bit depth PNGs")
        r.add_argument("--downscale", type=int, default=None)
        r.add_argument("--views", default=None, help="all, train, test or comma-separated names")
        r.set_defaults(func=func)

    e = sub.add_parser("eval", parents=[common], help="compare renders with references")
    e.add_argument("renders")
    e.add_argument("references")
    e.add_argument("--charts", default=None, help="directory of <name>.chart.txt sidecars")
    e.add_argument("--out", default=None, help="TSV output path (default: <renders>/metrics.tsv)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads.set_threads(args.threads)
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"uwsplat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SplatError, OSError) as exc:
        print(f"uwsplat {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
