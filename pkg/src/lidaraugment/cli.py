"""Command-line interface: ``lidaraugment <command> ...``."""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .core import ConfigurationError, Frame, RngStream
from .io import (
    FRAME_SUFFIX,
    FrameFormatError,
    atomic_write,
    dumps_bank,
    dumps_frame,
    dumps_image,
    frame_files,
    loads_image,
    read_bank,
    read_frame,
    read_frames,
)
from .ops import extract_exemplars
from .policy import (
    DROP_BOX,
    PASTE_BOX,
    Banks,
    PolicySpec,
    check_banks,
    default_policy,
    default_policy_text,
    dumps_policy,
    load_policy,
    resolve,
    run_resolved,
)
from .rangeview import DEFAULT_COLS, DEFAULT_ROWS, RangeGeometry, assign_rays, from_points, frame_geometry, to_points
from .synth import SceneConfig, generate_frames, load_scene_config, proxy_score
from .tune import DEFAULT_ANCHOR, DEFAULT_M_GRID, DEFAULT_P_GRID, run_alignment, search_mp

log = logging.getLogger("lidaraugment")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_WARNING = 3

SEED_ENV = "LIDARAUG_SEED"
POLICY_ENV = "LIDARAUG_POLICY"
MANIFEST = "manifest.json"


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get(SEED_ENV, "0"))


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _policy(path) -> tuple[PolicySpec, str]:
    if path is None:
        text = default_policy_text()
        return default_policy(), text
    text = Path(path).read_text(encoding="utf-8")
    return load_policy(path), text


# -- apply --------------------------------------------------------------------------

_STATE: dict = {}


def _init_worker(state: dict) -> None:
    _STATE.clear()
    _STATE.update(state)


def _apply_one(path: str) -> tuple[str, str | None, dict | None]:
    """Augment one file; returns (frame_id or path, error, fire counts)."""
    try:
        frame = read_frame(path)
    except (FrameFormatError, OSError) as exc:
        return path, str(exc), None
    fired: dict[str, int] = {}
    stream = RngStream(_STATE["seed"]).derive(f"frame:{frame.frame_id}")
    out = run_resolved(frame, _STATE["resolved"], _STATE["spec"], stream, _STATE["banks"], fired)
    target = Path(_STATE["out_dir"]) / (Path(path).stem + FRAME_SUFFIX)
    atomic_write(target, dumps_frame(out))
    return frame.frame_id, None, fired


def _fire_keys(resolved) -> list[str]:
    keys = []
    for op in resolved.ops:
        if op.name in (DROP_BOX, PASTE_BOX):
            keys.extend(f"{op.name}/{cls}" for cls in sorted(op.per_class("count")))
        else:
            keys.append(op.name)
    return keys


def cmd_apply(args) -> int:
    spec, policy_text = _policy(args.policy)
    resolved = resolve(spec, args.m, args.p)
    exemplars = read_bank(args.bank) if args.bank else []
    partners = read_frames(args.partners) if args.partners else []
    banks = Banks(tuple(exemplars), tuple(partners))
    check_banks(resolved, banks)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [str(p) for p in frame_files(args.in_dir)]
    seed = _seed(args)
    state = {"seed": seed, "resolved": resolved, "spec": spec, "banks": banks, "out_dir": str(out_dir)}

    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(state,)) as pool:
            results = list(pool.map(_apply_one, files, chunksize=8))
    else:
        _init_worker(state)
        results = [_apply_one(f) for f in files]

    counts = {k: 0 for k in _fire_keys(resolved)}
    ids, failures = [], []
    for ident, error, fired in results:
        if error:
            failures.append(error)
            continue
        ids.append(ident)
        for k, v in fired.items():
            counts[k] = counts.get(k, 0) + v
    manifest = {
        "policy_sha256": hashlib.sha256(policy_text.encode()).hexdigest(),
        "m": args.m,
        "p": args.p,
        "seed": seed,
        "frames": len(ids),
        "frame_ids": sorted(ids),
        "fire_counts": dict(sorted(counts.items())),
        "failed": sorted(failures),
    }
    atomic_write(out_dir / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for err in failures:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_FAILED if failures else EXIT_OK


# -- bank ---------------------------------------------------------------------------


def cmd_build_bank(args) -> int:
    classes = set(args.classes.split(",")) if args.classes else None
    exemplars = []
    failed = False
    for path in frame_files(args.in_dir):
        try:
            frame = read_frame(path)
        except FrameFormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failed = True
            continue
        exemplars.extend(extract_exemplars(frame, classes))
    atomic_write(args.out_path, dumps_bank(exemplars))
    print(f"exemplars: {len(exemplars)}")
    if failed:
        return EXIT_FAILED
    if not exemplars:
        print("warning: no exemplars extracted", file=sys.stderr)
        return EXIT_WARNING
    return EXIT_OK


# -- evaluators -----------------------------------------------------------------------


class CommandEvaluator:
    """Runs ``<command> <m> <p> <seed>`` and reads one number from stdout.

    The candidate policy is written to a temporary file whose path is passed
    in the ``LIDARAUG_POLICY`` environment variable.
    """

    def __init__(self, command: str) -> None:
        self.argv = shlex.split(command)
        if not self.argv:
            raise ConfigurationError("empty evaluator command")

    def __call__(self, spec: PolicySpec, m: float, p: float, seed: int) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            policy = Path(tmp) / "policy.txt"
            policy.write_text(dumps_policy(spec), encoding="utf-8")
            env = {**os.environ, POLICY_ENV: str(policy)}
            proc = subprocess.run(
                [*self.argv, repr(float(m)), repr(float(p)), str(seed)], capture_output=True, text=True, env=env
            )
        if proc.returncode != 0:
            raise RuntimeError(f"evaluator exited with {proc.returncode}: {proc.stderr.strip()}")
        try:
            return float(proc.stdout.strip())
        except ValueError:
            raise RuntimeError(f"evaluator printed {proc.stdout.strip()!r}, expected one number") from None


def make_evaluator(selector: str):
    """``synth`` | ``cmd:<command line>`` | ``py:<module>:<callable>``."""
    if selector == "synth":
        return proxy_score
    if selector.startswith("cmd:"):
        return CommandEvaluator(selector[4:])
    if selector.startswith("py:"):
        module, _, name = selector[3:].rpartition(":")
        if not module:
            raise ConfigurationError(f"bad python evaluator {selector!r}, expected py:module:callable")
        return getattr(importlib.import_module(module), name)
    raise ConfigurationError(f"unknown evaluator {selector!r}")


# -- align / search -------------------------------------------------------------------


def _load_grids(path) -> dict:
    """JSON ``{op: {"prob": [...], "mag": [...]}}``; entries are numbers or {param: value} maps."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return {op: (g["prob"], g["mag"]) for op, g in raw.items()}
    except (KeyError, TypeError, AttributeError):
        raise ConfigurationError(f"{path}: each op needs 'prob' and 'mag' lists") from None


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return float(v)


def cmd_align(args) -> int:
    base, _ = _policy(args.policy)
    grids = _load_grids(args.grids)
    evaluator = make_evaluator(args.evaluator)
    anchor = (args.anchor_p, args.anchor_m)
    result = run_alignment(grids, evaluator, anchor, base, _seed(args))
    atomic_write(args.out, dumps_policy(result.spec))
    if args.report:
        report = {
            "anchor": {"p": anchor[0], "m": anchor[1]},
            "evaluations": result.evaluations,
            "ops": {
                name: {
                    "prob": _jsonable(e.prob),
                    "mag": _jsonable(e.mag),
                    "score": e.score,
                    "raw_values": {k: str(v) for k, v in e.raw_values.items()},
                    "coefficients": {k: str(v) for k, v in e.coefficients.items()},
                }
                for name, e in result.entries.items()
            },
        }
        atomic_write(args.report, json.dumps(report, indent=2) + "\n")
    print(f"aligned {len(result.entries)} ops with {result.evaluations} evaluations -> {args.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    spec, _ = _policy(args.policy)
    evaluator = make_evaluator(args.evaluator)
    result = search_mp(
        spec,
        _floats(args.grid_m) if args.grid_m else DEFAULT_M_GRID,
        _floats(args.grid_p) if args.grid_p else DEFAULT_P_GRID,
        evaluator,
        _seed(args),
        args.table,
        args.jobs,
    )
    failed = sum(c.status != "ok" for c in result.table)
    if result.m is None:
        print("no grid cell completed", file=sys.stderr)
        return EXIT_FAILED
    print(f"best m={result.m!r} p={result.p!r} score={result.score!r} ({len(result.table)} cells, {failed} failed)")
    return EXIT_FAILED if failed else EXIT_OK


# -- project --------------------------------------------------------------------------


def cmd_project(args) -> int:
    if args.reverse:
        image_id, img = loads_image(Path(args.input).read_text(encoding="utf-8"), args.input)
        frame = Frame(image_id, to_points(img), (), img.rows, img.cols)
        atomic_write(args.output, dumps_frame(frame))
        print(f"points: {len(frame.points)}")
        return EXIT_OK

    frame = read_frame(args.input)
    rows, cols = frame.rows or args.rows, frame.cols or args.cols
    geometry = frame_geometry(rows, cols) or RangeGeometry.uniform(rows, cols)
    points = assign_rays(frame.points, geometry)
    img = from_points(points, geometry)
    occluded = len(points) - int(img.filled.sum())
    atomic_write(args.output, dumps_image(img, frame.frame_id))
    print(f"cells: {int(img.filled.sum())} occluded: {occluded}")
    if args.roundtrip:
        again = from_points(to_points(img), geometry)
        ok = again.equals(img)
        print("roundtrip: " + ("PASS" if ok else "FAIL"))
        return EXIT_OK if ok else EXIT_FAILED
    return EXIT_OK


# -- generate -------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_scene_config(Path(args.config).read_text(encoding="utf-8")) if args.config else SceneConfig()
    if args.seed is not None or SEED_ENV in os.environ:
        cfg = SceneConfig(**{**cfg.__dict__, "seed": _seed(args)})
    if args.objects is not None:
        cfg = SceneConfig(**{**cfg.__dict__, "n_objects": args.objects})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for frame in generate_frames(cfg, args.count, args.prefix):
        atomic_write(out / f"{frame.frame_id}{FRAME_SUFFIX}", dumps_frame(frame))
    print(f"wrote {args.count} frames to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidaraugment", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, policy=True):
        if seed:
            p.add_argument("--seed", type=int, default=None, help=f"global seed (fallback: ${SEED_ENV}, then 0)")
        if policy:
            p.add_argument("--policy", default=None, help="policy file (default: shipped aligned space)")
        p.add_argument("--format", choices=["laf1"], default="laf1")

    p = sub.add_parser("apply", help="augment every frame in a directory")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--m", type=float, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--bank", default=None, help="object bank for PasteBox")
    p.add_argument("--partners", default=None, help="frame directory for SwapBackground partners")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("build-bank", help="extract labeled objects into an object bank")
    p.add_argument("in_dir")
    p.add_argument("out_path")
    p.add_argument("--classes", default=None, help="comma-separated class ids (default: all)")
    common(p, seed=False, policy=False)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("align", help="per-op alignment search; writes an aligned policy file")
    p.add_argument("--grids", required=True, help="JSON grid file")
    p.add_argument("--evaluator", default="synth", help="synth | cmd:<command> | py:<module>:<callable>")
    p.add_argument("--anchor-p", type=float, default=DEFAULT_ANCHOR[0])
    p.add_argument("--anchor-m", type=float, default=DEFAULT_ANCHOR[1])
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="optional JSON alignment report")
    common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("search", help="joint grid search over (m, p)")
    p.add_argument("--grid-m", default=None, help="comma-separated m values (default 1..10)")
    p.add_argument("--grid-p", default=None, help="comma-separated p values (default 0.1..1.0)")
    p.add_argument("--evaluator", default="synth")
    p.add_argument("--table", default=None, help="score table; resumed if it exists")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("project", help="convert between a frame and its range image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--reverse", action="store_true", help="input is a range image, output a frame")
    p.add_argument("--roundtrip", action="store_true", help="verify image -> points -> image is bit-exact")
    p.add_argument("--rows", type=int, default=DEFAULT_ROWS)
    p.add_argument("--cols", type=int, default=DEFAULT_COLS)
    common(p, seed=False, policy=False)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("generate", help="write synthetic frames")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--config", default=None, help="scene config (key = value lines)")
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--prefix", default="synth")
    common(p, policy=False)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FrameFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
