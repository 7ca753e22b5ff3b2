"""``geokp`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Runtime errors print
one JSON line ``{"error": <type>, "message": <text>}`` on standard error.
Existing outputs are left untouched unless ``--force`` is given.  Every
random choice is driven by ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("geokp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _skip(path: Path, force: bool) -> bool:
    if path.exists() and not force:
        print(f"{path} exists; skipping (use --force to overwrite)")
        return True
    return False


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth import DeformSpec, Generator, generate, write_sequence

    out = Path(args.out)
    if _skip(out / "manifest.json", args.force):
        return 0
    spec = DeformSpec(Generator.parse(args.generator), args.points, args.frames, args.amplitude, args.seed)
    seq = generate(spec)
    path = write_sequence(
        seq,
        out,
        extra={
            "generator": spec.generator.value,
            "amplitude": spec.amplitude,
            "seed": spec.seed,
        },
    )
    print(path)
    return 0


def cmd_preprocess(args) -> int:
    from .geodesy import preprocess_manifest

    m = preprocess_manifest(args.manifest, args.k, args.out_dir, retries=3, force=args.force, jobs=args.jobs)
    for p, k in zip(m.geodesics, m.geodesic_k):
        print(f"{m.resolve(p)} k={k}")
    return 0


def _resolve_config_paths(doc: dict, base: Path) -> dict:
    def res(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    doc = dict(doc)
    for key in ("train_manifests", "val_manifests"):
        if key in doc:
            doc[key] = [res(p) for p in doc[key]]
    if "out_dir" in doc:
        doc["out_dir"] = res(doc["out_dir"])
    return doc


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg_path = Path(args.config)
    doc = _resolve_config_paths(json.loads(cfg_path.read_text()), cfg_path.parent)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out_dir is not None:
        doc["out_dir"] = args.out_dir
    doc.setdefault("jobs", args.jobs)
    cfg = TrainConfig.from_json(doc)
    if _skip(Path(cfg.out_dir) / "last.gkpm", args.force):
        return 0
    res = train(cfg)
    print(f"best checkpoint: {res.best_checkpoint}")
    print(f"last checkpoint: {res.last_checkpoint}")
    print(f"log: {res.log_path}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import Protocol, evaluate

    out = Path(args.out)
    if _skip(out, args.force):
        return 0
    report = evaluate(args.checkpoint, args.manifest, Protocol.parse(args.protocol), seed=args.seed, delta=args.delta)
    out.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    pck_path = Path(args.pck_csv) if args.pck_csv else out.with_suffix(".pck.csv")
    with open(pck_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "pck"])
        for tau, v in report.pck:
            w.writerow([repr(tau), repr(v)])
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "pck"}))
    return 0


def cmd_infer(args) -> int:
    from .pcloud import PointCloud, read_xyz, write_xyz
    from .trainer import infer

    if args.out and _skip(Path(args.out), args.force):
        return 0
    cloud = read_xyz(args.input)
    res = infer(args.checkpoint, cloud)
    if args.out:
        write_xyz(args.out, PointCloud(res.keypoints))
    else:
        for x, y, z in res.keypoints.tolist():
            print(f"{x!r} {y!r} {z!r}")
    if args.w_out:
        np.savetxt(args.w_out, res.w)
    if args.recon_out:
        write_xyz(args.recon_out, PointCloud(res.reconstruction))
    return 0


def cmd_perturb(args) -> int:
    from .metrics import Protocol
    from .pcloud import add_gaussian_noise, fps_downsample, read_xyz, write_xyz

    out = Path(args.out)
    if _skip(out, args.force):
        return 0
    cloud = read_xyz(args.input)
    proto = Protocol.parse(args.protocol)
    if proto.kind == "noise":
        cloud = add_gaussian_noise(cloud, proto.value, args.seed)
    elif proto.kind == "fps":
        cloud = fps_downsample(cloud, max(2, cloud.n // int(proto.value)), args.start)
    write_xyz(out, cloud)
    print(out)
    return 0


def cmd_diagnose(args) -> int:
    from .geodesy import shortcut_diagnostic
    from .pcloud import load_sequence, read_manifest

    manifest = read_manifest(args.manifest)
    seq = load_sequence(manifest)
    a = args.frame_a
    b = args.frame_b if args.frame_b is not None else seq.t - 1
    if not (0 <= a < seq.t and 0 <= b < seq.t):
        raise UsageError(f"frame indices must be in [0, {seq.t - 1}]")
    sigma = None
    if seq.correspondences is not None:
        maps = seq.maps_from_first()
        # index map from frame a numbering into frame b numbering
        inv_a = np.empty_like(maps[a])
        inv_a[maps[a]] = np.arange(seq.n)
        sigma = maps[b][inv_a]
    report = shortcut_diagnostic(seq.frames[a], seq.frames[b], sigma, args.threshold, args.k, args.min_fraction)
    doc = {"manifest": str(manifest.path), "frame_a": a, "frame_b": b, "k": args.k, **report.to_json()}
    if args.out:
        out = Path(args.out)
        if _skip(out, args.force):
            return 0
        out.write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps({k: v for k, v in doc.items() if k != "pairs"}))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geokp", description="Geodesic-consistent keypoints on deforming point clouds.")
    p.add_argument("--version", action="version", version=f"geokp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, seed=True, force=True, jobs=False):
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if jobs:
            sp.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel workers")

    sp = sub.add_parser("synth", help="generate a synthetic deforming sequence")
    sp.add_argument("--generator", default="bend", help="bend | chain | breathe")
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--points", type=int, default=512)
    sp.add_argument("--amplitude", type=float, default=0.5)
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="compute and cache per-frame geodesic matrices")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=5, help="nearest neighbours per point (default 5)")
    sp.add_argument("--out-dir", default=None, help="cache directory (default: next to the manifest)")
    common(sp, seed=False, jobs=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a keypoint network from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", default=None, help="override the config's out_dir")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed (config default 0)")
    sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sp.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel window evaluations per batch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a sequence")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--protocol", default="clean", help="clean | noise:<variance> | fps:<ratio>")
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--pck-csv", default=None, help="PCK curve CSV (default: <out>.pck.csv)")
    sp.add_argument("--delta", type=float, default=0.05, help="inclusivity distance threshold")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict keypoints for one point cloud")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help=".xyz point cloud")
    sp.add_argument("--out", default=None, help="keypoint .xyz (default: stdout)")
    sp.add_argument("--w-out", default=None, help="optional text dump of the probability matrix")
    sp.add_argument("--recon-out", default=None, help="optional reconstruction .xyz")
    sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("perturb", help="add noise to or FPS-downsample a point cloud")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--protocol", required=True, help="noise:<variance> | fps:<ratio>")
    sp.add_argument("--start", type=int, default=0, help="FPS start index")
    common(sp)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("diagnose-geodesics", help="report point pairs whose geodesic distance jumps between frames")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--frame-a", type=int, default=0)
    sp.add_argument("--frame-b", type=int, default=None, help="default: last frame")
    sp.add_argument("--threshold", type=float, default=0.25, help="relative change threshold")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--min-fraction", type=float, default=0.1, help="ignore pairs shorter than this fraction of the diameter")
    sp.add_argument("--out", default=None, help="full JSON report path")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    from .errors import GeokpError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (GeokpError, OSError, ValueError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
