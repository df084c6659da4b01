"""Command line entry point: ``bevharmonize <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from . import __version__
from .dataset_io import (
    DEFAULT_TARGET_SIZE,
    CategoryMap,
    add_ghost_cameras,
    dumps,
    load_manifest,
    merge_datasets,
    read_records,
    save_manifest,
    write_records,
)
from .errors import ParseError, ValidationError
from .experts import expert_distill_loss, expert_weights, read_feature_maps, semantic_distill_loss
from .metrics import DIST_THRESHOLDS, EVAL_RANGE, TP_THRESHOLD, EvalConfig, evaluate, load_detections, save_detections
from .pdir import (
    DEFAULT_D_MIN,
    DEFAULT_DELTA_D,
    DEFAULT_FRONT_CAMERA,
    MIN_OBJECT_DEPTH,
    PdirResult,
    SplitStrategy,
    batch_pdir,
    histogram,
    split_dataset,
)
from .synth import SceneSpec, generate

log = logging.getLogger("bevharmonize")

THREADS_ENV = "BEVHARMONIZE_THREADS"

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _target_size(text: str):
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("target size must be positive")
    return w, h


def _d_min(text: str):
    if text == MIN_OBJECT_DEPTH:
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected meters or {MIN_OBJECT_DEPTH!r}, got {text!r}")
    if v <= 0:
        raise argparse.ArgumentTypeError("d_min must be positive")
    return v


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--quiet", "-q", action="store_true", help="only log warnings and errors")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def _add_cmap(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cmap", help="category map JSON (default: built-in nuScenes/Waymo/Lyft map)")


def _add_pdir_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--front-camera", default=DEFAULT_FRONT_CAMERA)
    p.add_argument("--delta-d", type=float, default=DEFAULT_DELTA_D, help="depth interval in meters")
    p.add_argument("--d-min", type=_d_min, default=DEFAULT_D_MIN,
                   help=f"near depth in meters or '{MIN_OBJECT_DEPTH}'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevharmonize", description="Multi-dataset multi-camera 3D detection tooling.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("merge", help="merge manifests with ghost cameras and rescaled intrinsics")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--target-size", type=_target_size, default=DEFAULT_TARGET_SIZE, metavar="WxH")
    _add_cmap(p)
    _add_common(p)

    p = sub.add_parser("ghost", help="pad every rig of one manifest with ghost cameras")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    _add_cmap(p)
    _add_common(p)

    p = sub.add_parser("pdir-stats", help="per-sample PDIR and a histogram")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    _add_pdir_params(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bins", type=int, default=10)
    group.add_argument("--bin-edges", type=_float_list)
    _add_cmap(p)
    _add_common(p)

    p = sub.add_parser("split", help="assign samples to expert training subsets")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("pdir", "ds", "rd"), default="pdir")
    p.add_argument("--n-experts", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _add_pdir_params(p)
    _add_cmap(p)
    _add_common(p)

    p = sub.add_parser("weights", help="expert distillation weights from a pdir-stats file")
    p.add_argument("pdir_stats")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("evaluate", help="AP / TP errors / NDS+ report")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--out", help="write the machine-readable report here")
    p.add_argument("--thresholds", type=_float_list, default=list(DIST_THRESHOLDS))
    p.add_argument("--tp-threshold", type=float, default=TP_THRESHOLD)
    p.add_argument("--range", dest="eval_range", type=float, default=EVAL_RANGE)
    p.add_argument("--raw-ap", action="store_true", help="unfloored area under the PR curve")
    _add_cmap(p)
    _add_common(p)

    p = sub.add_parser("gen-synthetic", help="write a synthetic manifest and detections")
    p.add_argument("--config", help="scene spec JSON (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the seed in the config")
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--out-det", required=True)
    _add_common(p)

    p = sub.add_parser("distill-loss", help="cosine distillation loss between feature-map files")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--weights", type=_float_list, help="per-image weights (default 1 each)")
    p.add_argument("--k-channels", type=int, help="semantic loss on the first K student channels")
    p.add_argument("--mode", choices=("location", "flatten"), default="location")
    p.add_argument("--out")
    _add_common(p)
    return parser


# --------------------------------------------------------------------------


def _cmap(args) -> CategoryMap:
    return CategoryMap.load(args.cmap) if getattr(args, "cmap", None) else CategoryMap.default()


def _pdir_echo(args) -> dict:
    return {"front_camera": args.front_camera, "delta_d": args.delta_d, "d_min": args.d_min}


def cmd_merge(args, threads):
    cmap = _cmap(args)
    manifests = [load_manifest(p, cmap) for p in args.inputs]
    w, h = args.target_size
    merged = merge_datasets(manifests, w, h)
    log.info("merged %d samples from %d manifests into %d-camera rigs",
             len(merged), len(manifests), merged.canonical_camera_count)
    echo = {"subcommand": "merge", "inputs": list(args.inputs), "target_size": [w, h], "cmap": args.cmap}
    save_manifest(args.out, merged, echo)


def cmd_ghost(args, threads):
    m = add_ghost_cameras(load_manifest(args.input, _cmap(args)), args.count)
    save_manifest(args.out, m, {"subcommand": "ghost", "input": args.input, "count": args.count, "cmap": args.cmap})


def cmd_pdir_stats(args, threads):
    m = load_manifest(args.manifest, _cmap(args))
    results = batch_pdir(m, args.front_camera, args.delta_d, args.d_min, threads)
    records, values = [], []
    for sid, r in results:
        if isinstance(r, PdirResult):
            records.append(r.to_record())
            values.append(r.pdir)
        else:
            log.warning("sample %s: PDIR unavailable: %s", sid, r)
            records.append({"sample_id": sid, "pdir": None, "error": str(r)})
    bins = args.bin_edges if args.bin_edges else args.bins
    records.append({"histogram": histogram(values, bins)})
    echo = {"subcommand": "pdir-stats", "manifest": args.manifest, **_pdir_echo(args),
            "bins": bins, "cmap": args.cmap}
    write_records(args.out, {"kind": "pdir-stats", "config": echo}, records)


def cmd_split(args, threads):
    m = load_manifest(args.manifest, _cmap(args))
    strategy = SplitStrategy(args.strategy, args.n_experts, args.seed)
    res = split_dataset(m, strategy, args.front_camera, args.delta_d, args.d_min, threads)
    records = []
    for s in m.samples:
        rec = {"sample_id": s.sample_id, "subset": res.assignments[s.sample_id]}
        if s.sample_id in res.pdir:
            rec["pdir"] = res.pdir[s.sample_id].pdir
        if s.sample_id in res.flagged:
            rec["flagged"] = res.flagged[s.sample_id]
        records.append(rec)
    if res.flagged:
        log.warning("%d samples without PDIR were placed at the median", len(res.flagged))
    echo = {"subcommand": "split", "manifest": args.manifest, "strategy": args.strategy,
            "n_experts": args.n_experts, "seed": args.seed, **_pdir_echo(args), "cmap": args.cmap}
    header = {"kind": "split", "config": echo, "n_subsets": res.n_subsets}
    if res.subset_names is not None:
        header["subset_names"] = res.subset_names
    write_records(args.out, header, records)


def read_pdir_stats(path):
    header, records = read_records(path)
    if header.get("kind") != "pdir-stats":
        raise ParseError(f"expected a pdir-stats file, got kind {header.get('kind')!r}", path=path)
    pairs, skipped = [], []
    for lineno, rec in records:
        if "histogram" in rec:
            continue
        sid, value = rec.get("sample_id"), rec.get("pdir")
        if not isinstance(sid, str):
            raise ParseError("record without sample_id", path=path, line=lineno)
        if value is None:
            skipped.append(sid)
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"pdir of {sid} is not a number", path=path, line=lineno)
        pairs.append((sid, float(value)))
    return pairs, skipped


def cmd_weights(args, threads):
    pairs, skipped = read_pdir_stats(args.pdir_stats)
    if skipped:
        log.warning("skipping %d samples without PDIR", len(skipped))
    w = expert_weights(pairs)
    echo = {"subcommand": "weights", "pdir_stats": args.pdir_stats}
    write_records(args.out, {"kind": "weights", "config": echo, "pdir_max": w.pdir_max}, w.records())


def cmd_evaluate(args, threads):
    gt = load_manifest(args.gt, _cmap(args))
    dets = load_detections(args.det)
    config = EvalConfig(tuple(args.thresholds), args.tp_threshold, args.eval_range, raw_ap=args.raw_ap)
    report = evaluate(gt, dets, config, threads)
    print(report.table())
    if args.out:
        echo = {"subcommand": "evaluate", "gt": args.gt, "det": args.det, "cmap": args.cmap}
        write_records(args.out, {"kind": "eval-report", "config": echo}, [report.to_dict()])


def cmd_gen_synthetic(args, threads):
    spec = SceneSpec.load(args.config) if args.config else SceneSpec()
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    manifest, dets = generate(spec)
    echo = {"subcommand": "gen-synthetic", "scene": spec.to_dict()}
    save_manifest(args.out_manifest, manifest, echo)
    save_detections(args.out_det, dets, echo)
    log.info("wrote %d samples and %d detections", len(manifest), len(dets))


def cmd_distill_loss(args, threads):
    student = read_feature_maps(args.student)
    teacher = read_feature_maps(args.teacher)
    if args.k_channels is not None:
        loss, zeros = semantic_distill_loss(teacher, student, args.k_channels, args.mode, return_zero_count=True)
        kind = "semantic"
    else:
        weights = args.weights if args.weights is not None else [1.0] * len(student)
        loss, zeros = expert_distill_loss(student, teacher, weights, args.mode, return_zero_count=True)
        kind = "expert"
    result = {"loss": loss, "kind": kind, "mode": args.mode, "zero_norm_locations": zeros}
    if args.out:
        echo = {"subcommand": "distill-loss", "student": args.student, "teacher": args.teacher,
                "weights": args.weights, "k_channels": args.k_channels, "mode": args.mode}
        write_records(args.out, {"kind": "distill-loss", "config": echo}, [result])
    else:
        print(dumps(result))


COMMANDS = {
    "merge": cmd_merge,
    "ghost": cmd_ghost,
    "pdir-stats": cmd_pdir_stats,
    "split": cmd_split,
    "weights": cmd_weights,
    "evaluate": cmd_evaluate,
    "gen-synthetic": cmd_gen_synthetic,
    "distill-loss": cmd_distill_loss,
}


def _setup_logging(args) -> None:
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s msg=%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    _setup_logging(args)
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        parser.print_usage(sys.stderr)
        print("bevharmonize: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, threads)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
