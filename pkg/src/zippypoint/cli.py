"""Command line front end: extraction, matching, evaluation, benchmarks,
and the precision search, glued together for pipelines.

Exit codes are part of the contract:
    0  success
    2  I/O problem (missing or unreadable file, empty dataset)
    3  malformed data (bad magic, checksum, truncation, shape mismatch)
    4  bad configuration or usage (flags, space files, parameter domains)

Every output file is written atomically. Data outputs (detections,
matches, traces, metric reports) are byte-deterministic; timing numbers
in benchmark reports are measurements and obviously are not.
"""

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import (
    ConfigurationError,
    FormatError,
    InvalidParameterError,
    ZippyError,
)
from .homeval import (
    MetricReport,
    load_hpatches_sequence,
    make_detector,
    run_sequence_eval,
)
from .matcher import DescriptorSet, bench_match, match_mutual_nn
from .mpsearch import (
    default_spaces,
    make_latency_evaluator,
    parse_space_config,
    replay_evaluator,
    traverse,
)
from .netgraph import (
    NetworkSpec,
    build,
    build_stores,
    forward,
    forward_fp,
    load_detections,
    load_weights,
    random_master,
    save_detections,
    synthetic_image,
    zippypoint_spec,
)
from .netgraph import decode as decode_heads
from ._io import atomic_write_text
from ._threads import thread_count


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here says 4."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(4, f"{self.prog}: error: {message}\n")


def _fail(code: int, err) -> int:
    print(f"error: {err}", file=sys.stderr)
    return code


def _jsonify(obj):
    """NaN -> null recursively; json.dumps would emit invalid JSON otherwise."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    return obj


def _write_json(path: str, payload: dict):
    atomic_write_text(path, json.dumps(_jsonify(payload), indent=2, sort_keys=True) + "\n")


def _load_spec(path) -> NetworkSpec:
    if path is None:
        return zippypoint_spec()
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON ({e})") from None
    return NetworkSpec.from_dict(d)


def _parse_size(text: str):
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise InvalidParameterError(f"--image-size must be HxW, got {text!r}") from None
    if h < 8 or w < 8:
        raise InvalidParameterError(f"--image-size must be at least 8x8, got {text!r}")
    return h, w


def _read_image_file(path: str):
    from .imgio import read_image

    return read_image(path)


# ---------------------------------------------------------------- extract


def cmd_extract(args) -> int:
    spec = _load_spec(args.spec)
    graph = build(spec)
    store = load_weights(args.weights)
    image = _read_image_file(args.image)
    run = forward_fp if args.fp else forward
    t0 = time.perf_counter()
    heads = run(graph, store, image)
    det = decode_heads(
        heads,
        mode="soft" if args.soft else "binary",
        k=args.k,
        score_floor=args.score_floor,
        nms_radius=args.nms_radius,
        max_keypoints=args.max_kp,
    )
    ms = (time.perf_counter() - t0) * 1e3
    save_detections(det, args.out)
    print(f"keypoints: {len(det)}")
    print(f"extract: {ms:.1f} ms")
    print(f"wrote {args.out}")
    return 0


# ------------------------------------------------------------------ match


def cmd_match(args) -> int:
    q = load_detections(args.query)
    r = load_detections(args.ref)
    if q.bits is None or r.bits is None:
        raise FormatError("match needs binary detection files (soft descriptors given)")
    t0 = time.perf_counter()
    pairs = match_mutual_nn(q.bits, r.bits, max_dist=args.max_dist,
                            threads=args.threads)
    ms = (time.perf_counter() - t0) * 1e3
    if args.out:
        _write_json(args.out, {
            "policy": "mutual_nn",
            "m": q.m,
            "max_dist": q.m if args.max_dist is None else args.max_dist,
            "n_query": len(q),
            "n_ref": len(r),
            "pairs": pairs.tolist(),
        })
    print(f"pairs: {len(pairs)}")
    print(f"match: {ms:.2f} ms")
    return 0


# ------------------------------------------------------------------- eval


def _aggregate_reports(reports) -> MetricReport:
    def nmean(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    cols = {name: [getattr(r, name) for r in reports]
            for name in ("repeatability", "localization_error", "cor1", "cor3",
                         "cor5", "matching_score", "mean_keypoints")}
    return MetricReport(
        repeatability=nmean(cols["repeatability"]),
        localization_error=nmean(cols["localization_error"]),
        cor1=nmean(cols["cor1"]),
        cor3=nmean(cols["cor3"]),
        cor5=nmean(cols["cor5"]),
        matching_score=nmean(cols["matching_score"]),
        n_pairs=sum(r.n_pairs for r in reports),
        n_repeat_pairs=sum(r.n_repeat_pairs for r in reports),
        n_match_pairs=sum(r.n_match_pairs for r in reports),
        mean_keypoints=nmean(cols["mean_keypoints"]),
    )


_EVAL_COLS = ("repeatability", "localization_error", "cor1", "cor3", "cor5",
              "matching_score")


def _eval_row(name: str, r: MetricReport) -> str:
    vals = " ".join(
        f"{getattr(r, c):6.3f}" if not math.isnan(getattr(r, c)) else "   nan"
        for c in _EVAL_COLS
    )
    return f"{name:<24s} {vals} {r.n_pairs:5d}"


def cmd_eval(args) -> int:
    spec = _load_spec(args.spec)
    graph = build(spec)
    store = load_weights(args.weights)
    detector = make_detector(
        graph, store, fp=args.fp, mode="soft" if args.soft else "binary",
        k=args.k, max_keypoints=args.max_kp,
    )
    try:
        names = sorted(
            d for d in os.listdir(args.dataset_dir)
            if os.path.isdir(os.path.join(args.dataset_dir, d))
        )
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset directory not found: {args.dataset_dir}") from None
    if not names:
        raise FileNotFoundError(f"no sequence directories in {args.dataset_dir}")

    per_seq = {}
    failed = {}
    for name in names:
        path = os.path.join(args.dataset_dir, name)
        try:
            ref, pairs = load_hpatches_sequence(path)
            per_seq[name] = run_sequence_eval(
                ref, pairs, detector, max_keypoints=args.max_kp or 300,
                threads=args.threads,
            )
        except (ZippyError, OSError) as e:
            failed[name] = str(e)

    header = f"{'sequence':<24s} {'rep':>6s} {'loc':>6s} {'cor1':>6s} {'cor3':>6s} {'cor5':>6s} {'match':>6s} {'pairs':>5s}"
    print(header)
    for name, r in per_seq.items():
        print(_eval_row(name, r))
    for name, msg in failed.items():
        print(f"{name:<24s} FAILED: {msg}")
    agg = None
    if per_seq:
        agg = _aggregate_reports(list(per_seq.values()))
        print(_eval_row("aggregate", agg))
    if args.report:
        _write_json(args.report, {
            "sequences": {n: r.as_dict() for n, r in per_seq.items()},
            "aggregate": agg.as_dict() if agg else None,
            "failed": failed,
        })
        print(f"wrote {args.report}")
    if not per_seq:
        print("error: every sequence failed", file=sys.stderr)
        return 3
    return 0


# ------------------------------------------------------------------ bench


def _time_forward(run, graph, store, image, reps: int) -> float:
    run(graph, store, image)  # warm caches and jitted kernels
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run(graph, store, image)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def cmd_bench(args) -> int:
    h, w = _parse_size(args.image_size)
    spec = _load_spec(args.spec)
    graph = build(spec)
    image = synthetic_image(h, w, seed=args.seed)
    routes = {}
    if args.weights:
        store = load_weights(args.weights)
        name = "fp" if args.fp else "quantized"
        routes[name] = _time_forward(forward_fp if args.fp else forward,
                                     graph, store, image, args.reps)
    else:
        fp_store, q_store = build_stores(graph, random_master(graph, seed=args.seed), image)
        routes["quantized"] = _time_forward(forward, graph, q_store, image, args.reps)
        fp_graph = build(spec.with_(
            first_conv="fp", encoder="fp", pooling="max", decoder="fp",
            score_head="fp", location_head="fp", descriptor_head="fp",
        ))
        fp_full, _ = build_stores(fp_graph, random_master(fp_graph, seed=args.seed), image)
        routes["fp"] = _time_forward(forward_fp, fp_graph, fp_full, image, args.reps)

    payload = {
        "height": h,
        "width": w,
        "pixels": h * w,
        "macs": graph.mac_count(h, w),
        "reps": args.reps,
        "seed": args.seed,
        "routes": {n: {"ms": ms, "fps": 1e3 / ms} for n, ms in routes.items()},
    }
    if len(routes) == 2:
        payload["quantized_faster"] = routes["quantized"] < routes["fp"]
    print(f"image: {h}x{w} ({h * w} px), macs: {payload['macs']}")
    for n, ms in routes.items():
        print(f"{n}: {ms:.1f} ms ({1e3 / ms:.1f} fps)")
    if "quantized_faster" in payload:
        print(f"quantized_faster: {str(payload['quantized_faster']).lower()}")
    if args.json:
        _write_json(args.json, payload)
        print(f"wrote {args.json}")
    return 0


def cmd_bench_match(args) -> int:
    if args.m % 64 != 0 or args.m < 64:
        raise InvalidParameterError(f"--m must be a positive multiple of 64, got {args.m}")
    if args.n < 1:
        raise InvalidParameterError(f"--n must be >= 1, got {args.n}")
    rng = np.random.default_rng(args.seed)
    q = DescriptorSet.from_bits(rng.integers(0, 2, size=(args.n, args.m)).astype(np.uint8))
    r = DescriptorSet.from_bits(rng.integers(0, 2, size=(args.n, args.m)).astype(np.uint8))
    report = bench_match(q, r, reps=args.reps)
    print(f"n: {args.n}x{args.n}, m: {args.m}, reps: {args.reps}")
    for route, sec in report.seconds.items():
        print(f"{route}: {sec * 1e3:.2f} ms ({report.pairs_per_second[route]:.3g} pairs/s)")
    if "word" in report.seconds and "bitloop" in report.seconds:
        print(f"speedup: {report.seconds['bitloop'] / report.seconds['word']:.1f}x")
    if args.json:
        _write_json(args.json, {"seed": args.seed, **report.as_dict()})
        print(f"wrote {args.json}")
    return 0


# ----------------------------------------------------------------- search


def cmd_search(args) -> int:
    if args.space_config:
        with open(args.space_config) as f:
            spaces = parse_space_config(f.read())
    else:
        spaces = default_spaces()
    base = _load_spec(args.base) if args.base else None
    if args.evaluator == "replay":
        evaluator = replay_evaluator
    else:
        h, w = _parse_size(args.image_size)
        evaluator = make_latency_evaluator(height=h, width=w, seed=args.seed,
                                           reps=args.reps)
    trace = traverse(spaces, evaluator, base=base, threads=args.threads or 1)
    for b in trace.blocks:
        print(f"block {b.block_id}: {b.chosen} ({len(b.candidates)} candidates)")
    final = " ".join(f"{k}={v}" for k, v in trace.final.as_dict().items()
                     if isinstance(v, str))
    print(f"final: {final}")
    print(f"evaluations: {trace.n_evaluations}")
    atomic_write_text(args.trace_out, trace.to_json())
    print(f"wrote {args.trace_out}")
    return 0


# ----------------------------------------------------------------- parser


def _build_parser() -> _Parser:
    p = _Parser(prog="zippy", description=__doc__.split("\n\n")[0],
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"zippy {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def spec_flag(sp):
        sp.add_argument("--spec", metavar="JSON",
                        help="network configuration file (default: shipped configuration)")

    sp = sub.add_parser("extract", help="detect keypoints in one image")
    sp.add_argument("--weights", required=True, help="weight store file")
    sp.add_argument("--image", required=True, help="input image (PPM/PGM/PNG)")
    sp.add_argument("--out", required=True, help="detection output file")
    spec_flag(sp)
    sp.add_argument("--fp", action="store_true", help="run the float reference path")
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--binary", dest="soft", action="store_false",
                     help="binary descriptors (default)")
    grp.add_argument("--soft", dest="soft", action="store_true",
                     help="soft descriptors instead of binary")
    sp.add_argument("--k", type=int, help="descriptor ones count (default: half the bits)")
    sp.add_argument("--max-kp", type=int, default=1000, help="keypoint cap")
    sp.add_argument("--score-floor", type=float, default=0.0)
    sp.add_argument("--nms-radius", type=float, default=4.0)
    sp.set_defaults(run=cmd_extract, soft=False)

    sp = sub.add_parser("match", help="match two detection files")
    sp.add_argument("--query", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", help="write pairs as JSON")
    sp.add_argument("--max-dist", type=int, help="drop pairs above this Hamming distance")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(run=cmd_match)

    sp = sub.add_parser("eval", help="homography metrics over a sequence dataset")
    sp.add_argument("--dataset-dir", required=True,
                    help="directory of sequence subdirectories (1.ppm + H_1_k files)")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--report", help="write per-sequence and aggregate metrics as JSON")
    spec_flag(sp)
    sp.add_argument("--fp", action="store_true", help="run the float reference path")
    sp.add_argument("--soft", action="store_true", help="soft descriptors instead of binary")
    sp.add_argument("--k", type=int)
    sp.add_argument("--max-kp", type=int, help="keypoint budget per image (default 300)")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(run=cmd_eval)

    sp = sub.add_parser("bench", help="time the forward pass")
    sp.add_argument("--weights", help="weight store; omit to bench fixture weights "
                                      "on both the quantized and float paths")
    spec_flag(sp)
    sp.add_argument("--fp", action="store_true",
                    help="with --weights: time the float reference path")
    sp.add_argument("--image-size", default="240x320", metavar="HxW")
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", help="write the report as JSON")
    sp.set_defaults(run=cmd_bench)

    sp = sub.add_parser("bench-match", help="time descriptor matching")
    sp.add_argument("--n", type=int, default=1000, help="descriptors per side")
    sp.add_argument("--m", type=int, default=256, help="descriptor bits")
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", help="write the report as JSON")
    sp.set_defaults(run=cmd_bench_match)

    sp = sub.add_parser("search", help="per-block precision search")
    sp.add_argument("--space-config", metavar="FILE",
                    help="blocks and candidates to search (default: the full space)")
    sp.add_argument("--evaluator", choices=("replay", "latency"), default="replay")
    sp.add_argument("--trace-out", required=True, help="write the search trace as JSON")
    sp.add_argument("--base", metavar="JSON",
                    help="configuration carrying unsearched fields (default: baseline)")
    sp.add_argument("--image-size", default="240x320", metavar="HxW",
                    help="latency evaluator input size")
    sp.add_argument("--reps", type=int, default=3, help="latency evaluator repetitions")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(run=cmd_search)

    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if getattr(args, "threads", None) is not None:
            thread_count(args.threads)  # validate the override early
        return args.run(args)
    except (ConfigurationError, InvalidParameterError) as e:
        return _fail(4, e)
    except ZippyError as e:
        return _fail(3, e)
    except OSError as e:
        return _fail(2, e)


if __name__ == "__main__":
    raise SystemExit(main())
