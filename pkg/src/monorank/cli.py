"""Command-line entry point: ``monorank <command> [options]``.

Exit codes: 0 success, 1 usage, 2 data error (bad input, missing model),
3 runtime error.  ``--config FILE`` supplies option defaults as a JSON
object keyed by long option name (``{"cache_fraction": 0.2}``); explicit
flags win.
"""
import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import errors
from .bench import bench_overlap
from .engine import Engine, Runtime, ScriptedScorer
from .metrics import precision_at_k
from .profile import DeviceProfile, measure_profile
from .prune import ACCEPT_AND_DROP, DROP_ONLY, PruneConfig, calibrate_threshold
from .records import read_dataset, read_rerank_input
from .store import ModelSpec, gen_synthetic_model, read_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DEFAULT_GRID = (0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05)
# fields of the result file that depend on the machine rather than the input
MACHINE_FIELDS = ("timings", "plan")

log = logging.getLogger("monorank")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _grid(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("grid is empty")
    return vals


def _threshold(text):
    return math.inf if text in ("inf", "+inf") else float(text)


def _engine_options(p):
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("-k", "--k", type=int, default=10, help="top-K size")
    p.add_argument("--threshold", type=_threshold, help="dispersion threshold (inf disables pruning)")
    p.add_argument("--auto-target", type=float, help="calibrate the threshold to this precision")
    p.add_argument("--calibration-data", help="validation dataset for --auto-target")
    p.add_argument("--grid", type=_grid, help="comma-separated calibration grid")
    p.add_argument("--clusters", default="auto", help="k-means cluster count or 'auto'")
    p.add_argument("--mode", choices=(ACCEPT_AND_DROP, DROP_ONLY), default=ACCEPT_AND_DROP)
    p.add_argument("--cache-fraction", type=float, default=0.10)
    p.add_argument("--budget", type=float, default=math.inf, help="intermediate-tensor byte cap")
    p.add_argument("--offload", action="store_true", help="spill hidden states between layers")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--flops", type=float, help="override measured FLOP/s")
    p.add_argument("--disk-bps", type=float, help="override measured disk bytes/s")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="monorank", description="Top-K cross-encoder reranking with layer streaming.")
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rerank", help="rerank one query's candidates")
    _engine_options(p)
    p.add_argument("--input", required=True, help="line-delimited query + candidates")
    p.add_argument("--output", help="result JSON path")
    p.add_argument("--trace", help="per-layer trace output (JSON lines)")

    p = sub.add_parser("eval", help="Precision@K with and without pruning")
    _engine_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", help="report JSON path")

    p = sub.add_parser("calibrate", help="pick the lowest threshold meeting a precision target")
    _engine_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", type=float, required=True)

    p = sub.add_parser("gen-model", help="write a random synthetic model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--vocab", type=int, default=1024)
    p.add_argument("--max-seq-len", type=int, default=128)
    p.add_argument("--arch", choices=("decoder_only", "encoder_only"), default="decoder_only")

    p = sub.add_parser("bench-overlap", help="weight-streaming overlap benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--delay", type=float, help="injected seconds per layer (default: measured compute)")
    p.add_argument("--candidates", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config) as f:
            values = json.load(f)
    except OSError as exc:
        raise errors.ConfigError(f"cannot read config {known.config}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise errors.ConfigError(f"config {known.config} is not JSON: {exc.msg}") from None
    if not isinstance(values, dict):
        raise errors.ConfigError("config must be a JSON object")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    if "threshold" in values and values["threshold"] in ("inf", "+inf", None):
        values["threshold"] = math.inf
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**values)


def _prune_config(args):
    if args.threshold is not None and args.auto_target is not None:
        raise UsageError("--threshold and --auto-target are mutually exclusive")
    if args.k < 1:
        raise UsageError(f"-k must be >= 1, got {args.k}")
    clusters = args.clusters
    if clusters != "auto":
        try:
            clusters = int(clusters)
        except (TypeError, ValueError):
            raise UsageError(f"--clusters must be 'auto' or an integer, got {clusters!r}") from None
    threshold = math.inf if args.threshold is None else args.threshold
    return PruneConfig(threshold, clusters, args.mode)


def _runtime(args, manifest):
    if args.flops is not None and args.disk_bps is not None:
        profile = DeviceProfile(args.flops, args.disk_bps)
    else:
        measured = measure_profile(args.model, manifest)
        profile = DeviceProfile(
            args.flops if args.flops is not None else measured.flops_per_second,
            args.disk_bps if args.disk_bps is not None else measured.disk_bytes_per_second,
        )
    return Runtime(
        cache_fraction=args.cache_fraction,
        budget=args.budget,
        offload=args.offload,
        profile=profile,
        chunk_size=args.chunk_size,
        trace_path=getattr(args, "trace", None),
    )


def _scorer_for(record):
    return ScriptedScorer(record.scores_by_layer) if record.scores_by_layer is not None else None


def _ranked(engine, record, k, cfg):
    return engine.rerank(record.batch, k, cfg, scorer=_scorer_for(record))


def _calibrate(engine, args, cfg, dataset_path):
    records = read_dataset(dataset_path, engine.manifest.vocab_size)

    def run(record, threshold):
        c = PruneConfig(threshold, cfg.k_clusters, cfg.mode)
        return list(_ranked(engine, record, args.k, c).ids)

    grid = args.grid if args.grid is not None else list(DEFAULT_GRID)
    return calibrate_threshold(records, args.k, args.auto_target, grid, run)


def _resolve_threshold(engine, args, cfg):
    if args.auto_target is None:
        return cfg, None
    if not args.calibration_data:
        raise UsageError("--auto-target needs --calibration-data")
    cal = _calibrate(engine, args, cfg, args.calibration_data)
    return PruneConfig(cal.threshold, cfg.k_clusters, cfg.mode), cal


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def cmd_rerank(args):
    cfg = _prune_config(args)
    manifest = read_manifest(args.model)
    batch = read_rerank_input(args.input, manifest.vocab_size)
    engine = Engine(args.model, _runtime(args, manifest))
    cfg, cal = _resolve_threshold(engine, args, cfg)
    result = engine.rerank(batch, args.k, cfg)
    if result.notice:
        print(f"notice: {result.notice}", file=sys.stderr)
    print(f"{'rank':>4}  {'id':<20} {'score':>10}  {'layer':>5}  status")
    for rank, e in enumerate(result.entries, 1):
        print(f"{rank:>4}  {str(e.candidate_id):<20} {e.score:>10.6f}  {e.exit_layer:>5}  {e.status}")
    print(
        f"layers {result.layers_executed}/{manifest.n_layers}, compute units {result.compute_units}, "
        f"threshold {cfg.dispersion_threshold}"
    )
    if args.output:
        out = result.to_dict()
        out["threshold"] = cfg.dispersion_threshold
        if cal is not None:
            out["calibration"] = {"warning": cal.warning, "precision_by_threshold": cal.precision_by_threshold}
        _write_json(args.output, out)
    return EXIT_OK


def cmd_eval(args):
    cfg = _prune_config(args)
    manifest = read_manifest(args.model)
    records = read_dataset(args.dataset, manifest.vocab_size)
    engine = Engine(args.model, _runtime(args, manifest))
    cfg, _ = _resolve_threshold(engine, args, cfg)
    off = PruneConfig(math.inf, cfg.k_clusters, cfg.mode)
    report = {"records": len(records), "k": args.k, "threshold": cfg.dispersion_threshold}
    for label, c in (("baseline", off), ("pruned", cfg)):
        precisions, units, peaks = [], 0, {}
        for r in records:
            res = _ranked(engine, r, args.k, c)
            precisions.append(precision_at_k(list(res.ids), r.relevant, args.k))
            units += res.compute_units
            for cat, v in res.ledger["peak"].items():
                peaks[cat] = max(peaks.get(cat, 0), v)
        report[label] = {
            "precision": float(np.mean(precisions)),
            "compute_units": units,
            "peak_resident": peaks,
        }
    base, pruned = report["baseline"]["compute_units"], report["pruned"]["compute_units"]
    report["compute_saved"] = 1 - pruned / base if base else 0.0
    print(
        f"precision@{args.k}: baseline {report['baseline']['precision']:.4f}  "
        f"pruned {report['pruned']['precision']:.4f}  "
        f"compute saved {report['compute_saved']:.1%}  "
        f"peak layer buffers {report['pruned']['peak_resident']['layer_buffers']}"
    )
    if args.output:
        _write_json(args.output, report)
    return EXIT_OK


def cmd_calibrate(args):
    if args.threshold is not None:
        raise UsageError("calibrate does not take --threshold")
    args.auto_target = args.target
    cfg = _prune_config(args)
    manifest = read_manifest(args.model)
    engine = Engine(args.model, _runtime(args, manifest))
    cal = _calibrate(engine, args, cfg, args.dataset)
    for t, p in cal.precision_by_threshold.items():
        print(f"threshold {t:<6} precision {p:.4f}")
    if cal.warning:
        print(f"warning: no threshold reaches {args.target}; pruning disabled (inf)")
    print(f"chosen threshold: {cal.threshold}")
    return EXIT_OK


def cmd_gen_model(args):
    spec = ModelSpec(
        n_layers=args.layers, d_model=args.d_model, n_heads=args.heads, d_ff=args.d_ff,
        vocab_size=args.vocab, max_seq_len=args.max_seq_len, arch=args.arch,
    )
    gen_synthetic_model(spec, args.seed, args.out)
    print(f"wrote {args.layers}-layer model to {args.out}")
    return EXIT_OK


def cmd_bench_overlap(args):
    rep = bench_overlap(
        args.model, args.delay, n_candidates=args.candidates, seq_len=args.seq_len,
        repeats=args.repeats, seed=args.seed,
    )
    print(f"layers            {rep.n_layers}")
    print(f"injected delay    {rep.injected_delay * 1e3:9.2f} ms/layer")
    print(f"compute only      {rep.compute_only * 1e3:9.2f} ms")
    print(f"pipelined         {rep.pipelined * 1e3:9.2f} ms")
    print(f"sequential bound  {rep.sequential_bound * 1e3:9.2f} ms")
    print(f"weight wait       {rep.weight_wait * 1e3:9.2f} ms")
    print(f"overlap ratio     {rep.overlap_ratio:9.3f}")
    if args.output:
        _write_json(args.output, rep.to_dict())
    return EXIT_OK


COMMANDS = {
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "gen-model": cmd_gen_model,
    "bench-overlap": cmd_bench_overlap,
}

DATA_ERRORS = (
    errors.InputError, errors.FormatError, errors.ModelNotFoundError,
    errors.ContractError, errors.ConfigError, FileNotFoundError,
)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (errors.MonorankError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
