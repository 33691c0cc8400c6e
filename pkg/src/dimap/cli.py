"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, unreadable or invalid
inputs), 2 internal failure (violated invariant or theorem check).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from typing import List, Optional, Sequence

from . import __version__
from .distortion import run_battery
from .errors import DimapError, RatioOutOfRange
from .importance import dump_scores, pool_layers, prunable_ids
from .pruner import (
    PRESET_RATIOS,
    SCHEMES,
    apply,
    make_plan,
    masks_to_checkpoint,
    preset_ratio,
    zero_counts,
)
from .report import (
    DEFAULT_BINS,
    DEFAULT_RANGE,
    PruneReport,
    auto_downsample,
    dumps_deterministic,
    emit_report,
    emptied_counts,
    keep_ratio_table,
    keep_ratio_variance,
    mask_heatmap,
    source_timestamp,
    weight_histogram,
    write_histogram_csv,
)
from .taxonomy import (
    PRESETS,
    PRUNABLE_ROLES,
    ArchConfig,
    Classifier,
    check_taxonomy,
    count_params,
    enumerate_layers,
    estimate_flops,
    preset_arch,
    synthesize,
    taxonomy_from_checkpoint,
)
from .tensor_store import read_checkpoint, write_checkpoint


class UsageError(DimapError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _human(n: float, unit: str = "") -> str:
    for div, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(n) >= div:
            return f"{n / div:.1f}{suffix}{unit}"
    return f"{n:g}{unit}"


def _threads(value: Optional[int]) -> int:
    return value if value else (os.cpu_count() or 1)


def _ratio_arg(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"{RatioOutOfRange.__name__}: ratio {value} not in [0, 1)")
    return value


def _ratios_arg(text: str) -> List[float]:
    return [_ratio_arg(part) for part in text.split(",") if part.strip()]


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_arch(p, required: bool) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--arch", help="JSON file with a custom architecture config")
    g.add_argument("--preset-arch", choices=sorted(PRESETS), help="built-in architecture")


def _add_classifier(p) -> None:
    p.add_argument("--prune-head", action="store_true", help="treat the classifier head as MLP_M")
    p.add_argument("--patterns", help="JSON file overriding the module name patterns")


def _arch(args) -> Optional[ArchConfig]:
    if getattr(args, "arch", None):
        return ArchConfig.from_file(args.arch)
    if getattr(args, "preset_arch", None):
        return preset_arch(args.preset_arch)
    return None


def _classifier(args) -> Classifier:
    if args.patterns:
        return Classifier.from_file(args.patterns, args.prune_head)
    return Classifier(prune_head=args.prune_head)


def _load(args):
    ckpt = read_checkpoint(args.input)
    cfg = _arch(args)
    cls = _classifier(args)
    if cfg is not None:
        taxonomy = enumerate_layers(cfg, cls)
        check_taxonomy(ckpt, taxonomy)
        names = set(ckpt.names())
        missing = [e.name for e in taxonomy if e.name not in names]
        if missing:
            raise DimapError(f"checkpoint lacks {len(missing)} tensors of {cfg.name}, e.g. {missing[0]!r}")
    else:
        taxonomy = taxonomy_from_checkpoint(ckpt, cls)
    return ckpt, cfg, taxonomy


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dimap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dimap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prune", help="prune a checkpoint one-shot")
    p.add_argument("--input", required=True)
    _add_arch(p, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ratio", type=_ratio_arg, help="fraction of prunable weights to remove")
    g.add_argument("--preset", choices=sorted(PRESET_RATIOS))
    p.add_argument("--scheme", choices=SCHEMES, default="per-module")
    _add_classifier(p)
    p.add_argument("--output", required=True)
    p.add_argument("--masks", help="write the F32 0/1 mask sidecar here")
    p.add_argument("--report", required=True)
    p.add_argument("--dump-scores", help="CSV of every weight's score (small models only)")
    p.add_argument("--heatmaps", help="directory for per-layer PGM mask heatmaps")
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("synth", help="write a random checkpoint for an architecture")
    _add_arch(p, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("F32", "F16"), default="F32")
    p.add_argument("--output", required=True)
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="numerically check the distortion theory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--csv", help="write bound tightness samples here")
    p.add_argument("--corrupt-bound", type=float, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="module/parameter/FLOPs breakdown and histograms")
    p.add_argument("--input", required=True)
    _add_arch(p, required=False)
    _add_classifier(p)
    p.add_argument("--histograms", action="store_true")
    p.add_argument("--bins", type=_positive_int, default=DEFAULT_BINS)
    p.add_argument("--range", type=float, default=DEFAULT_RANGE, dest="value_range")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="per-module DIMAP vs uniform magnitude mask structure")
    p.add_argument("--input", required=True)
    _add_arch(p, required=True)
    _add_classifier(p)
    p.add_argument("--ratios", type=_ratios_arg, default=[0.19, 0.28, 0.38, 0.50])
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_compare)
    return parser


def cmd_prune(args) -> int:
    ratio = args.ratio if args.ratio is not None else preset_ratio(args.preset)
    ckpt, cfg, taxonomy = _load(args)
    threads = _threads(args.threads)
    t0 = time.perf_counter()
    plan, masks = make_plan(ckpt, taxonomy, ratio, args.scheme, threads=threads)
    pruned = apply(ckpt, masks)

    zeros = zero_counts(masks, taxonomy)
    if args.scheme == "per-module" and zeros != plan.removal_counts:
        raise AssertionError(f"mask zero counts {zeros} != planned removals {plan.removal_counts}")

    before = count_params(ckpt, taxonomy)
    after = count_params(pruned, taxonomy)
    flops_before = estimate_flops(cfg, None, taxonomy)
    flops_after = estimate_flops(cfg, masks, taxonomy)

    heatmaps = {}
    if args.heatmaps:
        os.makedirs(args.heatmaps, exist_ok=True)
        for name, m in masks.items():
            path = os.path.join(args.heatmaps, f"{name}.pgm")
            heatmaps[name] = mask_heatmap(m, path, auto_downsample(m.shape))

    report = PruneReport(
        model=cfg.name,
        scheme=plan.scheme,
        target_ratio=ratio,
        thresholds=plan.thresholds,
        removal_counts=plan.removal_counts,
        params_before=before.total,
        prunable_before=before.prunable,
        per_module_before={str(r): n for r, n in before.per_module.items()},
        flops_dense=flops_before.dense,
        flops_effective_before=flops_before.effective,
        flops_effective_after=flops_after.effective,
        layers=keep_ratio_table(masks, taxonomy, include_aux=True),
        presets={"arch": args.preset_arch, "ratio": args.preset},
        nonzero_after=after.nonzero,
        heatmaps=heatmaps,
        timestamp=source_timestamp(),
    )
    report.check()

    write_checkpoint(pruned, args.output)
    if args.masks:
        write_checkpoint(masks_to_checkpoint(masks), args.masks)
    emit_report(report, args.report)
    if args.dump_scores:
        from .importance import layer_scores, magnitude_scores

        if args.scheme == "per-module":
            tables = [pool_layers(ckpt, taxonomy, prunable_ids(taxonomy, (r,)), r, layer_scores)
                      for r in PRUNABLE_ROLES]
        else:
            fn = magnitude_scores if args.scheme == "uniform-magnitude" else layer_scores
            tables = [pool_layers(ckpt, taxonomy, prunable_ids(taxonomy, PRUNABLE_ROLES), None, fn)]
        dump_scores(tables, ckpt, taxonomy, args.dump_scores)

    thr = ", ".join(f"{k}={v:.3g}" if v is not None else f"{k}=none" for k, v in plan.thresholds.items())
    print(
        f"{cfg.name} {plan.scheme} ratio={ratio:g}: "
        f"Para.down {100 * report.para_reduction(True):.1f}% prunable / {100 * report.para_reduction():.1f}% total, "
        f"FLOPs.down {100 * report.flops_reduction():.1f}%, thresholds {thr}"
    )
    _log(f"pruned in {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_synth(args) -> int:
    cfg = _arch(args)
    ckpt = synthesize(cfg, args.seed, args.dtype, threads=_threads(args.threads))
    write_checkpoint(ckpt, args.output)
    counts = count_params(ckpt, enumerate_layers(cfg))
    flops = estimate_flops(cfg)
    print(f"{cfg.name}: params {counts.total} ({_human(counts.total)}), "
          f"dense FLOPs {flops.dense} ({_human(flops.dense)}; {flops.convention})")
    return 0


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    scale = 1.0 if args.corrupt_bound is None else args.corrupt_bound
    results, rows = run_battery(args.seed, args.trials, args.samples, bound_scale=scale)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  cases={r.cases}  {r.detail}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["net_id", "layer", "sparsity", "empirical_sup", "analytic_bound", "tightness"])
            for row in rows:
                out.writerow([row.net_id, row.layer, f"{row.sparsity:.6g}", f"{row.empirical_sup:.6g}",
                              f"{row.analytic_bound:.6g}", f"{row.tightness:.6g}"])
    return 0 if all(r.passed for r in results) else 2


def cmd_analyze(args) -> int:
    ckpt, cfg, taxonomy = _load(args)
    os.makedirs(args.out_dir, exist_ok=True)
    counts = count_params(ckpt, taxonomy)
    data = {
        "model": cfg.name if cfg else None,
        "params": {
            "total": counts.total,
            "nonzero": counts.nonzero,
            "prunable": counts.prunable,
            "per_module": {str(r): n for r, n in counts.per_module.items()},
            "share": {str(r): n / counts.total if counts.total else 0.0 for r, n in counts.per_module.items()},
        },
    }
    if cfg is not None:
        flops = estimate_flops(cfg, None, taxonomy)
        data["flops"] = {
            "dense": flops.dense,
            "convention": flops.convention,
            "per_component": flops.per_component,
            "share": {k: v / flops.dense for k, v in flops.per_component.items()},
        }
    if args.histograms:
        hist_dir = os.path.join(args.out_dir, "histograms")
        os.makedirs(hist_dir, exist_ok=True)
        for rec in ckpt:
            counts_ = weight_histogram(rec, args.bins, args.value_range)
            write_histogram_csv(counts_, os.path.join(hist_dir, f"{rec.name}.csv"), args.value_range)
        data["histograms"] = {"bins": args.bins, "range": args.value_range, "count": len(ckpt)}
    path = os.path.join(args.out_dir, "analysis.json")
    with open(path, "w") as fh:
        fh.write(dumps_deterministic(data))
    share = data["params"]["share"]
    print("params " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in share.items()) + f" of {_human(counts.total)}")
    return 0


def cmd_compare(args) -> int:
    ckpt, cfg, taxonomy = _load(args)
    threads = _threads(args.threads)
    prunable = [e for e in taxonomy if e.prunable]
    header = ["ratio", "scheme", "removed", "keep_ratio_variance", "empty_rows", "empty_layers"]
    header += [e.name for e in prunable]
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for ratio in args.ratios:
            for scheme in ("per-module", "uniform-magnitude"):
                plan, masks = make_plan(ckpt, taxonomy, ratio, scheme, threads=threads)
                rows = keep_ratio_table(masks, taxonomy)
                var = keep_ratio_variance(rows)
                empty = emptied_counts(masks)
                out.writerow([f"{ratio:g}", scheme, plan.total_removed, f"{var:.6g}",
                              empty["empty_rows"], empty["empty_layers"]]
                             + [f"{r.ratio:.6g}" for r in rows])
                print(f"ratio={ratio:g} {scheme}: keep-ratio variance {var:.3g}, "
                      f"empty rows {empty['empty_rows']}, empty layers {empty['empty_layers']}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (DimapError, OSError) as exc:
        _log(f"error: {exc}")
        return 1
    except AssertionError as exc:
        _log(f"internal check failed: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001
        _log(f"internal error: {type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
