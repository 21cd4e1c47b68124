"""Command-line entry point: ``python -m reciptrack <command> ...``.

Commands::

    gen        write a synthetic benchmark
    train      train one configuration -> checkpoint + loss log
    track      run a checkpoint over a benchmark -> one result CSV per sequence
    eval       score result CSVs against ground truth -> report.json + curves
    gradcheck  finite-difference check of every registered op / head / loss
    ablate     train and evaluate configurations I-IV (+ centerness) over seeds
    analyze    (score, IoU) pairs and Pearson r per configuration of an ablation
    sweep      positive-radius sweep

Exit status: 0 on success with every requested check passing, 1 when a check
fails, 2 on bad arguments or config, 3 on runtime errors (missing files,
diverged training).  Errors go to standard error; ``--json`` prints a
machine-readable summary on standard output instead of the text lines.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TABLE_VARIANTS, VARIANTS, ConfigError, RunConfig, load_config
from .io_utils import atomic_write_text

log = logging.getLogger("reciptrack")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class CommandError(RuntimeError):
    """An operator-facing failure with a message and exit status."""

    def __init__(self, message: str, status: int = EXIT_RUNTIME):
        super().__init__(message)
        self.status = status


def _out(args) -> Path:
    if not args.out:
        raise CommandError(f"{args.command}: --out is required", EXIT_USAGE)
    return Path(args.out)


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise CommandError(f"--{what} is required", EXIT_USAGE)
    p = Path(path)
    if not p.is_dir():
        raise CommandError(f"{what} directory not found: {p}")
    return p


def _seed_list(args, cfg: RunConfig) -> list:
    """``--seeds N`` means seeds ``seed .. seed+N-1`` of the config."""
    n = args.seeds if args.seeds is not None else 5
    if n < 1:
        raise CommandError("--seeds must be >= 1", EXIT_USAGE)
    return [cfg.seed + i for i in range(n)]


def _load_benchmark(path):
    from .simulator import load_benchmark

    return load_benchmark(_require_dir(path, "data"))


def _checkpoint_config(ckpt: Path, cfg: RunConfig) -> RunConfig:
    """Take the model and loss settings a checkpoint was trained with."""
    from .losses import LossConfig
    from .model import HeadConfig

    manifest = json.loads((ckpt / "manifest.json").read_text())
    saved = manifest.get("config", {})
    model = HeadConfig(**saved["model"]) if "model" in saved else cfg.model
    losses = LossConfig(**saved["losses"]) if "losses" in saved else cfg.losses
    return dataclasses.replace(cfg, model=model, losses=losses)


# -- commands ------------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> dict:
    from .simulator import make_benchmark

    out = _out(args)
    d = cfg.data
    if args.split == "train":
        seed, _ = cfg.data_seeds()
        n = args.n or d.train_sequences
    else:
        _, seed = cfg.data_seeds()
        n = args.n or d.benchmark_sequences
    containers = make_benchmark(n, d.mix, seed=seed, out_dir=out, frames=d.frames, frame_size=d.frame_size)
    return {"out": str(out), "sequences": len(containers), "split": args.split, "seed": seed}


def cmd_train(args, cfg: RunConfig) -> dict:
    from .pipeline import train_run, training_set

    out = _out(args)
    if args.variant:
        cfg = cfg.variant(args.variant)
    dataset = [c.to_sequence() for c in _load_benchmark(args.data)] if args.data else training_set(cfg)
    resume = None
    if args.resume:
        resume = Path(args.resume)
        if not (resume / "manifest.json").exists():
            raise CommandError(f"not a checkpoint: {resume}")
    result = train_run(cfg, dataset, out_dir=out, resume=resume)
    last = result.log[-1] if result.log else {}
    return {"checkpoint": str(result.checkpoint), "steps": result.steps, "final_total": last.get("total")}


def cmd_track(args, cfg: RunConfig) -> dict:
    from .pipeline import track_benchmark, write_results
    from .trainer import load_params

    out = _out(args)
    ckpt = _require_dir(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(ckpt, cfg)
    params = load_params(ckpt)
    bench = _load_benchmark(args.data)
    results = track_benchmark(params, bench, cfg)
    write_results(results, bench, out)
    return {"out": str(out), "sequences": len(results), "lost_frames": int(sum(len(r.lost) for r in results))}


def cmd_eval(args, cfg: RunConfig) -> dict:
    from .metrics import evaluate_dirs, write_report

    out = _out(args)
    report = evaluate_dirs(_require_dir(args.results, "results"), _require_dir(args.data, "data"))
    write_report(report, out)
    return {
        "report": str(out / "report.json"),
        "ao": report.ao,
        "sr50": report.sr[0.5],
        "sr75": report.sr[0.75],
        "pearson_r": None if math.isnan(report.pearson_r) else report.pearson_r,
        "frames": report.n_frames,
    }


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    from .checks import CASES, DEFAULT_TOL, run_all

    names = args.cases.split(",") if args.cases else None
    if names:
        unknown = [n for n in names if n not in CASES]
        if unknown:
            raise CommandError(f"unknown gradcheck case(s): {', '.join(unknown)}", EXIT_USAGE)
    tol = args.tol if args.tol is not None else DEFAULT_TOL
    echo = None if args.json else (lambda r: print(r.line(), flush=True))
    report = run_all(names, seeds=args.seeds, tol=tol, progress=echo)
    summary = report.to_dict()
    if args.out:
        atomic_write_text(Path(args.out) / "gradcheck.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    summary["_status"] = EXIT_OK if report.passed else EXIT_CHECK_FAILED
    return summary


def cmd_ablate(args, cfg: RunConfig) -> dict:
    from .metrics import ablate
    from .pipeline import default_benchmark

    out = Path(args.out) if args.out else None
    bench = _load_benchmark(args.data) if args.data else default_benchmark(cfg)
    variants = tuple(args.variants.split(",")) if args.variants else TABLE_VARIANTS
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CommandError(f"unknown variant(s): {', '.join(bad)}", EXIT_USAGE)

    def echo(o):
        if not args.json:
            status = "FAILED " + o.error if o.failed else f"AO {o.ao:.4f} SR50 {o.sr50:.3f} r {o.pearson_r:.3f}"
            print(f"{o.variant:<10} seed {o.seed}: {status}", flush=True)

    report = ablate(bench, _seed_list(args, cfg), cfg, variants, centerness=not args.no_centerness, out_dir=out, progress=echo)
    summary = report.to_dict()
    if not args.json:
        print(report.table_csv(), end="")
        for k, v in report.ordering().items():
            print(f"{'PASS' if v else 'FAIL'} {k}")
        if report.centerness_position():
            print(f"centerness Pearson r: {report.centerness_position()}")
    summary["_status"] = EXIT_OK if all(report.ordering().values()) else EXIT_CHECK_FAILED
    return summary


def cmd_analyze(args, cfg: RunConfig) -> dict:
    """Pool (score, IoU) pairs per configuration from an ablation directory."""
    import csv
    import io

    from .metrics import pearson, score_iou_pairs
    from .tracker import read_results

    runs = _require_dir(args.results, "results")
    bench = {c.name: c.gt for c in _load_benchmark(args.data)}
    out = _out(args)
    per_variant: dict = {}
    for run in sorted(p for p in runs.iterdir() if (p / "results").is_dir()):
        variant, _, seed = run.name.rpartition("_seed")
        files = sorted((run / "results").glob("*.csv"))
        missing = [f.stem for f in files if f.stem not in bench]
        if missing:
            raise CommandError(f"{run}: sequences not in the benchmark: {', '.join(missing)}")
        res = [read_results(f) for f in files]
        scores, ious = score_iou_pairs(res, [bench[f.stem] for f in files])
        per_variant.setdefault(variant, []).append((int(seed or 0), scores, ious))
    if not per_variant:
        raise CommandError(f"{runs}: no '<variant>_seed<k>/results' run directories")
    summary = {}
    for variant, items in sorted(per_variant.items()):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "score", "iou"])
        for seed, scores, ious in items:
            for s, i in zip(scores, ious):
                w.writerow([seed, repr(float(s)), repr(float(i))])
        atomic_write_text(out / f"pairs_{variant}.csv", buf.getvalue())
        all_s = np.concatenate([s for _, s, _ in items])
        all_i = np.concatenate([i for _, _, i in items])
        r = pearson(all_s, all_i) if all_s.size >= 2 else math.nan
        summary[variant] = {
            "pearson_r": None if math.isnan(r) else r,
            "per_seed": {str(seed): _nan_none(pearson(s, i)) for seed, s, i in items},
            "pairs": int(all_s.size),
        }
        if not args.json:
            print(f"{variant:<10} r={r:.4f} pairs={all_s.size}")
    atomic_write_text(out / "pearson.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary


def cmd_sweep(args, cfg: RunConfig) -> dict:
    from .assignment import radius_sweep, sweep_csv
    from .pipeline import default_benchmark, training_set

    out = _out(args)
    bench = _load_benchmark(args.data) if args.data else default_benchmark(cfg)
    radii = [float(r) for r in args.radii.split(",")]
    rows = radius_sweep(radii, bench, stride=cfg.model.total_stride, cfg=cfg, dataset=training_set(cfg))
    atomic_write_text(out / "sweep.csv", sweep_csv(rows))
    if not args.json:
        print(sweep_csv(rows), end="")
    return {"rows": [_nan_dict(dataclasses.asdict(r)) for r in rows]}


def _nan_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _nan_dict(d: dict) -> dict:
    return {k: _nan_none(v) for k, v in d.items()}


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (default: built-in defaults)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="reciptrack", description="Siamese tracking head with reciprocal cls/reg losses.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic benchmark")
    g.add_argument("--split", choices=("bench", "train"), default="bench", help="which config-derived seed to use")
    g.add_argument("-n", type=int, help="number of sequences (default from config)")

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--data", help="benchmark-format directory to train on (default: generated training set)")
    t.add_argument("--variant", choices=sorted(VARIANTS), help="apply ablation switches")
    t.add_argument("--resume", help="checkpoint directory to resume from")

    k = sub.add_parser("track", parents=[common], help="track a benchmark with a checkpoint")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--data", required=True, help="benchmark directory")

    e = sub.add_parser("eval", parents=[common], help="evaluate result CSVs")
    e.add_argument("--results", required=True, help="directory of <sequence>.csv result files")
    e.add_argument("--data", required=True, help="benchmark directory")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--tol", type=float, help="max relative error (default 1e-4)")
    c.add_argument("--seeds", type=int, help="seeds per case (default: 100; fewer for the full-network case)")
    c.add_argument("--cases", help="comma-separated case names (default: all)")

    a = sub.add_parser("ablate", parents=[common], help="ablation over configurations I-IV")
    a.add_argument("--seeds", type=int, help="number of seeds (default 5)")
    a.add_argument("--data", help="benchmark directory (default: generated from the config)")
    a.add_argument("--variants", help="comma-separated variants (default I,II,III,IV)")
    a.add_argument("--no-centerness", action="store_true", help="skip the centerness-target variant")

    n = sub.add_parser("analyze", parents=[common], help="score/IoU pairs and Pearson r per configuration")
    n.add_argument("--results", required=True, help="ablation output directory")
    n.add_argument("--data", required=True, help="benchmark directory")

    s = sub.add_parser("sweep", parents=[common], help="positive-radius sweep")
    s.add_argument("--radii", default="1,2,3,4,5")
    s.add_argument("--data", help="benchmark directory (default: generated from the config)")
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"reciptrack: config error at '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"reciptrack: config not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"reciptrack: config error at '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandError as exc:
        print(f"reciptrack {args.command}: {exc}", file=sys.stderr)
        return exc.status
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"reciptrack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    status = summary.pop("_status", EXIT_OK)
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=_nan_none))
    elif args.command in ("gen", "train", "track", "eval"):
        for key, value in summary.items():
            print(f"{key}: {value}")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
