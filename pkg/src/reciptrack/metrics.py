"""Evaluation: per-frame IoU, AO, SR@tau, success/precision curves, Pearson r.

Frame 0 (the initialization frame) is excluded from every average.  SR uses
the strict rule IoU > tau.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diffmath import EmptyInputError
from .geometry import Box, iou, iou_array
from .io_utils import atomic_write_text
from .simulator import read_gt_csv
from .tracker import read_results

SR_THRESHOLDS = (0.5, 0.75)
SUCCESS_POINTS = 101
PRECISION_MAX_PX = 50
PRECISION_SUMMARY_PX = 20


def frame_ious(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame IoU for frames 1..T-1 of two ``(T, 4)`` corner-box arrays."""
    boxes = np.asarray(boxes, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if boxes.shape != gt.shape:
        raise ValueError(f"result rows {boxes.shape[0]} != ground-truth rows {gt.shape[0]}")
    return np.array([iou(Box.from_array(b), Box.from_array(g)) for b, g in zip(boxes[1:], gt[1:])])


def frame_iou_series(results_path, gt_path) -> list[float]:
    boxes, _ = read_results(results_path)
    gt = read_gt_csv(gt_path)
    if len(boxes) != len(gt):
        raise ValueError(f"row count mismatch: {results_path} has {len(boxes)} rows, {gt_path} has {len(gt)}")
    return frame_ious(boxes, gt).tolist()


def center_errors(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)[1:]
    gt = np.asarray(gt, dtype=np.float64)[1:]
    cb = (boxes[:, :2] + boxes[:, 2:]) / 2
    cg = (gt[:, :2] + gt[:, 2:]) / 2
    return np.hypot(*(cb - cg).T)


def ao_sr(ious, thresholds=SR_THRESHOLDS) -> tuple[float, dict]:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise EmptyInputError("ao_sr needs at least one IoU")
    return float(ious.mean()), {float(t): float(np.mean(ious > t)) for t in thresholds}


def success_curve(ious, points: int = SUCCESS_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of frames with IoU > tau for ``points`` thresholds spanning [0, 1]."""
    ious = np.asarray(ious, dtype=np.float64)
    tau = np.linspace(0.0, 1.0, points)
    return tau, (ious[None, :] > tau[:, None]).mean(axis=1)


def curve_auc(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.trapezoid(y, x))


def precision_curve(errors, max_px: int = PRECISION_MAX_PX) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of frames with center error <= threshold, thresholds 0..max_px pixels."""
    errors = np.asarray(errors, dtype=np.float64)
    thr = np.arange(max_px + 1, dtype=np.float64)
    return thr, (errors[None, :] <= thr[:, None]).mean(axis=1)


def pearson(x, y) -> float:
    """Sample Pearson coefficient (two-pass).  Zero variance gives NaN (undefined)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two equal-length 1-D samples, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise EmptyInputError("pearson needs at least two pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass
class SequenceEval:
    name: str
    frames: int
    ao: float
    sr50: float
    sr75: float
    precision20: float


@dataclass
class EvalReport:
    ao: float
    sr: dict
    success_curve: list  # [(tau, value)]
    precision_curve: list  # [(px, value)]
    pearson_r: float
    per_sequence: list = field(default_factory=list)
    success_auc: float = 0.0
    precision20: float = 0.0
    n_frames: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sr"] = {f"{k:g}": v for k, v in self.sr.items()}
        d["pearson_r"] = None if math.isnan(self.pearson_r) else self.pearson_r
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def success_csv(self) -> str:
        return _curve_csv(("tau", "success"), self.success_curve)

    def precision_csv(self) -> str:
        return _curve_csv(("threshold_px", "precision"), self.precision_curve)

    def per_sequence_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "frames", "ao", "sr50", "sr75", "precision20"])
        for s in self.per_sequence:
            w.writerow([s["name"], s["frames"]] + [repr(float(s[k])) for k in ("ao", "sr50", "sr75", "precision20")])
        return buf.getvalue()


def _curve_csv(header, points) -> str:
    lines = [",".join(header)] + [f"{x!r},{y!r}" for x, y in points]
    return "\n".join(lines) + "\n"


def evaluate_arrays(names: Sequence[str], results: Sequence[tuple], gts: Sequence[np.ndarray]) -> EvalReport:
    """Build a report from per-sequence ``(boxes, scores)`` results and ground-truth arrays."""
    if not names:
        raise EmptyInputError("nothing to evaluate")
    all_iou, all_err, all_score, per = [], [], [], []
    for name, (boxes, scores), gt in zip(names, results, gts):
        if len(boxes) != len(gt):
            raise ValueError(f"{name}: {len(boxes)} result rows vs {len(gt)} ground-truth rows")
        ious = frame_ious(boxes, gt)
        err = center_errors(boxes, gt)
        if ious.size:
            _, sr = ao_sr(ious)
            per.append(
                asdict(SequenceEval(name, int(ious.size), float(ious.mean()), sr[0.5], sr[0.75], float(np.mean(err <= PRECISION_SUMMARY_PX))))
            )
        all_iou.append(ious)
        all_err.append(err)
        all_score.append(np.asarray(scores, dtype=np.float64)[1:])
    ious = np.concatenate(all_iou)
    err = np.concatenate(all_err)
    scores = np.concatenate(all_score)
    ao, sr = ao_sr(ious)
    tau, succ = success_curve(ious)
    thr, prec = precision_curve(err)
    r = pearson(scores, ious) if ious.size >= 2 else math.nan
    return EvalReport(
        ao=ao,
        sr=sr,
        success_curve=[(float(a), float(b)) for a, b in zip(tau, succ)],
        precision_curve=[(float(a), float(b)) for a, b in zip(thr, prec)],
        pearson_r=r,
        per_sequence=per,
        success_auc=curve_auc(tau, succ),
        precision20=float(prec[PRECISION_SUMMARY_PX]),
        n_frames=int(ious.size),
    )


def evaluate_dirs(results_dir, benchmark_dir, names: Optional[Sequence[str]] = None) -> EvalReport:
    """Evaluate ``results_dir/<seq>.csv`` against ``benchmark_dir/<seq>/groundtruth.csv``."""
    results_dir, benchmark_dir = Path(results_dir), Path(benchmark_dir)
    if names is None:
        names = sorted(p.stem for p in results_dir.glob("*.csv"))
    if not names:
        raise EmptyInputError(f"{results_dir}: no result files")
    res, gts = [], []
    for n in names:
        rpath, gpath = results_dir / f"{n}.csv", benchmark_dir / n / "groundtruth.csv"
        boxes, scores = read_results(rpath)
        gt = read_gt_csv(gpath)
        if len(boxes) != len(gt):
            raise ValueError(f"row count mismatch: {rpath} has {len(boxes)} rows, {gpath} has {len(gt)}")
        res.append((boxes, scores))
        gts.append(gt)
    return evaluate_arrays(list(names), res, gts)


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_text(out / "success_curve.csv", report.success_csv())
    atomic_write_text(out / "precision_curve.csv", report.precision_csv())
    atomic_write_text(out / "per_sequence.csv", report.per_sequence_csv())
    return out / "report.json"


def score_iou_pairs(results: Sequence[tuple], gts: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (tracking score, true IoU) over frames 1..T-1 of every sequence."""
    scores = np.concatenate([np.asarray(s, dtype=np.float64)[1:] for _, s in results])
    ious = np.concatenate([iou_array(np.asarray(b)[1:], np.asarray(g)[1:]) for (b, _), g in zip(results, gts)])
    return scores, ious


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    seeds: list
    ao: list  # per seed, NaN where the run failed
    pearson: list
    median_ao: float
    median_sr50: float
    median_sr75: float
    pearson_r: float  # pooled over every (score, IoU) pair of the variant's successful runs
    failed: list  # seeds whose run diverged
    gain_vs_I: float = math.nan


@dataclass
class AblationReport:
    rows: dict  # variant -> AblationRow
    seeds: list

    def median(self, variant: str) -> float:
        return self.rows[variant].median_ao

    def ordering(self) -> dict:
        """The directional claims: full and partial variants beat the baseline."""
        m = self.median
        checks = {}
        for v in ("II", "III", "IV"):
            if v in self.rows and "I" in self.rows:
                checks[f"{v}>I"] = bool(m(v) > m("I"))
        if "IV" in self.rows and "I" in self.rows:
            checks["pearson IV>I"] = bool(self.rows["IV"].pearson_r > self.rows["I"].pearson_r)
        return checks

    def centerness_position(self) -> Optional[str]:
        if not {"I", "IV", "centerness"} <= set(self.rows):
            return None
        r_i, r_iv, r_c = (self.rows[v].pearson_r for v in ("I", "IV", "centerness"))
        lo, hi = min(r_i, r_iv), max(r_i, r_iv)
        if lo <= r_c <= hi:
            return "between I and IV"
        return "below I" if r_c < lo else "above IV"

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        rows = {k: {f: clean(x) for f, x in asdict(r).items()} for k, r in self.rows.items()}
        return {
            "seeds": self.seeds,
            "rows": rows,
            "ordering": self.ordering(),
            "centerness_pearson": self.centerness_position(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "median_ao", "median_sr50", "median_sr75", "gain_vs_I", "pearson_r", "failed_runs"])
        for k, r in self.rows.items():
            w.writerow([k] + [repr(float(x)) for x in (r.median_ao, r.median_sr50, r.median_sr75, r.gain_vs_I, r.pearson_r)] + [len(r.failed)])
        return buf.getvalue()


def _nanmedian(values) -> float:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    return float(np.median(v)) if v.size else math.nan


def summarize_ablation(outcomes: Sequence, seeds: Sequence[int]) -> AblationReport:
    """Fold :class:`~reciptrack.pipeline.RunOutcome` records into a Table-1-shaped report."""
    rows: dict = {}
    by_variant: dict = {}
    for o in outcomes:
        by_variant.setdefault(o.variant, []).append(o)
    for variant, runs in by_variant.items():
        ok = [o for o in runs if not o.failed]
        if ok:
            scores = np.concatenate([o.scores for o in ok])
            ious = np.concatenate([o.ious for o in ok])
            pooled = pearson(scores, ious) if scores.size >= 2 else math.nan
        else:
            pooled = math.nan
        rows[variant] = AblationRow(
            variant=variant,
            seeds=[o.seed for o in runs],
            ao=[o.ao for o in runs],
            pearson=[o.pearson_r for o in runs],
            median_ao=_nanmedian([o.ao for o in runs]),
            median_sr50=_nanmedian([o.sr50 for o in runs]),
            median_sr75=_nanmedian([o.sr75 for o in runs]),
            pearson_r=pooled,
            failed=[o.seed for o in runs if o.failed],
        )
    if "I" in rows:
        base = rows["I"].median_ao
        for r in rows.values():
            r.gain_vs_I = (r.median_ao - base) / base if base and not math.isnan(base) else math.nan
    return AblationReport(rows, list(seeds))


def ablate(
    benchmark,
    seeds: Sequence[int],
    cfg=None,
    variants: Sequence[str] = ("I", "II", "III", "IV"),
    centerness: bool = True,
    out_dir=None,
    progress=None,
) -> AblationReport:
    """Train and evaluate every variant for every seed on ``benchmark``.

    A run that diverges is marked failed; the others are still reported.
    """
    from .config import RunConfig
    from .pipeline import run_variant, training_set

    cfg = cfg or RunConfig()
    dataset = training_set(cfg)
    names = list(variants) + (["centerness"] if centerness and "centerness" not in variants else [])
    outcomes = []
    for seed in seeds:
        for v in names:
            run_dir = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            o = run_variant(cfg, v, int(seed), dataset, benchmark, out_dir=run_dir)
            outcomes.append(o)
            if progress is not None:
                progress(o)
    report = summarize_ablation(outcomes, seeds)
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "ablation.json", report.to_json())
        atomic_write_text(Path(out_dir) / "ablation.csv", report.table_csv())
    return report
