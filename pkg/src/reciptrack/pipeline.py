"""Train -> track -> evaluate plumbing shared by the CLI, the ablation and the radius sweep."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assignment import VideoSequence
from .config import RunConfig
from .geometry import Box
from .io_utils import atomic_write_text
from .metrics import EvalReport, evaluate_arrays, score_iou_pairs
from .simulator import SequenceContainer, make_benchmark
from .tracker import TrackResult, track_many
from .trainer import TrainingDiverged, train

log = logging.getLogger(__name__)


def training_set(cfg: RunConfig) -> list[VideoSequence]:
    """Training sequences generated from the config seed, disjoint from any benchmark seed."""
    d = cfg.data
    train_seed, _ = cfg.data_seeds()
    containers = make_benchmark(d.train_sequences, d.mix, seed=train_seed, frames=d.frames, frame_size=d.frame_size)
    return [c.to_sequence() for c in containers]


def default_benchmark(cfg: RunConfig, out_dir=None) -> list[SequenceContainer]:
    d = cfg.data
    _, bench_seed = cfg.data_seeds()
    return make_benchmark(d.benchmark_sequences, d.mix, seed=bench_seed, out_dir=out_dir, frames=d.frames, frame_size=d.frame_size)


def train_run(cfg: RunConfig, dataset: Sequence[VideoSequence], seed: Optional[int] = None, out_dir=None, resume=None):
    return train(
        dataset,
        cfg.train_config(seed),
        model_cfg=cfg.model,
        loss_cfg=cfg.losses,
        sampler_cfg=cfg.sampler_config(),
        radius=cfg.assignment.r,
        out_dir=out_dir,
        resume=resume,
    )


def track_benchmark(params: dict, benchmark: Sequence[SequenceContainer], cfg: RunConfig) -> list[TrackResult]:
    seqs = [(c.frames, Box.from_array(c.gt[0])) for c in benchmark]
    return track_many(seqs, params, cfg.tracker_config(), cfg.model)


def write_results(results: Sequence[TrackResult], benchmark: Sequence[SequenceContainer], out_dir) -> Path:
    out = Path(out_dir)
    for r, c in zip(results, benchmark):
        atomic_write_text(out / f"{c.name}.csv", r.to_csv())
    return out


def evaluate_results(results: Sequence[TrackResult], benchmark: Sequence[SequenceContainer]) -> EvalReport:
    return evaluate_arrays([c.name for c in benchmark], [(r.boxes, r.scores) for r in results], [c.gt for c in benchmark])


@dataclass
class RunOutcome:
    variant: str
    seed: int
    ao: float = math.nan
    sr50: float = math.nan
    sr75: float = math.nan
    pearson_r: float = math.nan
    failed: bool = False
    error: str = ""
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    ious: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def run_variant(
    cfg: RunConfig,
    variant: str,
    seed: int,
    dataset: Sequence[VideoSequence],
    benchmark: Sequence[SequenceContainer],
    out_dir=None,
) -> RunOutcome:
    """Train one ablation variant with one seed and evaluate it on ``benchmark``."""
    vcfg = cfg.variant(variant)
    try:
        result = train_run(vcfg, dataset, seed=seed, out_dir=out_dir)
    except (TrainingDiverged, ArithmeticError, ValueError) as exc:
        log.warning("variant %s seed %d failed: %s", variant, seed, exc)
        return RunOutcome(variant, seed, failed=True, error=str(exc))
    tracks = track_benchmark(result.params, benchmark, vcfg)
    report = evaluate_results(tracks, benchmark)
    scores, ious = score_iou_pairs([(t.boxes, t.scores) for t in tracks], [c.gt for c in benchmark])
    if out_dir is not None:
        write_results(tracks, benchmark, Path(out_dir) / "results")
        atomic_write_text(Path(out_dir) / "report.json", report.to_json())
    return RunOutcome(
        variant,
        seed,
        ao=report.ao,
        sr50=report.sr[0.5],
        sr75=report.sr[0.75],
        pearson_r=report.pearson_r,
        scores=scores,
        ious=ious,
    )


def radius_run(
    r: float,
    benchmark: Sequence[SequenceContainer],
    cfg: Optional[RunConfig] = None,
    dataset: Optional[Sequence[VideoSequence]] = None,
) -> tuple[float, float, float]:
    """Train and evaluate the configured variant with positive radius ``r``; returns (AO, SR@0.5, SR@0.75)."""
    cfg = cfg or RunConfig()
    cfg = dataclasses.replace(cfg, assignment=dataclasses.replace(cfg.assignment, r=r))
    if benchmark is None:
        benchmark = default_benchmark(cfg)
    dataset = dataset if dataset is not None else training_set(cfg)
    result = train_run(cfg, dataset)
    report = evaluate_results(track_benchmark(result.params, benchmark, cfg), benchmark)
    return report.ao, report.sr[0.5], report.sr[0.75]
