"""SGD-with-momentum training: warm-up + cosine schedule, staged backbone freezing,
CSV loss log and resumable checkpoints.

A checkpoint is a directory::

    manifest.json            configs, step, seed, sampler RNG state
    params/<name>.tensor     diffmath tensor blobs
    velocity/<name>.tensor
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assignment import SamplerConfig, VideoSequence, assign, negative_labels, sample_pair
from .diffmath import NonFiniteError, Tape, Tensor, dumps, loads
from .io_utils import atomic_write_text
from .losses import LossBundle, LossConfig, TargetBatch, head_loss
from .model import HeadConfig, forward, init_params

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "l_cls", "l_reg", "l_loc", "total")


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    steps_per_epoch: int = 100
    lr_start: float = 1e-6
    lr_peak: float = 0.1
    lr_end: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 8
    freeze_epochs: int = 10
    backbone_lr_mult: float = 0.1
    warmup_mode: str = "linear"  # "linear" | "log"
    checkpoint_every: int = 0  # steps; 0 = only at the end
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ValueError(f"freeze_epochs ({self.freeze_epochs}) must be in [0, epochs={self.epochs}]")
        for name in ("lr_start", "lr_peak", "lr_end", "backbone_lr_mult"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.warmup_mode not in ("linear", "log"):
            raise ValueError(f"warmup_mode must be 'linear' or 'log', got {self.warmup_mode!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def freeze_steps(self) -> int:
        return self.freeze_epochs * self.steps_per_epoch


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step``: warm-up from ``lr_start`` to ``lr_peak``, then cosine to ``lr_end``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        f = step / warm
        if cfg.warmup_mode == "log":
            return math.exp(math.log(cfg.lr_start) + f * (math.log(cfg.lr_peak) - math.log(cfg.lr_start)))
        return cfg.lr_start + f * (cfg.lr_peak - cfg.lr_start)
    span = total - warm - 1
    u = 1.0 if span <= 0 else min((step - warm) / span, 1.0)
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1 + math.cos(math.pi * u))


def sgd_step(params: dict, grads: dict, velocity: dict, lr, momentum: float) -> tuple[dict, dict]:
    """One momentum step over the names in ``grads``; returns new dicts.

    ``lr`` is a float or a per-name dict.  Parameters without a gradient are
    passed through untouched.  Any non-finite gradient aborts the whole step.
    """
    for name, g in grads.items():
        g = np.asarray(g)
        if g.shape != np.shape(params[name]):
            raise ValueError(f"gradient shape {g.shape} != parameter shape {np.shape(params[name])} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    new_p, new_v = dict(params), dict(velocity)
    for name, g in grads.items():
        rate = lr[name] if isinstance(lr, dict) else lr
        v = momentum * np.asarray(velocity[name]) + np.asarray(g)
        new_v[name] = v
        new_p[name] = np.asarray(params[name]) - rate * v
    return new_p, new_v


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    exemplar: np.ndarray  # (N, He, We, 3) uint8
    search: np.ndarray  # (N, Hs, Ws, 3) uint8
    targets: TargetBatch


def make_batch(
    dataset: Sequence[VideoSequence],
    rng: np.random.Generator,
    size: int,
    model_cfg: HeadConfig,
    sampler_cfg: SamplerConfig,
    radius: float,
) -> Batch:
    grid = model_cfg.grid()
    pairs = [sample_pair(dataset, rng, sampler_cfg) for _ in range(size)]
    maps = [assign(p.gt, grid, radius) if p.is_positive_pair else negative_labels(grid) for p in pairs]
    lx, ly = grid.locations()
    targets = TargetBatch.from_label_maps(maps, [p.gt for p in pairs], lx, ly)
    return Batch(np.stack([p.exemplar for p in pairs]), np.stack([p.search for p in pairs]), targets)


def loss_and_grads(
    params: dict, batch: Batch, model_cfg: HeadConfig, loss_cfg: LossConfig, step: int = 0, trainable=None
) -> tuple[LossBundle, dict]:
    """Forward + backward on one batch; gradients only for ``trainable`` names (default: all)."""
    names = set(params) if trainable is None else set(trainable)
    tensors = {}
    for k, v in params.items():
        t = Tensor._wrap(np.asarray(v))
        t.requires_grad = k in names
        tensors[k] = t
    with Tape() as tape:
        out = forward(batch.exemplar, batch.search, tensors, model_cfg)
        bundle = head_loss(out, batch.targets, loss_cfg, step)
    tape.backward(bundle.total)
    grads = {k: tensors[k].grad for k in names}
    return bundle, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict  # name -> ndarray
    velocity: dict
    step: int
    rng: np.random.Generator


@dataclass
class Checkpoint:
    params: dict  # name -> Tensor
    velocity: dict
    step: int
    seed: int
    rng_state: dict
    manifest: dict = field(default_factory=dict)


def _blob_name(name: str) -> str:
    return f"{name}.tensor"


def save_checkpoint(path, state: TrainState, seed: int, configs: Optional[dict] = None) -> Path:
    """Write a checkpoint directory atomically (build in a sibling temp dir, then swap)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        for sub, tensors in (("params", state.params), ("velocity", state.velocity)):
            (tmp / sub).mkdir()
            for name in sorted(tensors):
                (tmp / sub / _blob_name(name)).write_bytes(dumps(Tensor(tensors[name])))
        manifest = {
            "step": state.step,
            "seed": seed,
            "rng_state": state.rng.bit_generator.state,
            "params": sorted(state.params),
            "config": configs or {},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        old = None
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"{path}: not a checkpoint (manifest.json missing)")
    manifest = json.loads(manifest_file.read_text())
    params, velocity = {}, {}
    for name in manifest["params"]:
        params[name] = loads((path / "params" / _blob_name(name)).read_bytes())
        vfile = path / "velocity" / _blob_name(name)
        velocity[name] = loads(vfile.read_bytes()) if vfile.exists() else Tensor(np.zeros(params[name].shape))
    return Checkpoint(params, velocity, manifest["step"], manifest["seed"], manifest["rng_state"], manifest)


def load_params(path) -> dict:
    return load_checkpoint(path).params


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingDiverged(ArithmeticError):
    """Raised on a non-finite loss or gradient; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, step: int, checkpoint: Optional[Path]):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    params: dict  # name -> Tensor
    log: list  # dicts with LOG_COLUMNS
    steps: int
    checkpoint: Optional[Path] = None


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def log_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    lines += [",".join(_fmt(r[c]) for c in LOG_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def _configs_dict(cfg, model_cfg, loss_cfg, sampler_cfg, radius) -> dict:
    return {
        "train": dataclasses.asdict(cfg),
        "model": dataclasses.asdict(model_cfg),
        "losses": dataclasses.asdict(loss_cfg),
        "sampler": dataclasses.asdict(sampler_cfg),
        "radius": radius,
    }


def train(
    dataset: Sequence[VideoSequence],
    cfg: Optional[TrainConfig] = None,
    model_cfg: Optional[HeadConfig] = None,
    loss_cfg: Optional[LossConfig] = None,
    sampler_cfg: Optional[SamplerConfig] = None,
    radius: float = 2.0,
    out_dir=None,
    resume=None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Train from scratch (or from ``resume``) and return the final parameters.

    With ``out_dir`` the final checkpoint goes to ``out_dir/checkpoint`` and the
    loss log to ``out_dir/train_log.csv``.  ``max_steps`` stops early (the
    schedule still spans the full configured run), which is how a run is split
    across a resume.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or HeadConfig()
    loss_cfg = loss_cfg or LossConfig()
    sampler_cfg = sampler_cfg or SamplerConfig(exemplar_size=model_cfg.exemplar_size, search_size=model_cfg.search_size)
    if sampler_cfg.exemplar_size != model_cfg.exemplar_size or sampler_cfg.search_size != model_cfg.search_size:
        raise ValueError("sampler and model crop sizes disagree")
    if not dataset:
        raise ValueError("dataset is empty")
    configs = _configs_dict(cfg, model_cfg, loss_cfg, sampler_cfg, radius)

    rows: list = []
    if resume is not None:
        ck = load_checkpoint(resume)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        state = TrainState(
            {k: t.data.copy() for k, t in ck.params.items()},
            {k: t.data.copy() for k, t in ck.velocity.items()},
            ck.step,
            rng,
        )
        prev_log = Path(resume).parent / "train_log.csv"
        if out_dir is not None and prev_log.exists():
            rows = _read_log(prev_log, upto=ck.step)
    else:
        params = init_params(model_cfg, cfg.seed)
        state = TrainState(
            {k: t.data.copy() for k, t in params.items()},
            {k: np.zeros(t.shape, dtype=t.data.dtype) for k, t in params.items()},
            0,
            np.random.default_rng(cfg.seed),
        )

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint" if out is not None else None
    backbone = {k for k in state.params if k.startswith("backbone.")}
    stop = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)

    while state.step < stop:
        step = state.step
        lr = lr_at(step, cfg.steps_per_epoch, cfg)
        frozen = step < cfg.freeze_steps
        trainable = [k for k in state.params if not (frozen and k in backbone)]
        rates = {k: lr * (cfg.backbone_lr_mult if k in backbone else 1.0) for k in trainable}
        rng_before = state.rng.bit_generator.state
        try:
            batch = make_batch(dataset, state.rng, cfg.batch_size, model_cfg, sampler_cfg, radius)
            bundle, grads = loss_and_grads(state.params, batch, model_cfg, loss_cfg, step, trainable)
            total = bundle.total.item()
            if not math.isfinite(total):
                raise NonFiniteError(f"loss is {total}")
            new_p, new_v = sgd_step(state.params, grads, state.velocity, rates, cfg.momentum)
        except NonFiniteError as exc:
            state.rng.bit_generator.state = rng_before
            saved = None
            if ckpt_path is not None:
                saved = save_checkpoint(ckpt_path, state, cfg.seed, configs)
                atomic_write_text(out / "train_log.csv", log_csv(rows))
            raise TrainingDiverged(f"training diverged at step {step}: {exc}", step, saved) from exc
        state = TrainState(new_p, new_v, step + 1, state.rng)
        vals = bundle.values()
        rows.append({"step": step, "lr": lr, **{k: vals[k] for k in ("l_cls", "l_reg", "l_loc", "total")}})
        if step % 50 == 0:
            log.info("step %d lr %.3g total %.4f", step, lr, vals["total"])
        if ckpt_path is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_path, state, cfg.seed, configs)
            atomic_write_text(out / "train_log.csv", log_csv(rows))

    if ckpt_path is not None:
        save_checkpoint(ckpt_path, state, cfg.seed, configs)
        atomic_write_text(out / "train_log.csv", log_csv(rows))
    params = {k: Tensor(v) for k, v in state.params.items()}
    return TrainResult(params, rows, state.step, ckpt_path)


def _read_log(path, upto: int) -> list:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            if int(r["step"]) >= upto:
                break
            out.append({"step": int(r["step"]), **{k: float(r[k]) for k in LOG_COLUMNS[1:]}})
    return out


# ---------------------------------------------------------------------------
# overfit smoke test
# ---------------------------------------------------------------------------

OVERFIT_SAMPLER = dict(max_shift=0.0, resize_range=(1.0, 1.0))  # no augmentation


@dataclass
class OverfitResult:
    totals: np.ndarray  # total loss per step
    first: float  # mean of the first ``window`` steps
    last: float  # mean of the last ``window`` steps

    @property
    def reduction(self) -> float:
        return 1.0 - self.last / self.first


def overfit(
    sequence: VideoSequence,
    steps: int = 200,
    seed: int = 0,
    loss_cfg: Optional[LossConfig] = None,
    model_cfg: Optional[HeadConfig] = None,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 8,
    radius: float = 2.0,
    window: int = 10,
) -> OverfitResult:
    """Fit all parameters to pairs drawn from one sequence without augmentation at a constant rate.

    Returns the per-step total loss and the means of its first and last
    ``window`` steps.
    """
    model_cfg = model_cfg or HeadConfig()
    loss_cfg = loss_cfg or LossConfig()
    if steps < 2 * window:
        raise ValueError(f"need at least {2 * window} steps, got {steps}")
    sampler_cfg = SamplerConfig(exemplar_size=model_cfg.exemplar_size, search_size=model_cfg.search_size, **OVERFIT_SAMPLER)
    rng = np.random.default_rng(seed)
    params = {k: t.data.copy() for k, t in init_params(model_cfg, seed).items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    totals = np.empty(steps)
    for step in range(steps):
        batch = make_batch([sequence], rng, batch_size, model_cfg, sampler_cfg, radius)
        bundle, grads = loss_and_grads(params, batch, model_cfg, loss_cfg, step)
        totals[step] = bundle.total.item()
        params, velocity = sgd_step(params, grads, velocity, lr, momentum)
    return OverfitResult(totals, float(totals[:window].mean()), float(totals[-window:].mean()))
