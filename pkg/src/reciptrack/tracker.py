"""Offline tracking: fixed exemplar, per-frame search crop, fused score,
cosine-window penalty, argmax selection and smoothed box size."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assignment import SamplerConfig, box_from_crop, crop_window, exemplar_side
from .diffmath import Tensor, no_tape
from .geometry import Box, GridSpec
from .model import HeadConfig, extract_features, forward_head

RESULT_COLUMNS = ("frame", "x0", "y0", "x1", "y1", "score")
MIN_SIDE = 1.0


@dataclass
class TrackerConfig:
    window_weight: float = 0.4  # w_c
    scale_lr: float = 0.3  # beta
    use_loc: bool = True  # rank by p_cls * p_loc instead of p_cls
    window_order: str = "after"  # apply the window "after" or "before" score fusion
    context: float = 2.0
    score_floor: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.window_weight <= 1.0:
            raise ValueError(f"window_weight must lie in [0, 1], got {self.window_weight}")
        if not 0.0 <= self.scale_lr <= 1.0:
            raise ValueError(f"scale_lr must lie in [0, 1], got {self.scale_lr}")
        if self.window_order not in ("after", "before"):
            raise ValueError(f"window_order must be 'after' or 'before', got {self.window_order!r}")
        if self.context <= 0:
            raise ValueError("context must be positive")


@dataclass
class TrackerState:
    exemplar_feat: Tensor
    prev_box: Box
    smoothed_size: tuple
    window: np.ndarray
    cfg: TrackerConfig
    model_cfg: HeadConfig
    params: dict
    frame_size: tuple  # (W, H)
    lost: bool = False


def hann_window(n: int) -> np.ndarray:
    """Outer product of two length-``n`` Hann windows, peak 1, endpoints 0."""
    if n == 1:
        return np.ones((1, 1))
    h = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / (n - 1))
    return np.outer(h, h)


def fuse_scores(p_cls, p_loc) -> np.ndarray:
    p_cls = np.asarray(p_cls, dtype=np.float64)
    p_loc = np.asarray(p_loc, dtype=np.float64)
    if p_cls.shape != p_loc.shape:
        raise ValueError(f"score shapes differ: {p_cls.shape} vs {p_loc.shape}")
    return p_cls * p_loc


def apply_window(score, window, w_c: float) -> np.ndarray:
    score = np.asarray(score, dtype=np.float64)
    if score.shape != np.shape(window):
        raise ValueError(f"window shape {np.shape(window)} != score shape {score.shape}")
    if not 0.0 <= w_c <= 1.0:
        raise ValueError(f"w_c must lie in [0, 1], got {w_c}")
    return score * ((1.0 - w_c) + w_c * np.asarray(window))


def _sampler(model_cfg: HeadConfig, context: float) -> SamplerConfig:
    return SamplerConfig(exemplar_size=model_cfg.exemplar_size, search_size=model_cfg.search_size, context=context)


def init(frame: np.ndarray, gt: Box, params: dict, cfg: Optional[TrackerConfig] = None, model_cfg=None) -> TrackerState:
    cfg = cfg or TrackerConfig()
    model_cfg = model_cfg or HeadConfig()
    h, w = frame.shape[:2]
    if not (gt.width > 0 and gt.height > 0):
        raise ValueError(f"degenerate init box {gt}")
    if gt.x1 <= 0 or gt.y1 <= 0 or gt.x0 >= w or gt.y0 >= h:
        raise ValueError(f"init box {gt} lies outside the {w}x{h} frame")
    side = exemplar_side(gt, _sampler(model_cfg, cfg.context))
    crop = crop_window(frame, gt.center, side, model_cfg.exemplar_size)
    with no_tape():
        feat = extract_features(crop, params, model_cfg)
    return TrackerState(
        exemplar_feat=feat,
        prev_box=gt,
        smoothed_size=(gt.width, gt.height),
        window=hann_window(model_cfg.score_size),
        cfg=cfg,
        model_cfg=model_cfg,
        params=params,
        frame_size=(w, h),
    )


def search_region(state: TrackerState) -> tuple[tuple[float, float], float]:
    """Search crop center and side: ``context`` x the larger box side, clamped to the frame."""
    side = state.cfg.context * max(state.smoothed_size)
    side = min(max(side, MIN_SIDE), float(max(state.frame_size)))
    return state.prev_box.center, side


@dataclass
class FrameOutput:
    box: Box
    score: float
    lost: bool
    p_cls: np.ndarray
    p_loc: np.ndarray
    t_reg: np.ndarray
    winner: tuple  # (row, col)
    crop_center: tuple
    crop_side: float


def score_map(p_cls: np.ndarray, p_loc: np.ndarray, state: TrackerState) -> tuple[np.ndarray, np.ndarray]:
    """(raw ranking score, window-penalized score) for one frame."""
    cfg = state.cfg
    loc = p_loc if cfg.use_loc else np.ones_like(p_loc)
    raw = fuse_scores(p_cls, loc)
    if cfg.window_order == "before":
        penalized = fuse_scores(apply_window(p_cls, state.window, cfg.window_weight), loc)
    else:
        penalized = apply_window(raw, state.window, cfg.window_weight)
    return raw, penalized


def track_frame(state: TrackerState, frame: np.ndarray, params: Optional[dict] = None) -> tuple[Box, float, TrackerState, FrameOutput]:
    params = params if params is not None else state.params
    mcfg = state.model_cfg
    center, side = search_region(state)
    crop = crop_window(frame, center, side, mcfg.search_size)
    with no_tape():
        x = extract_features(crop, params, mcfg)
        out = forward_head(state.exemplar_feat, x, params, mcfg)
    return select(state, out.p_cls.data, out.p_loc.data, out.t_reg.data, center, side)


def select(state: TrackerState, p_cls, p_loc, t_reg, center, side) -> tuple[Box, float, TrackerState, FrameOutput]:
    """Pick the winning cell of one head output and update the state."""
    mcfg = state.model_cfg
    raw, penalized = score_map(p_cls, p_loc, state)
    r, c = (int(v) for v in np.unravel_index(int(np.argmax(penalized)), penalized.shape))
    score = float(raw[r, c])

    if not penalized[r, c] >= state.cfg.score_floor:
        fo = FrameOutput(state.prev_box, score, True, p_cls, p_loc, t_reg, (r, c), center, side)
        return state.prev_box, score, _replace(state, lost=True), fo

    grid: GridSpec = mcfg.grid()
    lx = grid.offset + c * grid.stride
    ly = grid.offset + r * grid.stride
    w, h, dx, dy = (float(v) for v in t_reg[:, r, c])
    pred = box_from_crop(Box.from_center(lx + dx, ly + dy, w, h), center, side, mcfg.search_size)
    beta = state.cfg.scale_lr
    sw = max((1 - beta) * state.smoothed_size[0] + beta * pred.width, MIN_SIDE)
    sh = max((1 - beta) * state.smoothed_size[1] + beta * pred.height, MIN_SIDE)
    W, H = state.frame_size
    cx = min(max(pred.center[0], 0.0), float(W))
    cy = min(max(pred.center[1], 0.0), float(H))
    box = Box.from_center(cx, cy, sw, sh)
    fo = FrameOutput(box, score, False, p_cls, p_loc, t_reg, (r, c), center, side)
    return box, score, _replace(state, prev_box=box, smoothed_size=(sw, sh), lost=False), fo


def _replace(state: TrackerState, **kw) -> TrackerState:
    fields = dict(state.__dict__)
    fields.update(kw)
    return TrackerState(**fields)


@dataclass
class TrackResult:
    boxes: np.ndarray  # (T, 4)
    scores: np.ndarray  # (T,)
    lost: list = field(default_factory=list)  # frame indices where the target was held

    def to_csv(self) -> str:
        return results_csv(self.boxes, self.scores)


def track_sequence(frames: Sequence[np.ndarray], init_box: Box, params: dict, cfg=None, model_cfg=None) -> TrackResult:
    state = init(frames[0], init_box, params, cfg, model_cfg)
    boxes = [init_box.as_array()]
    scores = [1.0]
    lost = []
    for t in range(1, len(frames)):
        box, score, state, fo = track_frame(state, frames[t])
        boxes.append(box.as_array())
        scores.append(score)
        if fo.lost:
            lost.append(t)
    return TrackResult(np.array(boxes), np.array(scores), lost)


def track_many(sequences, params: dict, cfg=None, model_cfg=None) -> list[TrackResult]:
    """Track several ``(frames, init_box)`` sequences in lockstep with one batched forward per step.

    Each sequence follows exactly the per-frame logic of :func:`track_frame`.
    """
    model_cfg = model_cfg or HeadConfig()
    states = [init(frames[0], box, params, cfg, model_cfg) for frames, box in sequences]
    boxes = [[box.as_array()] for _, box in sequences]
    scores = [[1.0] for _ in sequences]
    lost: list = [[] for _ in sequences]
    longest = max((len(f) for f, _ in sequences), default=0)
    for t in range(1, longest):
        active = [i for i, (frames, _) in enumerate(sequences) if t < len(frames)]
        regions = [search_region(states[i]) for i in active]
        crops = np.stack(
            [crop_window(sequences[i][0][t], c, s, model_cfg.search_size) for i, (c, s) in zip(active, regions)]
        )
        z = Tensor(np.stack([states[i].exemplar_feat.data for i in active]))
        with no_tape():
            out = forward_head(z, extract_features(crops, params, model_cfg), params, model_cfg)
        for k, i in enumerate(active):
            c, s = regions[k]
            box, score, states[i], fo = select(
                states[i], out.p_cls.data[k], out.p_loc.data[k], out.t_reg.data[k], c, s
            )
            boxes[i].append(box.as_array())
            scores[i].append(score)
            if fo.lost:
                lost[i].append(t)
    return [TrackResult(np.array(b), np.array(sc), lo) for b, sc, lo in zip(boxes, scores, lost)]


def results_csv(boxes: np.ndarray, scores: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for t, (b, s) in enumerate(zip(boxes, scores)):
        w.writerow([t] + [repr(float(v)) for v in b] + [repr(float(s))])
    return buf.getvalue()


def read_results(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(RESULT_COLUMNS) - set(rows[0].keys() if rows else RESULT_COLUMNS)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    boxes = np.array([[float(r[k]) for k in ("x0", "y0", "x1", "y1")] for r in rows]).reshape(-1, 4)
    scores = np.array([float(r["score"]) for r in rows])
    return boxes, scores
