"""Radius-rule labeling of grid locations and training-pair sampling."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import cv2
import numpy as np

from .geometry import Box, GridSpec, encode_array

# Translation range of the augmentation at a 255-pixel search crop.
REFERENCE_SEARCH_SIZE = 255
REFERENCE_MAX_SHIFT = 64.0


@dataclass
class LabelMap:
    cls_label: np.ndarray  # (H, W) in {0, 1}
    reg_target: np.ndarray  # (4, H, W); zero where cls_label == 0
    pos_mask: np.ndarray  # (H, W) bool
    n_pos: int
    gt_outside: bool = False

    @property
    def normalizer(self) -> int:
        """Positive count clamped to 1 for loss normalization."""
        return max(self.n_pos, 1)


def positive_mask(gt: Box, grid: GridSpec, r: float) -> np.ndarray:
    lx, ly = grid.locations()
    cx, cy = gt.center
    radius = r * grid.stride
    return (lx - cx) ** 2 + (ly - cy) ** 2 <= radius * radius


def assign(gt: Box, grid: GridSpec, r: float) -> LabelMap:
    """Label every cell within Euclidean distance ``r * stride`` of the box center.

    A box whose center falls outside the grid footprint gets no positives and
    is flagged ``gt_outside``.
    """
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    shape = (grid.height, grid.width)
    cx, cy = gt.center
    fp = grid.footprint()
    outside = not (fp.x0 <= cx < fp.x1 and fp.y0 <= cy < fp.y1)
    if outside:
        mask = np.zeros(shape, dtype=bool)
    else:
        mask = positive_mask(gt, grid, r)
    lx, ly = grid.locations()
    targets = encode_array(gt.as_array(), lx, ly) * mask
    return LabelMap(
        cls_label=mask.astype(np.int8),
        reg_target=targets,
        pos_mask=mask,
        n_pos=int(mask.sum()),
        gt_outside=outside,
    )


def negative_labels(grid: GridSpec) -> LabelMap:
    shape = (grid.height, grid.width)
    return LabelMap(
        cls_label=np.zeros(shape, dtype=np.int8),
        reg_target=np.zeros((4,) + shape),
        pos_mask=np.zeros(shape, dtype=bool),
        n_pos=0,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class VideoSequence:
    """Frames ``(T, H, W, 3)`` uint8 with per-frame corner boxes ``(T, 4)``."""

    name: str
    frames: np.ndarray
    gt: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SamplerConfig:
    exemplar_size: int = 32
    search_size: int = 64
    context: float = 2.0
    pos_fraction: float = 0.75
    max_shift: Optional[float] = None  # None: 64 px scaled by search_size / 255
    resize_range: tuple = (1.0 / 3.0, 3.0)
    max_gap: int = 100

    @property
    def shift_limit(self) -> float:
        if self.max_shift is not None:
            return float(self.max_shift)
        return REFERENCE_MAX_SHIFT * self.search_size / REFERENCE_SEARCH_SIZE


@dataclass
class SamplePair:
    exemplar: np.ndarray
    search: np.ndarray
    gt: Optional[Box]
    is_positive_pair: bool
    translation: tuple = (0.0, 0.0)
    resize: float = 1.0

    def __post_init__(self):
        if self.is_positive_pair != (self.gt is not None):
            raise ValueError("positive pairs carry a gt box and negative pairs carry none")


def crop_window(frame: np.ndarray, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    """Square crop of ``side`` pixels centered at ``center``, resized to ``out_size``.

    Pixels outside the frame are filled with the frame's mean color.
    """
    scale = side / out_size
    cx, cy = center
    # dst pixel u has center u + 0.5; src pixel centers sit at integer indices.
    tx = cx - side / 2 + 0.5 * scale - 0.5
    ty = cy - side / 2 + 0.5 * scale - 0.5
    m = np.array([[scale, 0.0, tx], [0.0, scale, ty]], dtype=np.float64)
    fill = tuple(float(v) for v in cv2.mean(frame)[: frame.shape[-1]])
    return cv2.warpAffine(
        frame,
        m,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=fill,
    )


def box_to_crop(box: Box, center: tuple[float, float], side: float, out_size: int) -> Box:
    k = out_size / side
    ox, oy = center[0] - side / 2, center[1] - side / 2
    return Box((box.x0 - ox) * k, (box.y0 - oy) * k, (box.x1 - ox) * k, (box.y1 - oy) * k)


def box_from_crop(box: Box, center: tuple[float, float], side: float, out_size: int) -> Box:
    k = side / out_size
    ox, oy = center[0] - side / 2, center[1] - side / 2
    return Box(box.x0 * k + ox, box.y0 * k + oy, box.x1 * k + ox, box.y1 * k + oy)


def exemplar_side(box: Box, cfg: SamplerConfig) -> float:
    """Frame-pixel side of the exemplar crop, matching the search crop's scale."""
    return cfg.context * max(box.width, box.height) * cfg.exemplar_size / cfg.search_size


def search_side(box: Box, cfg: SamplerConfig) -> float:
    return cfg.context * max(box.width, box.height)


def augmented_search_geometry(
    box: Box, cfg: SamplerConfig, shift: tuple[float, float], resize: float
) -> tuple[tuple[float, float], float]:
    """Crop center and side that place ``box`` shifted by ``shift`` crop pixels and scaled by ``resize``."""
    side = search_side(box, cfg) / resize
    k = side / cfg.search_size
    cx, cy = box.center
    return (cx - shift[0] * k, cy - shift[1] * k), side


def draw_augmentation(rng: np.random.Generator, cfg: SamplerConfig) -> tuple[tuple[float, float], float]:
    magnitude = rng.uniform(0.0, cfg.shift_limit)
    angle = rng.uniform(0.0, 2 * math.pi)
    lo, hi = cfg.resize_range
    resize = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    return (magnitude * math.cos(angle), magnitude * math.sin(angle)), resize


def sample_pair(dataset: Sequence[VideoSequence], rng: np.random.Generator, cfg: Optional[SamplerConfig] = None) -> SamplePair:
    """Draw one exemplar/search pair.

    With probability ``pos_fraction`` both crops come from one sequence;
    otherwise the search crop comes from a different sequence (or, when the
    dataset holds a single sequence, from a background region of it).
    """
    cfg = cfg or SamplerConfig()
    if not dataset:
        raise ValueError("dataset is empty")
    multi = [i for i, s in enumerate(dataset) if len(s) >= 2]
    if not multi:
        raise ValueError("no sequence has two frames; cannot form a positive pair")

    positive = rng.random() < cfg.pos_fraction
    a = int(multi[rng.integers(len(multi))]) if positive else int(rng.integers(len(dataset)))
    seq_a = dataset[a]
    i = int(rng.integers(len(seq_a)))
    ex_box = Box.from_array(seq_a.gt[i])
    exemplar = crop_window(seq_a.frames[i], ex_box.center, exemplar_side(ex_box, cfg), cfg.exemplar_size)
    shift, resize = draw_augmentation(rng, cfg)

    if positive:
        lo = max(0, i - cfg.max_gap)
        hi = min(len(seq_a) - 1, i + cfg.max_gap)
        j = int(rng.integers(lo, hi)) if hi > lo else i
        if j >= i:
            j = min(j + 1, hi)
        box = Box.from_array(seq_a.gt[j])
        center, side = augmented_search_geometry(box, cfg, shift, resize)
        search = crop_window(seq_a.frames[j], center, side, cfg.search_size)
        gt = box_to_crop(box, center, side, cfg.search_size)
        return SamplePair(exemplar, search, gt, True, shift, resize)

    if len(dataset) > 1:
        b = int(rng.integers(len(dataset) - 1))
        b = b + 1 if b >= a else b
        seq_b = dataset[b]
        j = int(rng.integers(len(seq_b)))
        box = Box.from_array(seq_b.gt[j])
        center, side = augmented_search_geometry(box, cfg, shift, resize)
        search = crop_window(seq_b.frames[j], center, side, cfg.search_size)
    else:
        # Single sequence: look one crop-width away from the target.
        j = int(rng.integers(len(seq_a)))
        box = Box.from_array(seq_a.gt[j])
        side = search_side(box, cfg) / resize
        angle = rng.uniform(0.0, 2 * math.pi)
        dist = side + max(box.width, box.height)
        center = (box.center[0] + dist * math.cos(angle), box.center[1] + dist * math.sin(angle))
        search = crop_window(seq_a.frames[j], center, side, cfg.search_size)
    return SamplePair(exemplar, search, None, False, shift, resize)


# ---------------------------------------------------------------------------
# radius sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("r", "R", "AO", "SR@0.5", "SR@0.75")


@dataclass
class SweepRow:
    r: float
    R: float
    ao: float
    sr50: float
    sr75: float
    failed: bool = False
    error: str = ""


def radius_sweep(
    r_values: Sequence[float],
    benchmark=None,
    stride: int = 8,
    run: Optional[Callable[[float], tuple[float, float, float]]] = None,
    **run_kwargs,
) -> list[SweepRow]:
    """One row ``(r, R, AO, SR@0.5, SR@0.75)`` per radius.

    ``run(r)`` must train and evaluate a configuration and return
    ``(ao, sr50, sr75)``; by default the full train/track/eval pipeline runs
    on ``benchmark``.
    """
    if run is None:
        from .pipeline import radius_run

        def run(r):
            return radius_run(r, benchmark, **run_kwargs)

    rows = []
    for r in r_values:
        try:
            ao, sr50, sr75 = run(r)
            rows.append(SweepRow(r, r * stride, ao, sr50, sr75))
        except (ArithmeticError, ValueError) as exc:  # diverged / invalid run
            rows.append(SweepRow(r, r * stride, math.nan, math.nan, math.nan, failed=True, error=str(exc)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([repr(float(row.r)), repr(float(row.R)), repr(row.ao), repr(row.sr50), repr(row.sr75)])
    return buf.getvalue()
