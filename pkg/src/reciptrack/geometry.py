"""Boxes, grid-to-image mapping, box encoding/decoding, IoU and centerness.

Coordinates are continuous image pixels, x to the right and y downward.
A box is stored as corners ``(x0, y0, x1, y1)``; a regression target as
``(w, h, dx, dy)`` where ``(dx, dy)`` is the offset from a grid location to
the box center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .diffmath import ContractError, Tensor, ops


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite: {vals}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"box corners out of order: {vals}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @classmethod
    def from_array(cls, a) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in a)
        return cls(x0, y0, x1, y1)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


@dataclass(frozen=True)
class RegTarget:
    w: float
    h: float
    dx: float
    dy: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ContractError(f"regression target needs w, h >= 0, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.h, self.dx, self.dy], dtype=np.float64)


@dataclass(frozen=True)
class GridSpec:
    """Feature grid of ``height x width`` cells at total stride ``stride``.

    ``origin`` is the image coordinate of cell ``(0, 0)``.  It defaults to
    ``stride // 2``, the center of the first stride-sized block, which is
    right for a feature map that spans the whole image.  A correlation map
    produced by sliding a ``k``-cell template is shifted by half a template,
    see :func:`correlation_grid`.
    """

    stride: int
    height: int
    width: int
    origin: Optional[float] = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid extents must be >= 1, got {self.height}x{self.width}")

    @property
    def offset(self) -> float:
        return float(self.stride // 2) if self.origin is None else float(self.origin)

    def locations(self) -> tuple[np.ndarray, np.ndarray]:
        """Image coordinates of every cell as two ``(height, width)`` arrays."""
        xs = self.offset + np.arange(self.width, dtype=np.float64) * self.stride
        ys = self.offset + np.arange(self.height, dtype=np.float64) * self.stride
        return np.meshgrid(xs, ys)

    def footprint(self) -> Box:
        """Image region covered by the cells' stride-sized blocks."""
        half = self.stride / 2
        return Box(
            self.offset - half,
            self.offset - half,
            self.offset + (self.width - 1) * self.stride + half,
            self.offset + (self.height - 1) * self.stride + half,
        )


def correlation_grid(stride: int, search_cells: int, template_cells: int) -> GridSpec:
    """Grid of a valid cross-correlation between two feature maps.

    Output cell ``u`` aligns the template's cells ``u .. u+k-1`` with the
    search map, so its image location is the center of that window.
    """
    n = search_cells - template_cells + 1
    if n < 1:
        raise ValueError(f"template ({template_cells}) larger than search ({search_cells})")
    origin = stride // 2 + (template_cells - 1) * stride / 2
    return GridSpec(stride=stride, height=n, width=n, origin=origin)


def grid_to_image(grid: GridSpec, x: int, y: int) -> tuple[float, float]:
    if not (0 <= x < grid.width and 0 <= y < grid.height):
        raise IndexError(f"grid cell ({x}, {y}) outside {grid.width}x{grid.height} grid")
    return (grid.offset + x * grid.stride, grid.offset + y * grid.stride)


def encode(gt: Box, loc: tuple[float, float]) -> RegTarget:
    ix, iy = loc
    return RegTarget(
        w=gt.x1 - gt.x0,
        h=gt.y1 - gt.y0,
        dx=(gt.x0 + gt.x1) / 2 - ix,
        dy=(gt.y0 + gt.y1) / 2 - iy,
    )


def decode(t: RegTarget, loc: tuple[float, float]) -> Box:
    if t.w < 0 or t.h < 0:
        raise ContractError(f"decode needs w, h >= 0, got w={t.w}, h={t.h}")
    ix, iy = loc
    cx, cy = ix + t.dx, iy + t.dy
    return Box(cx - t.w / 2, cy - t.h / 2, cx + t.w / 2, cy + t.h / 2)


def encode_array(gt: np.ndarray, loc_x: np.ndarray, loc_y: np.ndarray) -> np.ndarray:
    """Vectorized encode; ``gt`` has trailing axis 4, result has leading axis 4."""
    gt = np.asarray(gt, dtype=np.float64)
    x0, y0, x1, y1 = (gt[..., i] for i in range(4))
    parts = np.broadcast_arrays(x1 - x0, y1 - y0, (x0 + x1) / 2 - loc_x, (y0 + y1) / 2 - loc_y)
    return np.stack(parts)


def decode_array(t: np.ndarray, loc_x: np.ndarray, loc_y: np.ndarray) -> np.ndarray:
    """Vectorized decode; ``t`` has leading axis 4, result has trailing axis 4."""
    w, h, dx, dy = (np.asarray(v, dtype=np.float64) for v in t)
    cx, cy = loc_x + dx, loc_y + dy
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner boxes along the trailing axis, with numpy broadcasting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


TargetLike = Union[Tensor, np.ndarray]


def iou_diff(t_pred: Tensor, gt, loc_x, loc_y) -> Tensor:
    """Tape-recorded IoU between predicted targets and ground-truth boxes.

    ``t_pred`` has a leading axis of 4 components ``(w, h, dx, dy)`` followed
    by any cell shape ``S``.  ``gt`` is a :class:`Box` or an array of corner
    boxes of shape ``S + (4,)``; ``loc_x``/``loc_y`` hold the image location
    of each cell (scalars or arrays of shape ``S``).
    """
    if t_pred.shape[0] != 4:
        raise ValueError(f"t_pred must have a leading axis of 4, got {t_pred.shape}")
    cell_shape = t_pred.shape[1:]
    w, h, dx, dy = (t_pred[i] for i in range(4))
    if np.any(w.data <= 0) or np.any(h.data <= 0):
        raise ContractError("iou_diff needs strictly positive predicted width and height")
    g = gt.as_array() if isinstance(gt, Box) else np.asarray(gt, dtype=np.float64)
    g = np.broadcast_to(g, cell_shape + (4,))
    lx = np.broadcast_to(np.asarray(loc_x, dtype=np.float64), cell_shape)
    ly = np.broadcast_to(np.asarray(loc_y, dtype=np.float64), cell_shape)

    def const(v):
        return Tensor(v)

    cx = ops.add(dx, const(lx))
    cy = ops.add(dy, const(ly))
    half_w = ops.mul(w, 0.5)
    half_h = ops.mul(h, 0.5)
    px0, px1 = ops.sub(cx, half_w), ops.add(cx, half_w)
    py0, py1 = ops.sub(cy, half_h), ops.add(cy, half_h)
    gx0, gy0, gx1, gy1 = (const(g[..., i]) for i in range(4))
    iw = ops.relu(ops.sub(ops.minimum(px1, gx1), ops.maximum(px0, gx0)))
    ih = ops.relu(ops.sub(ops.minimum(py1, gy1), ops.maximum(py0, gy0)))
    inter = ops.mul(iw, ih)
    g_area = const((g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1]))
    union = ops.sub(ops.add(ops.mul(w, h), g_area), inter)
    return ops.div(inter, union)


def side_distances(t: RegTarget) -> tuple[float, float, float, float]:
    """Distances from the location to the left, right, top and bottom sides."""
    return (t.w / 2 - t.dx, t.w / 2 + t.dx, t.h / 2 - t.dy, t.h / 2 + t.dy)


def centerness(t: RegTarget) -> float:
    left, right, top, bottom = side_distances(t)
    if min(left, right, top, bottom) < 0:
        raise ContractError(f"centerness: location lies outside the box (sides {left, right, top, bottom})")
    rx = 0.0 if max(left, right) == 0 else min(left, right) / max(left, right)
    ry = 0.0 if max(top, bottom) == 0 else min(top, bottom) / max(top, bottom)
    return math.sqrt(rx * ry)


def centerness_array(t: np.ndarray) -> np.ndarray:
    """Centerness for an array of targets (leading axis 4); 0 outside the box."""
    w, h, dx, dy = (np.asarray(v, dtype=np.float64) for v in t)
    left, right, top, bottom = w / 2 - dx, w / 2 + dx, h / 2 - dy, h / 2 + dy
    inside = (left >= 0) & (right >= 0) & (top >= 0) & (bottom >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = np.maximum(left, right)
        my = np.maximum(top, bottom)
        rx = np.where(mx > 0, np.minimum(left, right) / np.where(mx > 0, mx, 1), 0.0)
        ry = np.where(my > 0, np.minimum(top, bottom) / np.where(my > 0, my, 1), 0.0)
    return np.where(inside, np.sqrt(np.clip(rx * ry, 0, None)), 0.0)
