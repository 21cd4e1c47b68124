"""Siamese network: conv backbone, depth-wise correlation and a three-branch head.

Parameters are a flat ``dict`` name -> :class:`Tensor`.  The same backbone
entries serve the exemplar and the search path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diffmath import DimensionError, Tensor, ops
from .geometry import GridSpec, correlation_grid

Params = dict  # name -> Tensor

PRIOR_PROB = 0.01
HEAD_INIT_GAIN = 0.01


@dataclass
class HeadConfig:
    backbone_channels: list = field(default_factory=lambda: [16, 32, 32])
    total_stride: int = 8
    tower_depth: int = 2
    tower_channels: Optional[int] = None  # None: last backbone width
    exemplar_size: int = 32
    search_size: int = 64
    separate_xcorr: bool = False  # one correlation map per branch via per-branch 1x1 adjust convs
    corr_norm: bool = True  # zero-mean / unit-variance correlation maps per channel
    tower_norm: bool = True  # same normalization after every tower conv

    def __post_init__(self):
        s = self.total_stride
        if s < 1 or s & (s - 1):
            raise ValueError(f"total_stride must be a power of two, got {s}")
        if s > 2 ** len(self.backbone_channels):
            raise ValueError(f"{len(self.backbone_channels)} backbone blocks cannot reach stride {s}")
        if self.search_size <= self.exemplar_size:
            raise ValueError("search_size must exceed exemplar_size")
        if self.exemplar_size % s or self.search_size % s:
            raise ValueError(f"crop sizes must be divisible by the stride {s}")
        if self.score_size < 1:
            raise ValueError("derived score grid is empty")

    @property
    def channels(self) -> int:
        return self.tower_channels or self.backbone_channels[-1]

    @property
    def block_strides(self) -> list[int]:
        n_down = int(math.log2(self.total_stride))
        return [2 if i < n_down else 1 for i in range(len(self.backbone_channels))]

    @property
    def exemplar_cells(self) -> int:
        return self.exemplar_size // self.total_stride

    @property
    def search_cells(self) -> int:
        return self.search_size // self.total_stride

    @property
    def score_size(self) -> int:
        return self.search_cells - self.exemplar_cells + 1

    def grid(self) -> GridSpec:
        return correlation_grid(self.total_stride, self.search_cells, self.exemplar_cells)


@dataclass
class HeadOutput:
    p_cls: Tensor  # (N, H, W)
    t_reg: Tensor  # (N, 4, H, W): w, h, dx, dy in crop pixels
    p_loc: Tensor  # (N, H, W)


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: HeadConfig, rng_seed: int) -> Params:
    """Fan-in scaled uniform kernels; the cls bias encodes a 1% foreground prior."""
    rng = np.random.default_rng(rng_seed)
    params: Params = {}

    def conv(name, c_out, c_in, k=3, gain=1.0, bias=0.0):
        fan_in = c_in * k * k
        params[f"{name}.weight"] = Tensor(_uniform(rng, (c_out, c_in, k, k), gain * math.sqrt(6.0 / fan_in)), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.full(c_out, bias), requires_grad=True)

    c_in = 3
    for i, c in enumerate(config.backbone_channels):
        conv(f"backbone.{i}", c, c_in)
        c_in = c
    c = config.channels
    if config.separate_xcorr:
        for branch in ("cls", "reg"):
            conv(f"adjust_{branch}", c, c_in, k=1)
    elif c_in != c:
        conv("adjust", c, c_in, k=1)
    for branch in ("cls", "reg"):
        for i in range(config.tower_depth):
            conv(f"{branch}_tower.{i}", c, c)
    prior_bias = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    conv("cls_head", 1, c, gain=HEAD_INIT_GAIN, bias=prior_bias)
    conv("reg_head", 4, c, gain=HEAD_INIT_GAIN)
    # Start w, h at the nominal target size in the search crop (exemplar side).
    size_cells = config.exemplar_size / config.total_stride
    size_bias = math.log(math.expm1(size_cells))
    params["reg_head.bias"] = Tensor(np.array([size_bias, size_bias, 0.0, 0.0]), requires_grad=True)
    conv("loc_head", 1, c, gain=HEAD_INIT_GAIN)
    return params


def backbone_names(params: Params) -> list[str]:
    return [k for k in params if k.startswith("backbone.")]


def count_params(params: Params) -> int:
    return int(sum(t.size for t in params.values()))


def head_output_channels(anchors: int = 1) -> int:
    """Regression channels per location: 4 per anchor (1 for anchor-free)."""
    return 4 * anchors


def _as_batch(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0 - 0.5
        # (H, W, 3) or (N, H, W, 3) pixel layout -> channel-first
        arr = np.moveaxis(arr, -1, -3)
    return Tensor(arr)


def extract_features(image, params: Params, config: HeadConfig) -> Tensor:
    """Backbone features, shape ``(C, H/s, W/s)`` or batched ``(N, C, H/s, W/s)``.

    ``image`` is a channel-first float Tensor or uint8 ``HWC`` pixels.
    """
    x = _as_batch(image)
    h, w = x.shape[-2:]
    if h % config.total_stride or w % config.total_stride:
        raise DimensionError(f"image extents {h}x{w} not divisible by stride {config.total_stride}")
    for i, stride in enumerate(config.block_strides):
        x = ops.relu(ops.conv2d(x, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"], stride=stride, pad=1))
    if "adjust.weight" in params:
        x = ops.conv2d(x, params["adjust.weight"], params["adjust.bias"])
    return x


def _xcorr(z: Tensor, x: Tensor, normalize: bool) -> Tensor:
    ht, wt = z.shape[-2:]
    corr = ops.mul(ops.depthwise_xcorr(x, z), 1.0 / (ht * wt))
    return ops.instance_norm(corr) if normalize else corr


def _tower(x: Tensor, params: Params, branch: str, depth: int, normalize: bool = False) -> Tensor:
    for i in range(depth):
        x = ops.conv2d(x, params[f"{branch}_tower.{i}.weight"], params[f"{branch}_tower.{i}.bias"], pad=1)
        if normalize:
            x = ops.instance_norm(x)
        x = ops.relu(x)
    return x


def forward_head(exemplar_feat: Tensor, search_feat: Tensor, params: Params, config: HeadConfig) -> HeadOutput:
    if exemplar_feat.shape[-2] > search_feat.shape[-2] or exemplar_feat.shape[-1] > search_feat.shape[-1]:
        raise DimensionError(
            f"exemplar features {exemplar_feat.shape[-2:]} larger than search features {search_feat.shape[-2:]}"
        )
    if config.separate_xcorr:
        corr = {}
        for b in ("cls", "reg"):
            w, bias = params[f"adjust_{b}.weight"], params[f"adjust_{b}.bias"]
            corr[b] = _xcorr(ops.conv2d(exemplar_feat, w, bias), ops.conv2d(search_feat, w, bias), config.corr_norm)
        cls_in, reg_in = corr["cls"], corr["reg"]
    else:
        cls_in = reg_in = _xcorr(exemplar_feat, search_feat, config.corr_norm)

    d = config.tower_depth
    cls_feat = _tower(cls_in, params, "cls", d, config.tower_norm)
    reg_feat = _tower(reg_in, params, "reg", d, config.tower_norm)

    cls_logit = ops.conv2d(cls_feat, params["cls_head.weight"], params["cls_head.bias"], pad=1)
    raw = ops.conv2d(reg_feat, params["reg_head.weight"], params["reg_head.bias"], pad=1)
    loc_logit = ops.conv2d(reg_feat, params["loc_head.weight"], params["loc_head.bias"], pad=1)

    return head_activations(cls_logit, raw, loc_logit, config.total_stride)


def head_activations(cls_logit: Tensor, raw: Tensor, loc_logit: Tensor, stride: float) -> HeadOutput:
    """Map the three head convolutions' outputs to probabilities and box parameters.

    Sizes go through softplus so they stay positive; sizes and offsets are in
    units of ``stride`` pixels.
    """
    batched = raw.ndim == 4
    s = float(stride)
    ch = 1 if batched else 0
    lead = (slice(None),) if batched else ()
    size = ops.mul(ops.softplus(ops.index(raw, lead + (slice(0, 2),))), s)
    offset = ops.mul(ops.index(raw, lead + (slice(2, 4),)), s)
    t_reg = ops.concat([size, offset], axis=ch)

    p_cls = ops.sigmoid(ops.index(cls_logit, lead + (0,)))
    p_loc = ops.sigmoid(ops.index(loc_logit, lead + (0,)))
    return HeadOutput(p_cls=p_cls, t_reg=t_reg, p_loc=p_loc)


def forward(exemplar, search, params: Params, config: HeadConfig) -> HeadOutput:
    z = extract_features(exemplar, params, config)
    x = extract_features(search, params, config)
    return forward_head(z, x, params, config)
