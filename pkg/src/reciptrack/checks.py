"""Registry of gradient checks over every differentiable op, the head and the combined loss.

Each case builds, from a seeded generator, a scalar function and the points
at which it is differentiated.  Op cases use ``sum(w * op(...))`` with random
weights ``w`` so that every output element carries an O(1) gradient, and keep
inputs away from kinks (relu, clip, max/min ties) so that central differences
are valid.

The loss cases pin the stop-gradient weights (IoU and p_cls at positive cells)
to their values at the base point; otherwise the finite-difference route would
differentiate through quantities the analytic route treats as constants.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .assignment import assign, negative_labels
from .diffmath import Tensor, gradcheck, no_tape, ops
from .geometry import Box, GridSpec
from .losses import LossConfig, TargetBatch, detached_terms, head_loss
from .model import HeadConfig, extract_features, forward_head, head_activations, init_params

Case = Callable[[np.random.Generator], tuple]  # rng -> (f, points)

DEFAULT_SEEDS = 100
DEFAULT_TOL = 1e-4


def _away(rng, shape, gap=0.1):
    """Random values with magnitude at least ``gap`` (random sign)."""
    return rng.choice([-1.0, 1.0], size=shape) * (gap + np.abs(rng.normal(size=shape)))


def _weighted(fn, w):
    w = Tensor(w)
    return lambda *args: ops.reduce_sum(ops.mul(fn(*args), w))


def _unary(fn, sample=None):
    def case(rng):
        x = sample(rng) if sample else rng.normal(size=(3, 4))
        return _weighted(fn, _away(rng, x.shape, 0.5)), [x]

    return case


def _binary(fn, sample_b=None):
    def case(rng):
        a = rng.normal(size=(3, 4))
        b = sample_b(rng, a) if sample_b else rng.normal(size=(3, 4))
        return _weighted(fn, _away(rng, a.shape, 0.5)), [a, b]

    return case


def _case_div(rng):
    a, b = _away(rng, (3, 4), 0.5), _away(rng, (3, 4), 0.5)
    return _weighted(ops.div, _away(rng, a.shape, 0.5)), [a, b]


def _positive(rng):
    return 0.2 + rng.uniform(size=(3, 4)) * 3.0


def _case_max(rng):
    # distinct values so the argmax is stable under the perturbation
    x = rng.permutation(12).reshape(3, 4) * 0.1 + rng.uniform(0, 0.01, size=(3, 4))
    return (lambda a: ops.mul(ops.max_with_argmax(a)[0], 1.7)), [x]


def _case_clip(rng):
    x = _away(rng, (3, 4), 0.05) * 0.6
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x * 1.3, x)
    return _weighted(lambda a: ops.clip(a, -0.5, 0.5), _away(rng, x.shape, 0.5)), [x]


def _case_index(rng):
    key = (slice(None), np.array([0, 2, 2]), np.array([1, 0, 3]))
    w = rng.normal(size=(2, 3))
    return _weighted(lambda a: ops.index(a, key), w), [rng.normal(size=(2, 3, 4))]


def _case_reshape(rng):
    return _weighted(lambda a: ops.reshape(a, (4, 3)), rng.normal(size=(4, 3))), [rng.normal(size=(3, 4))]


def _case_stack(rng):
    w = rng.normal(size=(3, 2, 4))
    return _weighted(lambda a, b: ops.stack([a, b], axis=1), w), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]


def _case_concat(rng):
    w = rng.normal(size=(3, 6))
    return _weighted(lambda a, b: ops.concat([a, b], axis=1), w), [rng.normal(size=(3, 4)), rng.normal(size=(3, 2))]


def _case_reduce_sum(rng):
    w = rng.normal(size=(2, 4))
    return _weighted(lambda a: ops.reduce_sum(a, axis=1), w), [rng.normal(size=(2, 3, 4))]


def _case_reduce_mean(rng):
    w = rng.normal(size=(3,))
    return _weighted(lambda a: ops.reduce_mean(a, axis=(0, 2)), w), [rng.normal(size=(2, 3, 4))]


def _case_conv(stride, pad, batched):
    def case(rng):
        shape = (2, 2, 7, 6) if batched else (2, 7, 6)
        x = rng.normal(size=shape)
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        with no_tape():
            out_shape = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad).shape
        return _weighted(lambda xx, kk, bb: ops.conv2d(xx, kk, bb, stride=stride, pad=pad), _away(rng, out_shape, 0.5)), [x, k, b]

    return case


def _case_xcorr(batched):
    def case(rng):
        s_shape = (2, 3, 6, 5) if batched else (3, 6, 5)
        t_shape = (2, 3, 3, 2) if batched else (3, 3, 2)
        out_shape = s_shape[:-2] + (4, 4)
        return _weighted(ops.depthwise_xcorr, _away(rng, out_shape, 0.5)), [rng.normal(size=s_shape), rng.normal(size=t_shape)]

    return case


def _case_instance_norm(rng):
    x = rng.normal(size=(2, 3, 4, 4)) * 2.0 + 1.0
    return _weighted(ops.instance_norm, _away(rng, x.shape, 0.5)), [x]


# -- toy head -----------------------------------------------------------------

TOY_STRIDE = 8
TOY_GRID = GridSpec(stride=TOY_STRIDE, height=3, width=3)  # cells at 4, 12, 20 px
TOY_FEATURES = (2, 5, 5)  # (C, H, W); a 3x3 kernel without padding gives the 3x3 grid


def toy_batch(rng: np.random.Generator) -> tuple[np.ndarray, TargetBatch]:
    """Features for one positive and one negative pair and their labels on the toy grid."""
    feats = rng.normal(size=(2,) + TOY_FEATURES)
    # Box edges interleave with the predicted ones on both axes (neither box
    # contains the other along x or y), so no IoU term sits on a flat piece
    # where the analytic gradient is exactly zero and only rounding remains.
    cx, cy = 12.0 + rng.choice([-1.0, 1.0], size=2) * rng.uniform(2.5, 3.5, size=2)
    w, h = rng.uniform(15, 17, size=2)
    gt = Box.from_center(cx, cy, w, h)
    maps = [assign(gt, TOY_GRID, 1.0), negative_labels(TOY_GRID)]
    lx, ly = TOY_GRID.locations()
    return feats, TargetBatch.from_label_maps(maps, [gt, None], lx, ly)


def toy_head_params(rng: np.random.Generator) -> list[np.ndarray]:
    """(cls kernel, cls bias, reg kernel, reg bias, loc kernel, loc bias) of the toy head."""
    c = TOY_FEATURES[0]
    size_bias = math.log(math.expm1(2.0))  # boxes start near 2 cells = 16 px
    return [
        rng.normal(size=(1, c, 3, 3)) * 0.3,
        rng.normal(size=(1,)) * 0.5,
        rng.normal(size=(4, c, 3, 3)) * 0.01,
        np.array([size_bias, size_bias, 0.0, 0.0]) + rng.normal(size=4) * 0.05,
        rng.normal(size=(1, c, 3, 3)) * 0.3,
        rng.normal(size=(1,)) * 0.5,
    ]


def toy_head_output(feats: np.ndarray, cls_k, cls_b, reg_k, reg_b, loc_k, loc_b):
    x = Tensor(feats)
    return head_activations(
        ops.conv2d(x, cls_k, cls_b),
        ops.conv2d(x, reg_k, reg_b),
        ops.conv2d(x, loc_k, loc_b),
        TOY_STRIDE,
    )


def _case_loss(cfg: LossConfig, part: str = "total"):
    def case(rng):
        feats, targets = toy_batch(rng)
        points = toy_head_params(rng)
        with no_tape():
            base = toy_head_output(feats, *(Tensor(p) for p in points))
            pinned = detached_terms(base, targets)

        def f(*params):
            bundle = head_loss(toy_head_output(feats, *params), targets, cfg, detached=pinned)
            return getattr(bundle, part)

        return f, points

    return case


# -- small full model ----------------------------------------------------------

TINY_MODEL = HeadConfig(backbone_channels=[2, 2], total_stride=2, tower_depth=1, exemplar_size=4, search_size=8)


def _case_model(rng):
    """Weighted sum of the head outputs of a tiny full network w.r.t. its tower and head parameters.

    Tower biases are left out: the per-channel normalization after each tower
    conv removes them exactly, so their gradient is identically zero.  The
    output convs are redrawn at unit gain so upstream gradients are not tiny.
    """
    params = init_params(TINY_MODEL, int(rng.integers(2**31)))
    for branch in ("cls", "reg", "loc"):
        w = params[f"{branch}_head.weight"]
        params[f"{branch}_head.weight"] = Tensor(rng.normal(size=w.shape) * (0.1 if branch == "reg" else 0.5))
    z_img = rng.uniform(0, 255, size=(3, TINY_MODEL.exemplar_size, TINY_MODEL.exemplar_size))
    x_img = rng.uniform(0, 255, size=(3, TINY_MODEL.search_size, TINY_MODEL.search_size))
    names = sorted(k for k in params if not k.startswith("backbone.") and not ("_tower." in k and k.endswith(".bias")))
    with no_tape():
        z = extract_features(z_img, params, TINY_MODEL)
        x = extract_features(x_img, params, TINY_MODEL)
    n = TINY_MODEL.score_size
    w_cls, w_loc, w_reg = rng.normal(size=(n, n)), rng.normal(size=(n, n)), rng.normal(size=(4, n, n))

    def f(*values):
        p = dict(params)
        p.update(zip(names, values))
        out = forward_head(z, x, p, TINY_MODEL)
        terms = [
            ops.reduce_sum(ops.mul(out.p_cls, Tensor(w_cls))),
            ops.reduce_sum(ops.mul(out.p_loc, Tensor(w_loc))),
            ops.reduce_sum(ops.mul(out.t_reg, Tensor(w_reg * 0.05))),
        ]
        return ops.add(ops.add(terms[0], terms[1]), terms[2])

    return f, [params[k].data for k in names]


CASES: dict[str, Case] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _case_div,
    "neg": _unary(ops.neg),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, _positive),
    "sigmoid": _unary(ops.sigmoid),
    "softplus": _unary(ops.softplus),
    "relu": _unary(ops.relu, lambda rng: _away(rng, (3, 4))),
    "pow": _unary(lambda a: ops.pow(a, 1.7), _positive),
    "clip": _case_clip,
    "minimum": _binary(ops.minimum, lambda rng, a: a + _away(rng, a.shape)),
    "maximum": _binary(ops.maximum, lambda rng, a: a + _away(rng, a.shape)),
    "index": _case_index,
    "reshape": _case_reshape,
    "stack": _case_stack,
    "concat": _case_concat,
    "reduce_sum": _case_reduce_sum,
    "reduce_mean": _case_reduce_mean,
    "max_with_argmax": _case_max,
    "conv2d": _case_conv(1, 0, False),
    "conv2d.stride2_pad1": _case_conv(2, 1, True),
    "depthwise_xcorr": _case_xcorr(False),
    "depthwise_xcorr.batched": _case_xcorr(True),
    "instance_norm": _case_instance_norm,
    "head.forward": _case_model,
    "loss.cls": _case_loss(LossConfig(), "l_cls"),
    "loss.reg": _case_loss(LossConfig(), "l_reg"),
    "loss.loc": _case_loss(LossConfig(), "l_loc"),
    "loss.total": _case_loss(LossConfig()),
    "loss.total.unlinked": _case_loss(LossConfig(reciprocal=False, localization=False)),
    "loss.total.centerness": _case_loss(LossConfig(loc_target="centerness")),
}
DEFAULT_SEED_COUNTS = {"head.forward": 20}  # the rest run the full seed count

# Cases whose function is (piecewise) linear in every single coordinate: central
# differences carry no truncation error there, so a larger step only shrinks
# the rounding noise.  Inputs stay further than this step from any kink.
LINEAR_CASES = {
    "add", "sub", "mul", "neg", "relu", "clip", "minimum", "maximum", "index", "reshape", "stack",
    "concat", "reduce_sum", "reduce_mean", "max_with_argmax", "conv2d", "conv2d.stride2_pad1",
    "depthwise_xcorr", "depthwise_xcorr.batched",
}  # fmt: skip
LINEAR_EPS = 1e-3
DEFAULT_EPS = 1e-5
# Normalization mixes every pixel of a map, so single components can nearly
# cancel; a slightly larger step keeps their rounding noise down.
CASE_EPS = {"instance_norm": 1e-4}


def case_eps(name: str) -> float:
    return LINEAR_EPS if name in LINEAR_CASES else CASE_EPS.get(name, DEFAULT_EPS)


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_err: float
    tol: float
    passed: bool
    worst_seed: int = -1
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} seeds={self.seeds} ({self.seconds:.1f}s)"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": self.seeds,
            "max_rel_err": self.max_rel_err,
            "tol": self.tol,
            "passed": self.passed,
            "worst_seed": self.worst_seed,
        }


def run_case(name: str, seeds: int = DEFAULT_SEEDS, tol: float = DEFAULT_TOL, eps: Optional[float] = None, base_seed: int = 0) -> CheckResult:
    case = CASES[name]
    eps = case_eps(name) if eps is None else eps
    worst, worst_seed = 0.0, -1
    t0 = time.perf_counter()
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        f, points = case(rng)
        err = gradcheck(f, *points, eps=eps, tol=tol).max_rel_err
        if not err <= worst:
            worst, worst_seed = err, s
    passed = bool(worst < tol)
    return CheckResult(name, seeds, worst, tol, passed, worst_seed, time.perf_counter() - t0)


@dataclass
class CheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [r.to_dict() for r in self.results]}


def run_all(
    names: Optional[Sequence[str]] = None,
    seeds: Optional[int] = None,
    tol: float = DEFAULT_TOL,
    progress: Optional[Callable[[CheckResult], None]] = None,
) -> CheckReport:
    """Run the named cases (default: all); ``seeds`` overrides every case's seed count."""
    report = CheckReport()
    for name in names or list(CASES):
        if name not in CASES:
            raise KeyError(f"unknown gradcheck case {name!r}")
        n = seeds if seeds is not None else DEFAULT_SEED_COUNTS.get(name, DEFAULT_SEEDS)
        result = run_case(name, n, tol)
        report.results.append(result)
        if progress:
            progress(result)
    return report
