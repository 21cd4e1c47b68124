"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, no_tape


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    analytic: list = field(default_factory=list, repr=False)
    numeric: list = field(default_factory=list, repr=False)


def numeric_grad(f: Callable[..., Tensor], points: list[np.ndarray], eps: float) -> list[np.ndarray]:
    out = []
    with no_tape():
        for k, base in enumerate(points):
            g = np.zeros(base.shape, dtype=np.float64)
            flat = base.reshape(-1)
            for i in range(flat.size):
                plus = flat.copy()
                minus = flat.copy()
                plus[i] += eps
                minus[i] -= eps
                args_p = [Tensor(p) for p in points]
                args_m = [Tensor(p) for p in points]
                args_p[k] = Tensor(plus.reshape(base.shape))
                args_m[k] = Tensor(minus.reshape(base.shape))
                fp = f(*args_p).item()
                fm = f(*args_m).item()
                g.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
            out.append(g)
    return out


def analytic_grad(f: Callable[..., Tensor], points: list[np.ndarray]) -> list[np.ndarray]:
    args = [Tensor(p, requires_grad=True) for p in points]
    with Tape() as tape:
        y = f(*args)
    tape.backward(y)
    return [np.asarray(a.grad, dtype=np.float64) for a in args]


def gradcheck(f: Callable[..., Tensor], *points, eps: float = 1e-5, tol: float = 1e-6) -> GradcheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``points`` are the arguments of ``f`` (Tensors or arrays); every one of
    them is differentiated.  The relative error of each component uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in points]
    ana = analytic_grad(f, arrays)
    num = numeric_grad(f, arrays, eps)
    worst = 0.0
    for a, n in zip(ana, num):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return GradcheckReport(max_rel_err=worst, passed=bool(worst < tol), analytic=ana, numeric=num)
