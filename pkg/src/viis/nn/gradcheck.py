"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor

FD_STEP = 1e-5
# elements whose reference gradient is tiny relative to the largest one are
# compared against this fraction of the largest magnitude instead of themselves
REL_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is :data:`REL_FLOOR` times the largest reference magnitude, so
    near-zero entries are judged on the scale of the gradient as a whole.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(n).max(), np.abs(a).max())
    if scale == 0.0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR * scale)
    return float((np.abs(a - n) / den).max())


def numerical_gradient(f: Callable[[], float], arr: np.ndarray,
                       eps: float = FD_STEP, indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place.

    With ``indices`` only those flat positions are probed; the result then has
    one entry per index.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.empty(len(idx), dtype=np.float64)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * eps)
    return out if indices is not None else out.reshape(arr.shape)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    rng: np.random.Generator, wrt: Sequence[int] | None = None,
                    eps: float = FD_STEP) -> float:
    """Compare tape gradients of ``fn(*tensors)`` with finite differences.

    The output is reduced to a scalar by a fixed random projection.  Returns
    the max relative error over every input in ``wrt`` (default: all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    proj = None

    def scalar(*ts):
        nonlocal proj
        out = fn(*ts)
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return out, float((out.data * proj).sum())

    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out, _ = scalar(*tensors)
        loss = ops.sum(ops.mul(out, Tensor(proj)))
    grads = tape.gradient(loss, [tensors[i] for i in wrt])

    # one joint comparison, so the floor is set by the largest gradient of any
    # input; an input with an identically-zero gradient is then judged on that scale
    numeric = [numerical_gradient(lambda: scalar(*tensors)[1], tensors[i].data, eps) for i in wrt]
    return relative_error(np.concatenate([np.ravel(g) for g in grads]),
                          np.concatenate([np.ravel(n) for n in numeric]))


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)


@dataclass
class GradCase:
    """A named gradient check: ``build(rng) -> (fn, arrays, wrt)``."""

    name: str
    tolerance: float
    build: Callable[[np.random.Generator], tuple]

    def run(self, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> CheckResult:
        worst = 0.0
        for s in seeds:
            rng = np.random.default_rng(s)
            fn, arrays, wrt = self.build(rng)
            worst = max(worst, check_gradients(fn, arrays, rng, wrt))
        return CheckResult(self.name, worst, self.tolerance, len(seeds))


def format_table(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<28} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<28} {r.max_error:12.3e} {r.tolerance:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
