"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    # (input index, flat element index) of the worst entry, or of the failure
    worst: tuple[int, int] | None = None
    message: str = ""
    per_input: list[float] = field(default_factory=list)

    def __bool__(self):
        return self.passed


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    from . import ops
    return ops.sum(ops.mul(out, Tensor(weights)))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6, seed: int = 0, check: Sequence[int] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Non-scalar outputs are contracted with a fixed random weight array so the
    whole Jacobian is exercised.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``; the check passes when the largest one
    is below ``tol``.  ``check`` restricts which inputs are perturbed
    (all by default); every input is still differentiated.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    check = list(range(len(arrays))) if check is None else list(check)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    with tape:
        loss = _scalarize(out, weights)
    analytic = tape.gradient(loss, leaves)

    def evaluate(vals) -> float:
        res = fn(*[Tensor(v) for v in vals])
        return float((res.data * weights).sum())

    worst_err, worst_loc, per_input = 0.0, None, []
    for i in check:
        base = arrays[i]
        num = np.zeros_like(base)
        flat = num.reshape(-1)
        for j in range(base.size):
            vals = [a if k != i else a.copy() for k, a in enumerate(arrays)]
            vals[i].reshape(-1)[j] += eps
            fp = evaluate(vals)
            vals[i].reshape(-1)[j] -= 2 * eps
            fm = evaluate(vals)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(False, float("inf"), (i, j),
                                       f"non-finite value when perturbing input {i} element {j}")
            flat[j] = (fp - fm) / (2 * eps)
        a = analytic[i].reshape(-1)
        if not np.all(np.isfinite(a)):
            j = int(np.argmax(~np.isfinite(a)))
            return GradCheckReport(False, float("inf"), (i, j), f"non-finite analytic gradient at input {i} element {j}")
        err = np.abs(a - flat) / np.maximum(np.maximum(np.abs(a), np.abs(flat)), floor)
        e = float(err.max()) if err.size else 0.0
        per_input.append(e)
        if e > worst_err:
            worst_err, worst_loc = e, (i, int(np.argmax(err)))
    passed = worst_err < tol
    msg = "" if passed else f"max relative error {worst_err:.3e} at input {worst_loc[0]} element {worst_loc[1]}"
    return GradCheckReport(passed, worst_err, worst_loc, msg, per_input)
