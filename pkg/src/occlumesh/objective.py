"""L1 supervision terms, deep supervision over refinement rounds, and the
uncertainty-weighted total loss sum_i exp(-s_i) L_i + s_i."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Module, Parameter, Tensor, ops

log = logging.getLogger(__name__)

TERMS = ("l3d", "l2d", "smpl", "j2n", "j2j")


@dataclass
class LossBundle:
    values: dict[str, Tensor] = field(default_factory=dict)
    # terms that had no annotated sample this step (value forced to 0)
    missing: set[str] = field(default_factory=set)

    def scalars(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.values.items()}


def _masked_l1(pred, gt, mask: np.ndarray | None) -> tuple[Tensor, bool]:
    """Mean |pred - gt| over samples with mask set; (0, False) if none."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=pred.dtype)
    diff = ops.abs(ops.sub(pred, gt))
    if mask is None:
        return ops.mean(diff), True
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return ops.mul(ops.sum(diff), 0.0), False
    w = mask.reshape((-1,) + (1,) * (diff.ndim - 1)).astype(pred.dtype)
    per_sample = int(np.prod(diff.shape[1:]))
    return ops.mul(ops.sum(ops.mul(diff, w)), 1.0 / (n * per_sample)), True


def l1_terms(pred: dict, gt: dict) -> LossBundle:
    """L1 supervision of one snapshot.

    ``pred`` keys: joints3d (B, N, 3) metres from the mesh, grid_joints
    (B, N, 3) in [0, 1], joints2d (B, N, 2), theta (B, 72), beta (B, 10).
    ``gt`` has the same keys plus optional boolean ``has_3d``/``has_smpl``
    per sample.  L_3D covers both the mesh joints and the grid-space
    reference joints; L_SMPL is L1 over theta plus L1 over beta.
    """
    has_3d, has_smpl = gt.get("has_3d"), gt.get("has_smpl")
    out = LossBundle()
    j3, ok3 = _masked_l1(pred["joints3d"], gt["joints3d"], has_3d)
    if "grid_joints" in pred and "grid_joints" in gt:
        jg, _ = _masked_l1(pred["grid_joints"], gt["grid_joints"], has_3d)
        j3 = ops.add(j3, jg)
    out.values["l3d"] = j3
    out.values["l2d"], _ = _masked_l1(pred["joints2d"], gt["joints2d"], None)
    th, oks = _masked_l1(pred["theta"], gt["theta"], has_smpl)
    be, _ = _masked_l1(pred["beta"], gt["beta"], has_smpl)
    out.values["smpl"] = ops.add(th, be)
    if not ok3:
        out.missing.add("l3d")
    if not oks:
        out.missing.add("smpl")
    for k in out.missing:
        log.debug("no annotation for %s in batch; term set to 0", k)
    return out


def average_rounds(bundles: list[LossBundle]) -> LossBundle:
    """Equal-weight mean of every term over the supervised snapshots."""
    out = LossBundle()
    for k in bundles[0].values:
        acc = bundles[0].values[k]
        for b in bundles[1:]:
            acc = ops.add(acc, b.values[k])
        out.values[k] = ops.mul(acc, 1.0 / len(bundles))
    out.missing = set.intersection(*(b.missing for b in bundles))
    return out


class UncertaintyWeights(Module):
    """One learnable log-variance s_i per enabled term, initialised to 0."""

    def __init__(self, terms=TERMS, dtype=np.float32):
        self.terms = tuple(terms)
        self.log_vars = [Parameter(np.zeros(()), dtype) for _ in self.terms]

    def __getitem__(self, name: str) -> Tensor:
        return self.log_vars[self.terms.index(name)]


def total_loss(bundle: LossBundle, weights: UncertaintyWeights) -> Tensor:
    """sum_i exp(-s_i) L_i + s_i over the enabled terms.  A term absent from
    ``weights`` is disabled and contributes neither its value nor s_i."""
    total = None
    for name in weights.terms:
        if name not in bundle.values:
            continue
        s = weights[name]
        term = ops.add(ops.mul(ops.exp(ops.neg(s)), bundle.values[name]), s)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("no enabled loss term")
    return total
