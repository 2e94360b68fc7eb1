"""MPJPE, PA-MPJPE and PVE in millimetres, plus report writers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .body_model import PELVIS

log = logging.getLogger(__name__)


def _root_align(x: np.ndarray, root: np.ndarray) -> np.ndarray:
    return x - root[..., None, :]


def mpjpe(pred, gt, root: int = PELVIS) -> float:
    """Mean joint distance after subtracting each set's pelvis."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    p = _root_align(pred, pred[..., root, :])
    g = _root_align(gt, gt[..., root, :])
    return float(np.linalg.norm(p - g, axis=-1).mean())


@dataclass
class Procrustes:
    R: np.ndarray
    s: float
    t: np.ndarray
    degenerate: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.s * x @ self.R.T + self.t


def procrustes(pred, gt, eps: float = 1e-12) -> Procrustes:
    """Similarity transform minimising |s R pred + t - gt|^2 (no reflection).

    A rank-deficient cross-covariance falls back to translation only.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    mp, mg = pred.mean(0), gt.mean(0)
    X, Y = pred - mp, gt - mg
    K = Y.T @ X
    U, S, Vt = np.linalg.svd(K)
    var = (X * X).sum()
    if var < eps or S[1] < eps * max(S[0], 1.0):
        log.warning("rank-deficient cross-covariance; translation-only alignment")
        return Procrustes(np.eye(3), 1.0, mg - mp, degenerate=True)
    d = np.sign(np.linalg.det(U @ Vt))
    Dm = np.diag([1.0, 1.0, d])
    R = U @ Dm @ Vt
    s = float((S * np.diag(Dm)).sum() / var)
    return Procrustes(R, s, mg - s * R @ mp)


def pa_mpjpe(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3:
        return float(np.mean([pa_mpjpe(p, g) for p, g in zip(pred, gt)]))
    if pred.shape[0] < 3:
        raise ValueError("Procrustes alignment needs at least 3 joints")
    aligned = procrustes(pred, gt).apply(pred)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean())


def pve(pred_vertices, gt_vertices, pred_root, gt_root) -> float:
    """Mean vertex distance with each mesh shifted by its own pelvis joint."""
    pv = np.asarray(pred_vertices, dtype=np.float64) - np.asarray(pred_root, dtype=np.float64)[..., None, :]
    gv = np.asarray(gt_vertices, dtype=np.float64) - np.asarray(gt_root, dtype=np.float64)[..., None, :]
    return float(np.linalg.norm(pv - gv, axis=-1).mean())


@dataclass
class EvalResult:
    mpjpe: float
    pa_mpjpe: float
    pve: float
    per_sample: list[tuple[str, float, float, float]] = field(default_factory=list)
    per_layer: list[tuple[int, float, float, float]] = field(default_factory=list)

    def table(self) -> str:
        lines = ["metric\tmm", f"MPJPE\t{self.mpjpe:.4f}", f"PA-MPJPE\t{self.pa_mpjpe:.4f}", f"PVE\t{self.pve:.4f}"]
        if self.per_layer:
            lines += ["", "refining_layer\tMPJPE\tPA-MPJPE\tPVE"]
            lines += [f"{l}\t{a:.4f}\t{b:.4f}\t{c:.4f}" for l, a, b, c in self.per_layer]
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        return "".join(f"{sid} {a:.6f} {b:.6f} {c:.6f}\n" for sid, a, b, c in self.per_sample)


def evaluate_arrays(ids, pred_joints, gt_joints, pred_verts, gt_verts) -> EvalResult:
    """Metrics over a batch; inputs in millimetres, joints (B, N, 3)."""
    rows = []
    for sid, pj, gj, pv, gv in zip(ids, pred_joints, gt_joints, pred_verts, gt_verts):
        rows.append((str(sid), mpjpe(pj, gj), pa_mpjpe(pj, gj), pve(pv, gv, pj[PELVIS], gj[PELVIS])))
    arr = np.array([r[1:] for r in rows])
    m = arr.mean(0)
    return EvalResult(float(m[0]), float(m[1]), float(m[2]), rows)
