"""Joint-to-non-joint and joint-to-joint InfoNCE over sampled 3D embeddings.

Sampling works on flat index pools so a :class:`ContrastBatch` is a few
integer arrays; the losses gather similarities from one anchor-by-pool
matmul instead of materialising every sampled embedding.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, archive, ops
from .fusion import contribution_mask, trilinear_sample

log = logging.getLogger(__name__)

TAU = 0.07


@dataclass(frozen=True)
class Budget:
    anchors: int
    positives: int
    negatives: int


J2N_BUDGET = Budget(100, 1024, 2048)
J2J_BUDGET = Budget(100, 128, 256)


@dataclass
class ContrastBatch:
    """Sampled indices. ``anchors`` index the anchor pool, ``positives``
    (A, P) and ``negatives`` (A, N) index their own pools."""
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    pos_pool: np.ndarray      # per-anchor population sizes before capping
    neg_pool: np.ndarray
    tau: float = TAU
    skipped: int = 0

    def __len__(self):
        return len(self.anchors)

    def to_bytes(self) -> bytes:
        return archive.dumps({"anchors": self.anchors, "positives": self.positives,
                              "negatives": self.negatives})


@dataclass
class VoxelContributionMask:
    mask: np.ndarray          # (B, D, H, W) bool

    @classmethod
    def from_joints(cls, joints: np.ndarray, extents, lam: float) -> "VoxelContributionMask":
        return cls(contribution_mask(joints, extents, lam))

    @property
    def negative_pool(self) -> np.ndarray:
        """Flat (b * D*H*W + cell) indices of voxels feeding no joint."""
        return np.flatnonzero(~self.mask.reshape(-1))


# ------------------------------------------------------------------ losses

def info_nce_logits(pos, neg=None) -> Tensor:
    """Mean over anchors of the averaged-positive InfoNCE.

    ``pos`` (A, P) and ``neg`` (A, N) are already-scaled similarities a.x / tau.
    Per positive: -log(e^p / (e^p + sum_n e^n)), computed as
    logaddexp(p, LSE(neg)) - p.
    """
    pos = pos if isinstance(pos, Tensor) else Tensor(np.asarray(pos))
    if neg is None or neg.shape[-1] == 0:
        # no negatives: every term is -log 1
        return ops.mul(ops.sum(pos), 0.0)
    lse = ops.logsumexp(neg, axis=-1, keepdims=True)                          # (A, 1)
    both = ops.stack([pos, ops.broadcast_to(lse, pos.shape)], axis=-1)        # (A, P, 2)
    per = ops.sub(ops.logsumexp(both, axis=-1), pos)
    return ops.mean(ops.mean(per, axis=-1))


def info_nce(anchor, positives, negatives, tau: float = TAU) -> Tensor:
    """Single-anchor InfoNCE with |P| >= 1 positives and any number of negatives."""
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(np.asarray(anchor))
    positives = positives if isinstance(positives, Tensor) else Tensor(np.asarray(positives, dtype=anchor.dtype))
    if positives.shape[0] == 0:
        raise ValueError("info_nce needs at least one positive")
    a = ops.reshape(anchor, (1, -1))
    pos = ops.mul(ops.matmul(a, ops.swapaxes(positives, 0, 1)), 1.0 / tau)
    neg = None
    if negatives is not None and len(negatives):
        negatives = negatives if isinstance(negatives, Tensor) else Tensor(np.asarray(negatives, dtype=anchor.dtype))
        neg = ops.mul(ops.matmul(a, ops.swapaxes(negatives, 0, 1)), 1.0 / tau)
    return info_nce_logits(pos, neg)


def batch_loss(batch: ContrastBatch, anchor_pool, pos_pool, neg_pool) -> Tensor:
    """InfoNCE of a sampled batch; pools are (M, C) normalized embeddings."""
    if len(batch) == 0:
        return Tensor(np.zeros((), dtype=anchor_pool.dtype))
    a = ops.take(anchor_pool, batch.anchors, axis=0)                          # (A, C)
    sp = ops.mul(ops.matmul(a, ops.swapaxes(pos_pool, 0, 1)), 1.0 / batch.tau)
    sn = ops.mul(ops.matmul(a, ops.swapaxes(neg_pool, 0, 1)), 1.0 / batch.tau)
    return info_nce_logits(ops.take_along_axis(sp, batch.positives, axis=1),
                           ops.take_along_axis(sn, batch.negatives, axis=1))


# ------------------------------------------------------------------ sampling

def _draw(rng: np.random.Generator, pool: int, k: int, what: str) -> np.ndarray:
    replace = pool < k
    if replace:
        log.info("%s pool of %d below budget %d; sampling with replacement", what, pool, k)
    return rng.choice(pool, size=k, replace=replace)


def sample_j2n(num_pred: int, mask: VoxelContributionMask, budget: Budget = J2N_BUDGET,
               rng: np.random.Generator | None = None, tau: float = TAU) -> ContrastBatch:
    """Anchors and positives from all predicted joints of the batch (an
    anchor is never its own positive); negatives from non-contributing voxels
    of every image."""
    rng = rng or np.random.default_rng(0)
    if num_pred < 2:
        raise ValueError("joint-to-non-joint contrast needs at least two predicted joints")
    negs = mask.negative_pool
    if negs.size == 0:
        raise ValueError("every voxel contributes to some joint; no negatives to sample")
    anchors = _draw(rng, num_pred, budget.anchors, "anchor")
    A = len(anchors)
    pos = np.empty((A, budget.positives), dtype=np.int64)
    neg = np.empty((A, budget.negatives), dtype=np.int64)
    for i, a in enumerate(anchors):
        p = _draw(rng, num_pred - 1, budget.positives, "positive")
        pos[i] = p + (p >= a)
        neg[i] = negs[_draw(rng, negs.size, budget.negatives, "negative")]
    return ContrastBatch(anchors, pos, neg, np.full(A, num_pred - 1), np.full(A, negs.size), tau)


def sample_j2j(pred_labels: np.ndarray, gt_labels: np.ndarray, budget: Budget = J2J_BUDGET,
               rng: np.random.Generator | None = None, tau: float = TAU) -> ContrastBatch:
    """Anchors from predicted joints; positives are ground-truth joints of
    the anchor's class, negatives predicted joints of other classes, both
    drawn across all images.  Anchors whose class has no GT are skipped."""
    rng = rng or np.random.default_rng(0)
    pred_labels = np.asarray(pred_labels).reshape(-1)
    gt_labels = np.asarray(gt_labels).reshape(-1)
    drawn = _draw(rng, pred_labels.size, budget.anchors, "anchor")
    keep, pos, neg, pp, npool = [], [], [], [], []
    skipped = 0
    for a in drawn:
        c = pred_labels[a]
        gpool = np.flatnonzero(gt_labels == c)
        if gpool.size == 0:
            skipped += 1
            continue
        others = np.flatnonzero(pred_labels != c)
        keep.append(a)
        pos.append(gpool[_draw(rng, gpool.size, budget.positives, "positive")])
        n = others[_draw(rng, others.size, budget.negatives, "negative")] if others.size else np.zeros(0, np.int64)
        neg.append(n)
        pp.append(gpool.size)
        npool.append(others.size)
    if skipped:
        log.info("skipped %d anchors whose class has no ground-truth joint", skipped)
    A = len(keep)
    return ContrastBatch(np.array(keep, dtype=np.int64),
                         np.array(pos, dtype=np.int64).reshape(A, budget.positives),
                         np.array(neg, dtype=np.int64).reshape(A, -1 if A else 0),
                         np.array(pp, dtype=np.int64), np.array(npool, dtype=np.int64), tau, skipped)


# ------------------------------------------------------------------ embeddings

def joint_embeddings(h3d, joints, lam) -> Tensor:
    """l2-normalized trilinear samples, flattened to (B * N, C)."""
    e = trilinear_sample(h3d, joints, lam)
    B, N, C = e.shape
    return ops.l2_normalize(ops.reshape(e, (B * N, C)), axis=-1)


def voxel_embeddings(h3d) -> Tensor:
    """All voxel embeddings, normalized, as (B * D*H*W, C)."""
    B, C = h3d.shape[:2]
    flat = ops.swapaxes(ops.reshape(h3d, (B, C, -1)), 1, 2)
    return ops.l2_normalize(ops.reshape(flat, (-1, C)), axis=-1)


@dataclass
class ContrastConfig:
    j2n: bool = True
    j2j: bool = True
    tau: float = TAU
    j2n_budget: Budget = J2N_BUDGET
    j2j_budget: Budget = J2J_BUDGET
    round: int = -1               # which refinement round's joints to contrast
    stop_grad_gt: bool = False
    stop_grad_negatives: bool = False


def contrast_losses(cfg: ContrastConfig, h3d, pred_joints, gt_joints, lam, rng,
                    has_3d: np.ndarray | None = None) -> dict[str, Tensor]:
    """Sample and evaluate the enabled contrastive terms for one step."""
    out: dict[str, Tensor] = {}
    if not (cfg.j2n or cfg.j2j):
        return out
    B, N = pred_joints.shape[:2]
    lam_value = float(np.asarray(lam.data if isinstance(lam, Tensor) else lam).reshape(-1)[0])
    pred = joint_embeddings(h3d, pred_joints, lam)
    if cfg.j2n:
        mask = VoxelContributionMask.from_joints(pred_joints.data, h3d.shape[2:], lam_value)
        vox = voxel_embeddings(h3d)
        if cfg.stop_grad_negatives:
            vox = ops.stop_gradient(vox)
        batch = sample_j2n(B * N, mask, cfg.j2n_budget, rng, cfg.tau)
        out["j2n"] = batch_loss(batch, pred, pred, vox)
    if cfg.j2j:
        gt = joint_embeddings(h3d, gt_joints, lam)
        if cfg.stop_grad_gt:
            gt = ops.stop_gradient(gt)
        labels = np.tile(np.arange(N), B)
        gt_labels = labels.copy()
        if has_3d is not None:
            gt_labels = np.where(np.repeat(np.asarray(has_3d, bool), N), labels, -1)
        neg = ops.stop_gradient(pred) if cfg.stop_grad_negatives else pred
        batch = sample_j2j(labels, gt_labels, cfg.j2j_budget, rng, cfg.tau)
        out["j2j"] = _j2j_loss(batch, pred, gt, neg)
    return out


def _j2j_loss(batch, pred, gt, neg) -> Tensor:
    if batch.negatives.shape[1] == 0:
        a = ops.take(pred, batch.anchors, axis=0)
        sp = ops.mul(ops.matmul(a, ops.swapaxes(gt, 0, 1)), 1.0 / batch.tau)
        return info_nce_logits(ops.take_along_axis(sp, batch.positives, axis=1), None)
    return batch_loss(batch, pred, gt, neg)


def j2j_loss(pred_emb, pred_labels, gt_emb, gt_labels, budget: Budget = J2J_BUDGET,
             rng=None, tau: float = TAU) -> Tensor:
    """Joint-to-joint InfoNCE for explicit embedding sets and labels."""
    pred_emb = pred_emb if isinstance(pred_emb, Tensor) else Tensor(np.asarray(pred_emb))
    gt_emb = gt_emb if isinstance(gt_emb, Tensor) else Tensor(np.asarray(gt_emb, dtype=pred_emb.dtype))
    batch = sample_j2j(pred_labels, gt_labels, budget, rng, tau)
    return _j2j_loss(batch, pred_emb, gt_emb, pred_emb)


# ------------------------------------------------------------------ report

@dataclass
class EmbeddingReport:
    labels: np.ndarray            # class ids present, sorted
    centroid_cosine: np.ndarray   # (K, K)
    intra: float | None           # None when no class has two members
    inter: float | None

    @property
    def gap(self) -> float | None:
        if self.intra is None or self.inter is None:
            return None
        return self.intra - self.inter

    def to_text(self, names=None) -> str:
        def fmt(x):
            return "absent" if x is None else f"{x:.6f}"
        lines = [f"intra_class_mean_cosine {fmt(self.intra)}",
                 f"inter_class_mean_cosine {fmt(self.inter)}",
                 f"gap {fmt(self.gap)}",
                 "centroid_cosine"]
        tags = [names[i] if names is not None else str(i) for i in self.labels]
        lines.append("\t" + "\t".join(tags))
        for tag, row in zip(tags, self.centroid_cosine):
            lines.append(tag + "\t" + "\t".join(f"{v:.4f}" for v in row))
        return "\n".join(lines) + "\n"


def embedding_report(embeddings, labels, out_dir=None, names=None) -> EmbeddingReport:
    """Centroid cosines plus mean intra/inter-class pairwise cosine."""
    e = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("embedding report needs at least two classes")
    e = e / np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), 1e-12)
    cos = e @ e.T
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    intra_pairs = cos[same & upper]
    inter_pairs = cos[~same & upper]
    cents = np.stack([e[labels == c].mean(0) for c in classes])
    cents = cents / np.maximum(np.linalg.norm(cents, axis=-1, keepdims=True), 1e-12)
    rep = EmbeddingReport(classes, cents @ cents.T,
                          float(intra_pairs.mean()) if intra_pairs.size else None,
                          float(inter_pairs.mean()) if inter_pairs.size else None)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "embedding_report.txt"), "w") as f:
            f.write(rep.to_text(names))
        archive.save(os.path.join(out_dir, "embeddings.jtrk"),
                     {"embeddings": e.astype(np.float32), "labels": labels.astype(np.int64)})
    return rep
