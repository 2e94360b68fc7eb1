"""End-to-end network, training loop and evaluation."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .body_model import BodyModel, BodyModelAsset, forward_mesh, project, regress_joints
from .config import ModelConfig, RunConfig
from .contrast import ContrastConfig, contrast_losses, joint_embeddings
from .diffcore import AdamW, Module, Tape, Tensor, archive, ops
from .extractor import ConfigError, Extractor, ExtractorConfig, make_heatmaps
from .fusion import FusionConfig, FusionTransformer, StageOutput
from .lifting import Lifter
from .metrics import EvalResult, evaluate_arrays
from .objective import LossBundle, UncertaintyWeights, average_rounds, l1_terms, total_loss
from .synthdata import Dataset

log = logging.getLogger(__name__)


@dataclass
class Forward:
    stages: list[StageOutput]
    h3d: Tensor | None
    lam: Tensor | None


class OccluMeshNet(Module):
    """Extractor -> lifter -> fusion transformer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.extractor = Extractor(ExtractorConfig.default(cfg.S, cfg.H, cfg.C, cfg.num_joints), rng, dtype)
        self.lifter = None
        if cfg.feat3d_mode == "sampling":
            self.lifter = Lifter(cfg.C, cfg.D, cfg.H, cfg.W, cfg.heads, cfg.ffn, cfg.enc3d_layers, rng, dtype,
                                 conv_blocks=cfg.lift_conv_blocks, lam_init=cfg.lam_init)
        self.fusion = FusionTransformer(FusionConfig(
            C=cfg.C, D=cfg.D, H=cfg.H, W=cfg.W, heads=cfg.heads, ffn=cfg.ffn, enc2d_layers=cfg.enc2d_layers,
            dec_layers=cfg.dec_layers, refine_layers=cfg.refine_layers, num_joints=cfg.num_joints,
            smpl_token=cfg.smpl_token, feat2d_mode=cfg.feat2d_mode, feat3d_mode=cfg.feat3d_mode), rng, dtype)

    @property
    def dtype(self):
        return self.extractor.weights[0].dtype

    def __call__(self, image, heatmaps, joints2d=None) -> Forward:
        f2d = self.extractor(image, heatmaps)
        h3d = lam = None
        if self.lifter is not None:
            h3d = self.lifter(f2d)
            lam = self.lifter.lam
        return Forward(self.fusion(f2d, h3d, lam, joints2d), h3d, lam)


def readout(stage: StageOutput, body: BodyModel) -> dict:
    """Mesh, metric joints and projected 2D joints of one snapshot."""
    verts = forward_mesh(stage.theta, stage.beta, body)
    joints = regress_joints(verts, body.J_eval)
    return dict(verts=verts, joints3d=joints, joints2d=project(joints, stage.cam),
                theta=stage.theta, beta=stage.beta, grid_joints=stage.joints)


def make_inputs(data: Dataset, idx, S: int, sigma: float, noise: float = 0.0, rng=None, dtype=np.float32):
    """Image, heatmaps and the (possibly jittered) input 2D joints."""
    j2d = data.arrays["joints2d"][idx]
    if noise > 0:
        j2d = j2d + rng.normal(0, noise, j2d.shape)
    image = data.arrays["image"][idx].astype(dtype)
    return image, make_heatmaps(j2d, S, sigma).astype(dtype), j2d.astype(dtype)


def gt_dict(data: Dataset, idx) -> dict:
    a = data.arrays
    return dict(joints3d=a["joints_mm"][idx] / 1000.0, grid_joints=a["grid"][idx], joints2d=a["joints2d"][idx],
                theta=a["pose"][idx], beta=a["shape"][idx], has_3d=a["has_3d"][idx], has_smpl=a["has_smpl"][idx])


class Trainer:
    """Owns the network, loss weights, optimizer and every random stream.

    All randomness derives from ``cfg.seed``: parameter init, batch order,
    heatmap jitter and contrastive sampling each get a child SeedSequence.
    """

    def __init__(self, cfg: RunConfig, data: Dataset, asset: BodyModelAsset, out_dir: str | None = None):
        cfg.validate()
        if data.arrays["image"].shape[-1] != cfg.model.S:
            raise ConfigError(f"images are {data.arrays['image'].shape[-1]} px but model.S = {cfg.model.S}")
        self.cfg = cfg
        self.data = data
        self.out_dir = out_dir
        init, order, jitter, contrast = np.random.SeedSequence(cfg.seed).spawn(4)
        self.net = OccluMeshNet(cfg.model, np.random.default_rng(init))
        self.body = BodyModel(asset, dtype=np.float32)
        t = cfg.train
        self.ccfg = ContrastConfig(j2n=t.j2n, j2j=t.j2j, tau=t.tau, j2n_budget=t.j2n_budget,
                                   j2j_budget=t.j2j_budget, round=t.contrast_round,
                                   stop_grad_gt=t.stop_grad_gt, stop_grad_negatives=t.stop_grad_negatives)
        terms = ["l3d", "l2d", "smpl"] + [n for n, on in (("j2n", t.j2n), ("j2j", t.j2j)) if on]
        self.weights = UncertaintyWeights(terms)
        named = [("model." + k, p) for k, p in self.net.named_parameters()]
        named += [("loss." + k, p) for k, p in self.weights.named_parameters()]
        self.opt = AdamW(named, lr=t.lr, weight_decay=t.weight_decay,
                         decay_mask={k: p.ndim >= 2 and k.startswith("model.") for k, p in named})
        self.rng_order = np.random.default_rng(order)
        self.rng_jitter = np.random.default_rng(jitter)
        self.rng_contrast = np.random.default_rng(contrast)
        self.step_count = 0
        self._queue: list[int] = []
        log.info("loss terms: %s", ",".join(terms))

    # -------------------------------------------------------------- data

    def next_batch(self) -> np.ndarray:
        n = len(self.data)
        bs = min(self.cfg.train.batch_size, n)
        while len(self._queue) < bs:
            self._queue.extend(self.rng_order.permutation(n).tolist())
        idx, self._queue = self._queue[:bs], self._queue[bs:]
        return np.array(sorted(idx))

    # -------------------------------------------------------------- step

    def losses(self, idx) -> tuple[LossBundle, Forward]:
        m = self.cfg.model
        image, heat, j2d = make_inputs(self.data, idx, m.S, m.heatmap_sigma, self.cfg.train.heatmap_noise,
                                       self.rng_jitter, self.net.dtype)
        gt = gt_dict(self.data, idx)
        fwd = self.net(image, heat, j2d)
        bundle = average_rounds([l1_terms(readout(st, self.body), gt) for st in fwd.stages])
        if fwd.h3d is not None and (self.ccfg.j2n or self.ccfg.j2j):
            pred = fwd.stages[self.ccfg.round].joints
            gt_grid = Tensor(gt["grid_joints"].astype(self.net.dtype))
            bundle.values.update(contrast_losses(self.ccfg, fwd.h3d, pred, gt_grid, fwd.lam,
                                                 self.rng_contrast, gt["has_3d"]))
        return bundle, fwd

    def step(self) -> dict[str, float]:
        idx = self.next_batch()
        with Tape() as tape:
            bundle, fwd = self.losses(idx)
            loss = total_loss(bundle, self.weights)
        self.opt.zero_grad()
        tape.backward(loss)
        self.opt.step()
        if self.net.lifter is not None:
            self.net.lifter.clamp_lambda()
        self.step_count += 1
        out = bundle.scalars()
        out["total"] = float(loss.data)
        # final-round 2D error, the early-stop signal
        out["l2d_final"] = float(l1_terms(readout(fwd.stages[-1], self.body), gt_dict(self.data, idx))
                                 .values["l2d"].data)
        return out

    def train(self, steps: int, log_path: str | None = None, ckpt_dir: str | None = None,
              early_stop: float | None = None) -> list[dict[str, float]]:
        early_stop = self.cfg.train.early_stop_l2d if early_stop is None else early_stop
        history = []
        logf = open(log_path, "a") if log_path else None
        try:
            if ckpt_dir and self.step_count == 0:
                self.save(os.path.join(ckpt_dir, "ckpt_0.jtrk"))
            for _ in range(steps):
                rec = self.step()
                history.append(rec)
                if logf:
                    for k in sorted(rec):
                        logf.write(f"{self.step_count} {k} {rec[k]!r}\n")
                if ckpt_dir and self.step_count % self.cfg.train.ckpt_every == 0:
                    self.save(os.path.join(ckpt_dir, f"ckpt_{self.step_count}.jtrk"))
                if early_stop and rec["l2d_final"] < early_stop:
                    log.info("early stop at step %d (L_2D %.4f)", self.step_count, rec["l2d_final"])
                    break
        finally:
            if logf:
                logf.close()
        if ckpt_dir:
            self.save(os.path.join(ckpt_dir, "last.jtrk"))
        return history

    # -------------------------------------------------------------- checkpoints

    def state(self) -> dict[str, np.ndarray]:
        st = {"step": np.array([self.step_count], dtype=np.int64)}
        st.update({"model." + k: v for k, v in self.net.state_dict().items()})
        st.update({"loss." + k: v for k, v in self.weights.state_dict().items()})
        st.update(self.opt.state_dict())
        return st

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        archive.save(path, self.state())

    def load(self, path: str) -> None:
        st = archive.load(path)
        load_model(self.net, st)
        self.weights.load_state_dict({k[5:]: v for k, v in st.items() if k.startswith("loss.")})
        self.opt.load_state_dict(st)
        self.step_count = int(st["step"][0])


def load_model(net: OccluMeshNet, state: dict[str, np.ndarray]) -> None:
    net.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})


# ------------------------------------------------------------------ inference

def predict(net: OccluMeshNet, body: BodyModel, data: Dataset, idx, batch_size: int = 16):
    """Per-stage (vertices_mm, joints_mm) arrays for the chosen samples."""
    idx = np.asarray(idx)
    m = net.cfg
    per_stage = None
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        image, heat, j2d = make_inputs(data, b, m.S, m.heatmap_sigma, dtype=net.dtype)
        fwd = net(image, heat, j2d)
        outs = []
        for st in fwd.stages:
            r = readout(st, body)
            outs.append((r["verts"].data.astype(np.float64) * 1000.0, r["joints3d"].data.astype(np.float64) * 1000.0))
        if per_stage is None:
            per_stage = [([v], [j]) for v, j in outs]
        else:
            for acc, (v, j) in zip(per_stage, outs):
                acc[0].append(v)
                acc[1].append(j)
    return [(np.concatenate(v), np.concatenate(j)) for v, j in per_stage]


def gt_vertices(data: Dataset, idx, body: BodyModel) -> np.ndarray:
    a = data.arrays
    return forward_mesh(a["pose"][idx], a["shape"][idx], body).data.astype(np.float64) * 1000.0


def evaluate(net: OccluMeshNet, asset: BodyModelAsset, data: Dataset, idx=None, batch_size: int = 16) -> EvalResult:
    """Final-output metrics plus the per-refining-layer breakdown."""
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    body = BodyModel(asset, dtype=net.dtype)
    stages = predict(net, body, data, idx, batch_size)
    gv = gt_vertices(data, idx, BodyModel(asset))
    gj = data.arrays["joints_mm"][idx]
    ids = [data.ids[i] for i in idx]
    res = evaluate_arrays(ids, stages[-1][1], gj, stages[-1][0], gv)
    for l, (v, j) in enumerate(stages):
        r = evaluate_arrays(ids, j, gj, v, gv)
        res.per_layer.append((l, r.mpjpe, r.pa_mpjpe, r.pve))
    return res


def collect_embeddings(net: OccluMeshNet, data: Dataset, idx=None, batch_size: int = 16, source: str = "pred"):
    """Normalized joint embeddings (M, C) and class labels (M,) sampled from
    H_3D at predicted (``source='pred'``) or ground-truth joints."""
    if net.lifter is None:
        raise ValueError("embeddings need the 3D branch (feat3d_mode=sampling)")
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    m = net.cfg
    embs, labels = [], []
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        image, heat, j2d = make_inputs(data, b, m.S, m.heatmap_sigma, dtype=net.dtype)
        fwd = net(image, heat, j2d)
        joints = fwd.stages[-1].joints if source == "pred" else Tensor(data.arrays["grid"][b].astype(net.dtype))
        embs.append(joint_embeddings(fwd.h3d, joints, fwd.lam).data)
        labels.append(np.tile(np.arange(m.num_joints), len(b)))
    return np.concatenate(embs), np.concatenate(labels)
