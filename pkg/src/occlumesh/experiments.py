"""Small end-to-end experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import copy
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModelAsset, toy_asset
from .config import RunConfig
from .contrast import EmbeddingReport, embedding_report
from .metrics import EvalResult
from .model import Trainer, collect_embeddings, evaluate
from .synthdata import Dataset, SynthConfig, generate

log = logging.getLogger(__name__)

# Overfitting 8 samples at the default step size 1e-4 stalls near L_2D 0.057
# for hundreds of steps; 1e-3 reaches the 0.02 target in ~120 steps.
OVERFIT_LR = 1e-3


def small_config(seed: int = 0) -> RunConfig:
    """Reduced model for multi-thousand-step runs on one core."""
    cfg = RunConfig(seed=seed)
    m = cfg.model
    m.S, m.C, m.D, m.H, m.W, m.heads, m.ffn = 32, 32, 4, 4, 4, 4, 64
    return cfg


def body_diagonal_mm(asset: BodyModelAsset) -> float:
    """Bounding-box diagonal of the rest-pose template, in millimetres."""
    t = asset.template
    return float(np.linalg.norm(t.max(0) - t.min(0)) * 1000.0)


@dataclass
class OverfitResult:
    steps: int
    converged: bool
    final_l2d: float
    seconds: float
    result: EvalResult
    history: list[dict] = field(default_factory=list)


def overfit(count: int = 8, max_steps: int = 5000, target_l2d: float = 0.02, lr: float = OVERFIT_LR,
            seed: int = 0, cfg: RunConfig | None = None, asset: BodyModelAsset | None = None,
            time_budget: float | None = None) -> OverfitResult:
    """Train on ``count`` unoccluded samples until the final-round batch L_2D
    drops below ``target_l2d``; then evaluate on the same samples."""
    asset = asset or toy_asset()
    cfg = cfg or RunConfig(seed=seed)
    cfg.train.lr = lr
    cfg.data.count, cfg.data.occlusion_mode = count, "none"
    data = generate(cfg.data.data_seed, count, "none", asset, SynthConfig(S=cfg.model.S))
    tr = Trainer(cfg, data, asset)
    t0 = time.perf_counter()
    hist = []
    converged = False
    for _ in range(max_steps):
        rec = tr.step()
        hist.append(rec)
        if tr.step_count % 25 == 0:
            log.info("step %d l2d %.4f total %.4f", tr.step_count, rec["l2d_final"], rec["total"])
        if rec["l2d_final"] < target_l2d:
            converged = True
            break
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    res = evaluate(tr.net, asset, data)
    return OverfitResult(tr.step_count, converged, hist[-1]["l2d_final"] if hist else float("nan"),
                         time.perf_counter() - t0, res, hist)


@dataclass
class GapResult:
    with_contrast: EmbeddingReport
    without_contrast: EmbeddingReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.with_contrast.gap > self.without_contrast.gap


def _train_and_report(cfg: RunConfig, data: Dataset, asset, steps: int, out_dir=None) -> EmbeddingReport:
    tr = Trainer(cfg, data, asset)
    for _ in range(steps):
        tr.step()
    emb, labels = collect_embeddings(tr.net, data)
    return embedding_report(emb, labels, out_dir)


def embedding_gap(steps: int = 2000, count: int = 64, mode: str = "person", seed: int = 0,
                  cfg: RunConfig | None = None, asset: BodyModelAsset | None = None, out_dir=None) -> GapResult:
    """Same seed and data, contrastive terms on vs. off; compares the
    intra-class minus inter-class mean cosine of predicted-joint embeddings."""
    asset = asset or toy_asset()
    base = cfg or small_config(seed)
    data = generate(base.data.data_seed, count, mode, asset, SynthConfig(S=base.model.S))
    t0 = time.perf_counter()
    reports = []
    for on in (True, False):
        c = copy.deepcopy(base)
        c.train.j2n = c.train.j2j = on
        sub = None if out_dir is None else os.path.join(out_dir, "contrast_on" if on else "contrast_off")
        reports.append(_train_and_report(c, data, asset, steps, sub))
    return GapResult(reports[0], reports[1], time.perf_counter() - t0)
