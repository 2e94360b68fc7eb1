"""Run configuration: dataclasses plus a sectioned key = value text format."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .contrast import J2J_BUDGET, J2N_BUDGET, TAU, Budget
from .extractor import ConfigError
from .lifting import LAMBDA_INIT


@dataclass
class ModelConfig:
    S: int = 64
    C: int = 128
    D: int = 8
    H: int = 8
    W: int = 8
    heads: int = 4
    ffn: int = 256
    enc2d_layers: int = 1
    enc3d_layers: int = 1
    dec_layers: int = 1
    refine_layers: int = 3
    num_joints: int = 17
    lift_conv_blocks: int = 1
    smpl_token: bool = True
    feat2d_mode: str = "flatting"
    feat3d_mode: str = "sampling"
    lam_init: float = LAMBDA_INIT
    heatmap_sigma: float = 2.0

    @property
    def num_queries(self) -> int:
        return self.num_joints + (3 if self.smpl_token else 0)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    steps: int = 1000
    ckpt_every: int = 500
    heatmap_noise: float = 0.0        # std of 2D joint jitter, normalized units
    j2n: bool = True
    j2j: bool = True
    tau: float = TAU
    j2n_budget: Budget = J2N_BUDGET
    j2j_budget: Budget = J2J_BUDGET
    contrast_round: int = -1
    stop_grad_gt: bool = False
    stop_grad_negatives: bool = False
    early_stop_l2d: float = 0.0       # stop once final-round batch L_2D drops below; 0 disables


@dataclass
class DataConfig:
    count: int = 64
    occlusion_mode: str = "none"
    data_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    asset: str = ""                   # empty: built-in toy asset
    data_dir: str = ""

    def validate(self) -> "RunConfig":
        m, t = self.model, self.train
        for name in ("S", "C", "D", "H", "W", "heads", "ffn", "num_joints", "enc2d_layers", "dec_layers"):
            if getattr(m, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if m.refine_layers < 0 or m.enc3d_layers < 0 or m.lift_conv_blocks < 1:
            raise ConfigError("layer counts must be non-negative (at least one lift conv block)")
        if m.C % m.heads:
            raise ConfigError(f"{m.heads} heads do not divide C={m.C}")
        if m.feat2d_mode not in ("flatting", "sampling"):
            raise ConfigError(f"unknown feat2d_mode {m.feat2d_mode!r}")
        if m.feat3d_mode not in ("sampling", "none"):
            raise ConfigError(f"unknown feat3d_mode {m.feat3d_mode!r}")
        if m.feat3d_mode == "none" and (t.j2n or t.j2j):
            raise ConfigError("feat3d_mode=none leaves no 3D features to contrast; disable j2n and j2j")
        if m.lam_init <= 1:
            raise ConfigError("lam_init must exceed 1")
        if t.batch_size <= 0 or t.steps < 0 or t.lr <= 0 or t.tau <= 0 or t.ckpt_every <= 0:
            raise ConfigError("batch_size, lr, tau and ckpt_every must be positive; steps non-negative")
        if self.data.occlusion_mode not in ("none", "object", "person"):
            raise ConfigError(f"unknown occlusion mode {self.data.occlusion_mode!r}")
        if self.data.count <= 0:
            raise ConfigError("data.count must be positive")
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _fmt(v) -> str:
    if isinstance(v, Budget):
        return f"{v.anchors},{v.positives},{v.negatives}"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, Budget):
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"budget needs anchors,positives,negatives: {text!r}")
        return Budget(*parts)
    try:
        return type(default)(text.strip())
    except ValueError as e:
        raise ConfigError(str(e)) from None


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {"seed": str(cfg.seed), "asset": cfg.asset, "data_dir": cfg.data_dir}
    for sec, cls in _SECTIONS.items():
        obj = getattr(cfg, sec)
        cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(cls)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> RunConfig:
    """Parse; unknown sections or keys are rejected, missing keys take defaults."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = RunConfig()
    for sec in cp.sections():
        if sec == "run":
            for k, v in cp[sec].items():
                if k not in ("seed", "asset", "data_dir"):
                    raise ConfigError(f"unknown key run.{k}")
                setattr(cfg, k, _parse(v, getattr(cfg, k)))
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(cfg, sec)
        names = {f.name.lower(): f.name for f in fields(obj)}
        for k, v in cp[sec].items():
            if k not in names:
                raise ConfigError(f"unknown key {sec}.{k}")
            setattr(obj, names[k], _parse(v, getattr(obj, names[k])))
    return cfg.validate()


def load(path) -> RunConfig:
    with open(path) as f:
        return from_ini(f.read())
