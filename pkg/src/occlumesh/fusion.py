"""Fusion transformer: 2D encoder, SMPL/joint queries, initial regression from
2D features, trilinear 3D joint sampling and cascade refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import NUM_CAM, NUM_JOINTS, NUM_POSE, NUM_SHAPE
from .diffcore import MLP, Linear, Module, Parameter, Tensor, archive, ops, record
from .extractor import ConfigError
from .lifting import psi
from .transformer import DecoderLayer, TransformerEncoder, grid_to_tokens, tokens_to_grid

NUM_SMPL_TOKENS = 3
LATENT_DIM = 32


# ------------------------------------------------------------------ sampling

def trilinear_corners(points: np.ndarray, extents: tuple[int, int, int]):
    """Corner indices and weights for points in uniform cell-centre space.

    ``points`` (..., 3) as (x, y, z) in [0, 1]; ``extents`` = (D, H, W).
    Returns (idx, w, frac, inside): idx (8, ..., 3) integer (ix, iy, iz),
    w (8, ...), frac (..., 3) and the per-axis not-clamped mask.
    """
    D, H, W = extents
    n = np.array([W, H, D], dtype=points.dtype)
    c = points * n - 0.5
    inside = (c >= 0) & (c <= n - 1)
    c = np.clip(c, 0, n - 1)
    i0 = np.minimum(np.floor(c), np.maximum(n - 2, 0)).astype(np.int64)
    frac = c - i0
    i1 = np.minimum(i0 + 1, (n - 1).astype(np.int64))
    idx, w = [], []
    for bits in np.ndindex(2, 2, 2):
        sel = np.array(bits, dtype=bool)
        idx.append(np.where(sel, i1, i0))
        w.append(np.prod(np.where(sel, frac, 1 - frac), axis=-1))
    return np.stack(idx), np.stack(w), frac, inside


def sample_uniform(grid, points) -> Tensor:
    """Trilinear interpolation of ``grid`` (B, C, D, H, W) at ``points``
    (B, N, 3) given in uniform cell-centre space.  Points beyond the outer
    cell centres clamp to the border cells.  Returns (B, N, C)."""
    grid = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid))
    points = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=grid.dtype))
    B, C, D, H, W = grid.shape
    N = points.shape[1]
    pts = points.data
    idx, w, frac, inside = trilinear_corners(pts, (D, H, W))
    bidx = np.broadcast_to(np.arange(B)[:, None], (B, N))
    g = grid.data
    vals = [g[bidx, :, idx[c, ..., 2], idx[c, ..., 1], idx[c, ..., 0]] for c in range(8)]   # (B, N, C) each
    out = np.zeros((B, N, C), dtype=g.dtype)
    for c in range(8):
        out += w[c][..., None] * vals[c]
    n = np.array([W, H, D], dtype=g.dtype)
    corner_bits = list(np.ndindex(2, 2, 2))

    def backward(gout):
        ggrid = gpts = None
        if grid.requires_grad:
            lin = ((bidx[None] * D + idx[..., 2]) * H + idx[..., 1]) * W + idx[..., 0]     # (8, B, N)
            contrib = w[..., None] * gout[None]                                          # (8, B, N, C)
            ggrid = ops.scatter_rows(B * D * H * W, lin, contrib.reshape(-1, C).astype(g.dtype))
            ggrid = ggrid.reshape(B, D, H, W, C).transpose(0, 4, 1, 2, 3)
        if points.requires_grad:
            gpts = np.zeros(pts.shape, dtype=g.dtype)
            for c, bits in enumerate(corner_bits):
                proj = (vals[c] * gout).sum(-1)                          # (B, N)
                for a in range(3):
                    dw = np.ones((B, N), dtype=g.dtype)
                    for o in range(3):
                        if o == a:
                            dw = dw * (1.0 if bits[o] else -1.0)
                        else:
                            dw = dw * (frac[..., o] if bits[o] else 1 - frac[..., o])
                    gpts[..., a] += dw * proj
            gpts *= n * inside
        return ggrid, gpts
    return record(out, (grid, points), backward, "trilinear")


def trilinear_sample(h3d, joints, lam) -> Tensor:
    """Sample (B, C, D, H, W) features at joints (B, N, 3) in [0, 1]^3.

    The z coordinate is rescaled by psi(z, lam) before interpolation, so the
    gradient reaches the grid, the joint coordinates and lam.
    """
    joints = joints if isinstance(joints, Tensor) else Tensor(np.asarray(joints, dtype=h3d.dtype))
    z = psi(joints[..., 2:3], lam)
    return sample_uniform(h3d, ops.concat([joints[..., 0:2], z], axis=-1))


def contribution_mask(joints: np.ndarray, extents: tuple[int, int, int], lam: float) -> np.ndarray:
    """Boolean (B, D, H, W): cells with nonzero trilinear weight for any joint."""
    joints = np.asarray(joints, dtype=np.float64)
    pts = joints.copy()
    pts[..., 2] = pts[..., 2] ** float(lam)
    idx, w, _, _ = trilinear_corners(pts, extents)
    B = joints.shape[0]
    mask = np.zeros((B,) + tuple(extents), dtype=bool)
    bidx = np.broadcast_to(np.arange(B)[:, None], joints.shape[:2])
    for c in range(8):
        nz = w[c] > 0
        mask[bidx[nz], idx[c, ..., 2][nz], idx[c, ..., 1][nz], idx[c, ..., 0][nz]] = True
    return mask


# ------------------------------------------------------------------ queries and stages

@dataclass
class QuerySet:
    tokens: Tensor          # (N_q, C)
    num_smpl: int

    @property
    def num_joints(self) -> int:
        return self.tokens.shape[0] - self.num_smpl


@dataclass
class StageOutput:
    pose_latent: Tensor     # (B, 32)
    theta: Tensor           # (B, 72)
    beta: Tensor            # (B, 10)
    cam_raw: Tensor         # (B, 3): log s, tx, ty
    joints: Tensor          # (B, N_j, 3) in [0, 1]^3
    hidden: Tensor | None = None

    @property
    def cam(self) -> Tensor:
        return ops.concat([ops.exp(self.cam_raw[:, 0:1]), self.cam_raw[:, 1:3]], axis=-1)


def decode_pose_latent(latent, weight, bias=None) -> Tensor:
    """Affine pose prior: (B, 32) latent -> (B, 72) axis-angle."""
    theta = ops.matmul(latent, weight)
    return theta if bias is None else ops.add(theta, bias)


@dataclass
class FusionConfig:
    C: int = 128
    D: int = 8
    H: int = 8
    W: int = 8
    heads: int = 4
    ffn: int = 256
    enc2d_layers: int = 1
    dec_layers: int = 1
    refine_layers: int = 3
    num_joints: int = NUM_JOINTS
    smpl_token: bool = True
    feat2d_mode: str = "flatting"     # or "sampling"
    feat3d_mode: str = "sampling"     # or "none"
    latent_dim: int = LATENT_DIM

    def validate(self) -> None:
        if self.C % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide C={self.C}")
        if self.feat2d_mode not in ("flatting", "sampling"):
            raise ConfigError(f"unknown feat2d_mode {self.feat2d_mode!r}")
        if self.feat3d_mode not in ("sampling", "none"):
            raise ConfigError(f"unknown feat3d_mode {self.feat3d_mode!r}")
        if self.refine_layers < 0 or self.dec_layers < 1:
            raise ConfigError("need >= 1 initial decoder layer and >= 0 refining layers")


class FusionTransformer(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        C, L = cfg.C, cfg.refine_layers
        self.num_smpl = NUM_SMPL_TOKENS if cfg.smpl_token else 0
        self.encoder2d = TransformerEncoder(cfg.H * cfg.W, C, cfg.heads, cfg.ffn, cfg.enc2d_layers, rng, dtype)
        self.queries = Parameter(rng.normal(0, 1.0, (self.num_smpl + cfg.num_joints, C)), dtype)
        self.decoder = [DecoderLayer(C, cfg.heads, cfg.ffn, rng, dtype) for _ in range(cfg.dec_layers)]
        self.pose_head = MLP([C, C, cfg.latent_dim], rng, dtype, last_scale=0.1)
        self.shape_head = MLP([C, C, NUM_SHAPE], rng, dtype, last_scale=0.1)
        self.cam_head = MLP([C, C, NUM_CAM], rng, dtype, last_scale=0.1)
        self.joint_head = MLP([C, C, 3], rng, dtype, last_scale=0.1)
        self.pose_weight = Parameter(rng.normal(0, 0.05, (cfg.latent_dim, NUM_POSE)), dtype)
        self.pose_bias = Parameter(np.zeros(NUM_POSE), dtype)
        self.key_pos3d = Linear(3, C, rng, dtype)
        if cfg.feat2d_mode == "sampling":
            self.key_pos2d = Linear(2, C, rng, dtype)
        self.refiners = [DecoderLayer(C, cfg.heads, cfg.ffn, rng, dtype) for _ in range(L)]
        self.pose_res = [MLP([cfg.latent_dim + C, C, cfg.latent_dim], rng, dtype, last_scale=0.1) for _ in range(L)]
        self.shape_res = [MLP([NUM_SHAPE + C, C, NUM_SHAPE], rng, dtype, last_scale=0.1) for _ in range(L)]
        self.cam_res = [MLP([NUM_CAM + C, C, NUM_CAM], rng, dtype, last_scale=0.1) for _ in range(L)]
        self.joint_res = [MLP([3 + C, C, 3], rng, dtype, last_scale=0.1) for _ in range(L)]

    # -------------------------------------------------------------- pieces

    def query_set(self) -> QuerySet:
        return QuerySet(self.queries, self.num_smpl)

    def encode2d(self, f2d) -> Tensor:
        """(B, C, H, W) -> H_2D (B, C, H, W)."""
        return tokens_to_grid(self.encoder2d(grid_to_tokens(f2d)), f2d.shape[2:])

    def memory_2d(self, h2d: Tensor, joints2d=None) -> tuple[Tensor, Tensor]:
        """Keys/values from H_2D: flattened cells, or samples at the 2D joints."""
        B, C, H, W = h2d.shape
        if self.cfg.feat2d_mode == "flatting":
            return grid_to_tokens(h2d), self.encoder2d.pos
        if joints2d is None:
            raise ValueError("feat2d_mode='sampling' needs input 2D joints")
        uv = (np.asarray(joints2d.data if isinstance(joints2d, Tensor) else joints2d) + 1) / 2
        uv = np.clip(uv, 0, 1).astype(h2d.dtype)
        pts = np.concatenate([uv, np.full(uv.shape[:-1] + (1,), 0.5, dtype=h2d.dtype)], axis=-1)
        vals = sample_uniform(ops.reshape(h2d, (B, C, 1, H, W)), Tensor(pts))
        return vals, self.key_pos2d(Tensor(uv))

    def smpl_hidden(self, hidden: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-parameter hidden vectors for pose, shape and camera."""
        if self.num_smpl:
            return hidden[:, 0], hidden[:, 1], hidden[:, 2]
        pooled = ops.mean(hidden, axis=1)
        return pooled, pooled, pooled

    def initial_regress(self, memory: Tensor, memory_pos=None) -> StageOutput:
        B = memory.shape[0]
        tgt = ops.broadcast_to(ops.expand_dims(self.queries, 0), (B,) + self.queries.shape)
        for layer in self.decoder:
            tgt = layer(tgt, memory, memory_pos)
        hp, hs, hc = self.smpl_hidden(tgt)
        latent = self.pose_head(hp)
        joints = ops.sigmoid(self.joint_head(tgt[:, self.num_smpl:]))
        return StageOutput(
            pose_latent=latent,
            theta=decode_pose_latent(latent, self.pose_weight, self.pose_bias),
            beta=self.shape_head(hs),
            cam_raw=self.cam_head(hc),
            joints=joints,
            hidden=tgt,
        )

    def refine(self, stage: StageOutput, memory2d: Tensor, memory2d_pos, h3d: Tensor | None, lam) -> list[StageOutput]:
        """Run the refining layers; returns the initial stage plus one per layer."""
        stages = [stage]
        tgt = stage.hidden
        ns = self.num_smpl
        for l, layer in enumerate(self.refiners):
            cur = stages[-1]
            if self.cfg.feat3d_mode == "sampling":
                hj = trilinear_sample(h3d, cur.joints, lam)
                memory = ops.concat([memory2d, hj], axis=1)
                pos2d = ops.broadcast_to(memory2d_pos, memory2d.shape) if memory2d_pos.ndim < 3 else memory2d_pos
                memory_pos = ops.concat([pos2d, self.key_pos3d(cur.joints)], axis=1)
            else:
                memory, memory_pos = memory2d, memory2d_pos
            tgt = layer(tgt, memory, memory_pos)
            hp, hs, hc = self.smpl_hidden(tgt)
            latent = ops.add(cur.pose_latent, self.pose_res[l](ops.concat([cur.pose_latent, hp], axis=-1)))
            beta = ops.add(cur.beta, self.shape_res[l](ops.concat([cur.beta, hs], axis=-1)))
            cam_raw = ops.add(cur.cam_raw, self.cam_res[l](ops.concat([cur.cam_raw, hc], axis=-1)))
            step = self.joint_res[l](ops.concat([cur.joints, tgt[:, ns:]], axis=-1))
            joints = ops.clip(ops.add(cur.joints, step), 0.0, 1.0)
            stages.append(StageOutput(latent, decode_pose_latent(latent, self.pose_weight, self.pose_bias),
                                      beta, cam_raw, joints, tgt))
        return stages

    def __call__(self, f2d: Tensor, h3d: Tensor | None, lam, joints2d=None) -> list[StageOutput]:
        h2d = self.encode2d(f2d)
        mem, mem_pos = self.memory_2d(h2d, joints2d)
        stage = self.initial_regress(mem, mem_pos)
        return self.refine(stage, mem, mem_pos, h3d, lam)

    def keep_attention(self, flag: bool = True) -> None:
        for layer in self.refiners:
            layer.cross_attn.keep_weights = flag

    def attention_maps(self) -> list[np.ndarray]:
        return [layer.cross_attn.last_weights for layer in self.refiners]


@dataclass
class AttentionExport:
    maps: list[np.ndarray]        # per refining layer, (n_q, n_keys) averaged over heads
    num_2d_keys: int
    num_3d_keys: int
    mass_2d: list[float] = field(default_factory=list)
    mass_3d: list[float] = field(default_factory=list)


def attention_mass_split(weights: np.ndarray, num_2d_keys: int) -> tuple[float, float]:
    """Mean share of attention mass on the 2D keys vs. the sampled 3D keys."""
    w = np.asarray(weights, dtype=np.float64)
    m2 = float(w[..., :num_2d_keys].sum(-1).mean())
    m3 = float(w[..., num_2d_keys:].sum(-1).mean())
    return m2, m3


def export_attention(model, image, heatmaps, joints2d=None, path=None) -> AttentionExport:
    """Cross-attention of every refining layer for one input sample.

    ``model`` is a full pipeline (see :mod:`occlumesh.model`).  When
    ``path`` is given the maps go to a named tensor archive as
    ``layer{l}.attn``.
    """
    fusion: FusionTransformer = model.fusion
    fusion.keep_attention(True)
    try:
        model(image, heatmaps, joints2d)
        maps = [m[0].astype(np.float32) for m in fusion.attention_maps()]
    finally:
        fusion.keep_attention(False)
    cfg = fusion.cfg
    n2d = cfg.H * cfg.W if cfg.feat2d_mode == "flatting" else cfg.num_joints
    n3d = cfg.num_joints if cfg.feat3d_mode == "sampling" else 0
    exp = AttentionExport(maps, n2d, n3d)
    for m in maps:
        a, b = attention_mass_split(m, n2d)
        exp.mass_2d.append(a)
        exp.mass_3d.append(b)
    if path is not None:
        archive.save(path, {f"layer{l}.attn": m for l, m in enumerate(maps)})
    return exp
