"""2D -> 3D feature lifting with learnable depth-rescaled coordinates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import MLP, LayerNorm, Module, Parameter, Tensor, ops
from .extractor import conv
from .transformer import TransformerEncoder, grid_to_tokens, tokens_to_grid

log = logging.getLogger(__name__)

LAMBDA_INIT = 3.0
LAMBDA_FLOOR = 1.0 + 1e-4


def psi(z, lam) -> Tensor:
    """Depth rescaling z ** lam; differentiable in both arguments."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if not isinstance(lam, Tensor):
        lam = float(lam)
        if lam < 1:
            raise ValueError(f"psi needs lam >= 1, got {lam}")
        return ops.power(z, lam)
    return ops.power(z, ops.reshape(lam, ()) if lam.shape != () else lam)


@dataclass
class RRCGrid:
    coords: Tensor   # (D, H, W, 3) in (0, 1): x, y uniform; z = psi(uniform)
    lam: Tensor | float


def build_rrc(D: int, H: int, W: int, lam) -> RRCGrid:
    """Half-cell-centred coordinates; only the z channel depends on ``lam``."""
    if min(D, H, W) < 1:
        raise ValueError("grid extents must be positive")
    dt = lam.dtype if isinstance(lam, Tensor) else np.float64
    x = (np.arange(W, dtype=dt) + 0.5) / W
    y = (np.arange(H, dtype=dt) + 0.5) / H
    z = (np.arange(D, dtype=dt) + 0.5) / D
    xy = np.zeros((D, H, W, 2), dtype=dt)
    xy[..., 0] = x[None, None, :]
    xy[..., 1] = y[None, :, None]
    zr = ops.reshape(psi(Tensor(z), lam), (D, 1, 1, 1))
    zr = ops.broadcast_to(zr, (D, H, W, 1))
    return RRCGrid(ops.concat([Tensor(xy), zr], axis=-1), lam)


class Lifter(Module):
    """F_2D (B, C, H, W) -> F~_3D (B, C, D, H, W) -> H_3D (B, C, D, H, W)."""

    def __init__(self, C: int, D: int, H: int, W: int, heads: int, ffn: int, enc_layers: int,
                 rng: np.random.Generator, dtype=np.float32, conv_blocks: int = 1,
                 lam_init: float = LAMBDA_INIT):
        self.C, self.D, self.H, self.W = C, D, H, W
        self.lam = Parameter(np.array([lam_init]), dtype)
        self.mlp = MLP([C, C, D * C], rng, dtype)
        self.conv_w = []
        self.conv_b = []
        self.conv_norm = []
        cin = C + 3
        for _ in range(conv_blocks):
            self.conv_w.append(Parameter(rng.normal(0, math.sqrt(2.0 / (cin * 27)), (C, cin, 3, 3, 3)), dtype))
            self.conv_b.append(Parameter(np.zeros(C), dtype))
            self.conv_norm.append(LayerNorm(C, dtype))
            cin = C
        self.encoder = TransformerEncoder(D * H * W, C, heads, ffn, enc_layers, rng, dtype)

    def rrc(self) -> RRCGrid:
        return build_rrc(self.D, self.H, self.W, self.lam)

    def lift(self, f2d, rrc: RRCGrid | None = None) -> Tensor:
        f2d = f2d if isinstance(f2d, Tensor) else Tensor(np.asarray(f2d, dtype=self.lam.dtype))
        B, C, H, W = f2d.shape
        D = self.D
        if (C, H, W) != (self.C, self.H, self.W):
            raise ValueError(f"lifter built for {(self.C, self.H, self.W)}, got {(C, H, W)}")
        rrc = rrc or self.rrc()
        cells = ops.transpose(f2d, (0, 2, 3, 1))                     # (B, H, W, C)
        coarse = ops.reshape(self.mlp(cells), (B, H, W, D, C))
        coarse = ops.transpose(coarse, (0, 4, 3, 1, 2))              # (B, C, D, H, W)
        coords = ops.transpose(rrc.coords, (3, 0, 1, 2))             # (3, D, H, W)
        coords = ops.broadcast_to(ops.expand_dims(coords, 0), (B, 3, D, H, W))
        x = ops.concat([coarse, coords], axis=1)
        for w, b, norm in zip(self.conv_w, self.conv_b, self.conv_norm):
            x = conv(x, w, b, stride=1, padding=1)
            x = ops.transpose(norm(ops.transpose(x, (0, 2, 3, 4, 1))), (0, 4, 1, 2, 3))
            x = ops.gelu(x)
        return x

    def encode3d(self, f3d) -> Tensor:
        spatial = f3d.shape[2:]
        return tokens_to_grid(self.encoder(grid_to_tokens(f3d)), spatial)

    def __call__(self, f2d) -> Tensor:
        return self.encode3d(self.lift(f2d))

    def clamp_lambda(self) -> bool:
        """Project lam back above 1 after an optimizer step; True if clamped."""
        if float(self.lam.data[0]) <= 1.0:
            log.warning("depth exponent fell to %.6f; clamping to %.4f", float(self.lam.data[0]), LAMBDA_FLOOR)
            self.lam.data = np.array([LAMBDA_FLOOR], dtype=self.lam.dtype)
            return True
        return False
