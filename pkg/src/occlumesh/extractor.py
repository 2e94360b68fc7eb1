"""Pose-guided 2D features: image + joint heatmaps -> C x H x W grid.

A plain strided convolution stack stands in for a ResNet backbone.
Normalised image coordinates span [-1, 1] on both axes with x to the right
and y down; pixel (row r, col c) has its centre at
``((2c + 1) / S - 1, (2r + 1) / S - 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Module, Parameter, Tensor, ops, record


class ConfigError(ValueError):
    pass


def conv(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation.

    ``x`` (B, Cin, *spatial), ``w`` (Cout, Cin, *kernel), ``b`` (Cout,).
    Implemented as an explicit im2col followed by one batched GEMM.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=x.dtype))
    if b is not None and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=x.dtype))
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"conv input {x.shape} does not match kernel {w.shape}")
    B, Cin = x.shape[:2]
    Cout = w.shape[0]
    ksz = w.shape[2:]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(padding, padding)] * nd) if padding else x.data
    out_sp = tuple((xp.shape[2 + i] - ksz[i]) // stride + 1 for i in range(nd))
    if any(n <= 0 for n in out_sp):
        raise ConfigError(f"kernel {ksz} larger than padded input {xp.shape[2:]}")
    cols = np.empty((B, Cin) + tuple(ksz) + out_sp, dtype=xp.dtype)
    windows = []
    for off in np.ndindex(*ksz):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp))
        windows.append((off, sl))
        cols[(slice(None), slice(None)) + off] = xp[(slice(None), slice(None)) + sl]
    P = int(np.prod(out_sp))
    cols2 = cols.reshape(B, Cin * int(np.prod(ksz)), P)
    wmat = w.data.reshape(Cout, -1)
    out = wmat @ cols2
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1)
    out = out.reshape((B, Cout) + out_sp)
    xshape = x.shape

    def backward(g):
        g2 = g.reshape(B, Cout, P)
        gw = gx = gb = None
        if w.requires_grad:
            # one GEMM over the folded batch beats a batched einsum by a wide margin
            gw = (g2.transpose(1, 0, 2).reshape(Cout, -1)
                  @ cols2.transpose(1, 0, 2).reshape(cols2.shape[1], -1).T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cols.shape)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for off, sl in windows:
                gxp[(slice(None), slice(None)) + sl] += gcols[(slice(None), slice(None)) + off]
            if padding:
                inner = tuple(slice(padding, padding + n) for n in xshape[2:])
                gxp = gxp[(slice(None), slice(None)) + inner]
            gx = gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward, f"conv{nd}d")


def pixel_to_norm(px: np.ndarray, S: int) -> np.ndarray:
    return (2 * np.asarray(px) + 1) / S - 1


def norm_to_pixel(xy: np.ndarray, S: int) -> np.ndarray:
    return (np.asarray(xy) + 1) * S / 2 - 0.5


def make_heatmaps(joints2d: np.ndarray, S: int, sigma: float) -> np.ndarray:
    """Gaussian maps exp(-d^2 / 2 sigma^2) on the S x S pixel grid.

    ``joints2d`` (..., N, 2) in normalised coordinates; ``sigma`` in pixels.
    Joints outside [-1, 1]^2 give all-zero maps.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    j = np.asarray(joints2d, dtype=np.float64)
    px = norm_to_pixel(j, S)                         # (..., N, 2) as (col, row)
    grid = np.arange(S, dtype=np.float64)
    dx = grid - px[..., 0:1]                          # (..., N, S) over columns
    dy = grid - px[..., 1:2]                          # (..., N, S) over rows
    gx = np.exp(-dx * dx / (2 * sigma * sigma))
    gy = np.exp(-dy * dy / (2 * sigma * sigma))
    maps = gy[..., :, None] * gx[..., None, :]        # (..., N, S, S) rows x cols
    inside = np.all(np.abs(j) <= 1, axis=-1)
    return (maps * inside[..., None, None]).astype(np.float32)


@dataclass
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1


@dataclass
class ExtractorConfig:
    in_channels: int = 3 + 17
    blocks: list[ConvBlockSpec] = field(default_factory=list)
    out_size: int | None = None   # expected H (== W); checked at call time

    @classmethod
    def default(cls, S: int = 64, H: int = 8, C: int = 128, num_joints: int = 17) -> "ExtractorConfig":
        """Stride-2 stack halving S down to H with channels growing to C."""
        if S < H or S % H:
            raise ConfigError(f"input size {S} cannot be reduced to feature size {H}")
        ratio = S // H
        n = int(round(math.log2(ratio))) if ratio > 1 else 0
        if 2 ** n != ratio:
            raise ConfigError(f"input size {S} is not H * 2^k for H={H}")
        if n == 0:
            return cls(3 + num_joints, [ConvBlockSpec(C, 3, 1, 1)], H)
        chans = [max(C >> (n - 1 - i), 16) for i in range(n)]
        chans[-1] = C
        return cls(3 + num_joints, [ConvBlockSpec(c) for c in chans], H)


class Extractor(Module):
    """Conv stack; GELU after every block but the last."""

    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.weights = []
        self.biases = []
        cin = cfg.in_channels
        for blk in cfg.blocks:
            fan_in = cin * blk.kernel * blk.kernel
            self.weights.append(Parameter(rng.normal(0, math.sqrt(2.0 / fan_in),
                                                     (blk.out_channels, cin, blk.kernel, blk.kernel)), dtype))
            self.biases.append(Parameter(np.zeros(blk.out_channels), dtype))
            cin = blk.out_channels
        self._out_channels = cin

    @property
    def out_channels(self) -> int:
        return self._out_channels

    def __call__(self, image, heatmaps) -> Tensor:
        """(B, 3, S, S) image + (B, N, S, S) heatmaps -> (B, C, H, W)."""
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.weights[0].dtype))
        heatmaps = heatmaps if isinstance(heatmaps, Tensor) else Tensor(np.asarray(heatmaps, dtype=image.dtype))
        x = ops.concat([image, heatmaps], axis=1)
        return self.forward_input(x)

    def forward_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.weights[0].dtype))
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        n = len(self.cfg.blocks)
        for i, (blk, w, b) in enumerate(zip(self.cfg.blocks, self.weights, self.biases)):
            x = conv(x, w, b, stride=blk.stride, padding=blk.padding)
            if i < n - 1:
                x = ops.gelu(x)
        if self.cfg.out_size is not None and x.shape[2:] != (self.cfg.out_size, self.cfg.out_size):
            raise ConfigError(f"extractor produced {x.shape[2:]}, expected {self.cfg.out_size}")
        return x
