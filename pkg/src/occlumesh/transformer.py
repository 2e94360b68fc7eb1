"""Scaled dot-product attention and pre-norm encoder/decoder layers."""
from __future__ import annotations

import math

import numpy as np

from .diffcore import MLP, LayerNorm, Linear, Module, Parameter, Tensor, ops
from .extractor import ConfigError


def attention(q, k, v, heads: int = 1, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V with ``heads`` heads of width d = C / heads.

    ``q`` (..., nq, C); ``k``, ``v`` (..., nk, C).  With one head this is
    exactly softmax(Q K^T / sqrt(C)) V.  Weights come back as
    (..., heads, nq, nk) when requested.
    """
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q))
    k = k if isinstance(k, Tensor) else Tensor(np.asarray(k, dtype=q.dtype))
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=q.dtype))
    C = q.shape[-1]
    if C % heads:
        raise ConfigError(f"{heads} heads do not divide width {C}")
    if k.shape[-1] != C or v.shape[-2] != k.shape[-2]:
        raise ConfigError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    d = C // heads
    lead = q.shape[:-2]
    nq, nk = q.shape[-2], k.shape[-2]

    def split(x, n):
        x = ops.reshape(x, lead + (n, heads, d))
        return ops.swapaxes(x, -2, -3)                    # (..., h, n, d)

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    scores = ops.mul(ops.matmul(qh, ops.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    w = ops.softmax(scores, axis=-1)
    out = ops.matmul(w, vh)                               # (..., h, nq, d)
    out = ops.reshape(ops.swapaxes(out, -2, -3), lead + (nq, C))
    return (out, w) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, C: int, heads: int, rng, dtype=np.float32):
        if C % heads:
            raise ConfigError(f"{heads} heads do not divide width {C}")
        self.heads = heads
        self.wq = Linear(C, C, rng, dtype)
        self.wk = Linear(C, C, rng, dtype)
        self.wv = Linear(C, C, rng, dtype)
        self.wo = Linear(C, C, rng, dtype)
        self.keep_weights = False
        self._weights = None

    def __call__(self, q_in, k_in, v_in) -> Tensor:
        out, w = attention(self.wq(q_in), self.wk(k_in), self.wv(v_in), self.heads, return_weights=True)
        if self.keep_weights:
            self._weights = w.data.mean(axis=-3)          # average over heads
        return self.wo(out)

    @property
    def last_weights(self) -> np.ndarray | None:
        return self._weights


class EncoderLayer(Module):
    """x + Attn(LN x + pos); x + MLP(LN x).  Positions enter queries/keys only."""

    def __init__(self, C: int, heads: int, ffn: int, rng, dtype=np.float32):
        self.norm1 = LayerNorm(C, dtype)
        self.attn = MultiHeadAttention(C, heads, rng, dtype)
        self.norm2 = LayerNorm(C, dtype)
        self.mlp = MLP([C, ffn, C], rng, dtype)

    def __call__(self, x, pos=None) -> Tensor:
        h = self.norm1(x)
        qk = h if pos is None else ops.add(h, pos)
        x = ops.add(x, self.attn(qk, qk, h))
        return ops.add(x, self.mlp(self.norm2(x)))


class DecoderLayer(Module):
    """Self-attention over queries, cross-attention into memory, MLP."""

    def __init__(self, C: int, heads: int, ffn: int, rng, dtype=np.float32):
        self.norm1 = LayerNorm(C, dtype)
        self.self_attn = MultiHeadAttention(C, heads, rng, dtype)
        self.norm2 = LayerNorm(C, dtype)
        self.cross_attn = MultiHeadAttention(C, heads, rng, dtype)
        self.norm3 = LayerNorm(C, dtype)
        self.mlp = MLP([C, ffn, C], rng, dtype)

    def __call__(self, tgt, memory, memory_pos=None) -> Tensor:
        h = self.norm1(tgt)
        tgt = ops.add(tgt, self.self_attn(h, h, h))
        keys = memory if memory_pos is None else ops.add(memory, memory_pos)
        tgt = ops.add(tgt, self.cross_attn(self.norm2(tgt), keys, memory))
        return ops.add(tgt, self.mlp(self.norm3(tgt)))


class TransformerEncoder(Module):
    """Token encoder with learned per-token positional encodings."""

    def __init__(self, num_tokens: int, C: int, heads: int, ffn: int, layers: int, rng, dtype=np.float32):
        self.pos = Parameter(rng.normal(0, 0.02, (num_tokens, C)), dtype)
        self.layers = [EncoderLayer(C, heads, ffn, rng, dtype) for _ in range(layers)]

    def __call__(self, tokens) -> Tensor:
        if tokens.shape[-2] != self.pos.shape[0]:
            raise ConfigError(f"encoder built for {self.pos.shape[0]} tokens, got {tokens.shape[-2]}")
        for layer in self.layers:
            tokens = layer(tokens, self.pos)
        return tokens


def grid_to_tokens(grid: Tensor) -> Tensor:
    """(B, C, *spatial) -> (B, prod(spatial), C)."""
    B, C = grid.shape[:2]
    flat = ops.reshape(grid, (B, C, -1))
    return ops.swapaxes(flat, 1, 2)


def tokens_to_grid(tokens: Tensor, spatial: tuple[int, ...]) -> Tensor:
    B, n, C = tokens.shape
    return ops.reshape(ops.swapaxes(tokens, 1, 2), (B, C) + tuple(spatial))
