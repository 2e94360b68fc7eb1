"""Plain numpy reference implementations used as test oracles."""
import math

import numpy as np


def gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def linear(lin, x):
    return x @ lin.weight.data + lin.bias.data


def mlp(m, x):
    for i, lin in enumerate(m.layers):
        x = linear(lin, x)
        if i < len(m.layers) - 1:
            x = gelu(x)
    return x


def softmax_rows(s):
    w = np.exp(s - s.max(-1, keepdims=True))
    return w / w.sum(-1, keepdims=True)


def attention(q, k, v, heads=1):
    """Head-by-head softmax(Q K^T / sqrt(d)) V for 2-D q, k, v."""
    d = q.shape[-1] // heads
    outs = []
    for i in range(heads):
        sl = slice(i * d, (i + 1) * d)
        outs.append(softmax_rows(q[:, sl] @ k[:, sl].T / math.sqrt(d)) @ v[:, sl])
    return np.concatenate(outs, -1)


def mha(a, q_in, k_in, v_in):
    return linear(a.wo, attention(linear(a.wq, q_in), linear(a.wk, k_in), linear(a.wv, v_in), a.heads))


def encoder_layer(layer, x, pos):
    """One pre-norm encoder layer on (n, C) tokens."""
    h = layer_norm(x, layer.norm1.weight.data, layer.norm1.bias.data)
    qk = h + pos
    x = x + mha(layer.attn, qk, qk, h)
    return x + mlp(layer.mlp, layer_norm(x, layer.norm2.weight.data, layer.norm2.bias.data))


def decoder_layer(layer, tgt, memory, pos):
    h = layer_norm(tgt, layer.norm1.weight.data, layer.norm1.bias.data)
    tgt = tgt + mha(layer.self_attn, h, h, h)
    h = layer_norm(tgt, layer.norm2.weight.data, layer.norm2.bias.data)
    tgt = tgt + mha(layer.cross_attn, h, memory + pos, memory)
    return tgt + mlp(layer.mlp, layer_norm(tgt, layer.norm3.weight.data, layer.norm3.bias.data))


def trilinear(grid, p):
    """Sample a (C, D, H, W) grid at one point p = (x, y, z) in cell-centre space,
    written out as the explicit 8-term weighted sum."""
    C, D, H, W = grid.shape
    c = [min(max(p[0] * W - 0.5, 0), W - 1), min(max(p[1] * H - 0.5, 0), H - 1), min(max(p[2] * D - 0.5, 0), D - 1)]
    x0, y0, z0 = (min(int(math.floor(v)), max(n - 2, 0)) for v, n in zip(c, (W, H, D)))
    fx, fy, fz = c[0] - x0, c[1] - y0, c[2] - z0
    x1, y1, z1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1), min(z0 + 1, D - 1)
    return ((1 - fx) * (1 - fy) * (1 - fz) * grid[:, z0, y0, x0] + fx * (1 - fy) * (1 - fz) * grid[:, z0, y0, x1]
            + (1 - fx) * fy * (1 - fz) * grid[:, z0, y1, x0] + fx * fy * (1 - fz) * grid[:, z0, y1, x1]
            + (1 - fx) * (1 - fy) * fz * grid[:, z1, y0, x0] + fx * (1 - fy) * fz * grid[:, z1, y0, x1]
            + (1 - fx) * fy * fz * grid[:, z1, y1, x0] + fx * fy * fz * grid[:, z1, y1, x1])
