from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    ``decay_mask`` lets callers exempt parameters (biases, norms, loss
    weights) from decay; by default everything with rank >= 2 decays.
    """

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4, decay_mask=None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        if decay_mask is None:
            decay_mask = {name: p.ndim >= 2 for name, p in self.params}
        self.decay = decay_mask
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = p.data
            if self.decay.get(name, False) and self.weight_decay:
                data = data * (1 - self.lr * self.weight_decay)
            p.data = (data - self.lr * upd).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"optim.t": np.array([self.t], dtype=np.int64)}
        for name, _ in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["optim.t"][0])
        for name, _ in self.params:
            self.m[name] = np.array(state[f"optim.m.{name}"])
            self.v[name] = np.array(state[f"optim.v.{name}"])
