"""Tensor and tape-based reverse-mode differentiation.

A ``Tape`` records every operation executed while it is active and at least
one input requires a gradient.  ``Tape.backward`` replays the record in
reverse.  Tapes are thread-local, so independent tapes can run on separate
threads.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_local = threading.local()
_default_dtype = np.float32


def default_dtype():
    return getattr(_local, "dtype", _default_dtype)


@contextmanager
def precision(dtype):
    """Set the dtype used for tensors created from python scalars/lists in this thread."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _stack():
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is never mutated by operations; optimizers rebind it between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind in "fi":
                arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- operator sugar (implemented in ops) ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        if isinstance(x, np.ndarray) and x.dtype.kind == "f":
            return Tensor(x)
        dtype = default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside it are recorded when any
    input requires a gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        assert s and s[-1] is self, "tape stack corrupted"
        s.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _propagate(self, loss: Tensor, seed, keep=frozenset()):
        if seed is None:
            if loss.size != 1:
                raise ValueError("backward on a non-scalar tensor needs an explicit output gradient")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in keep:
                kept[id(node.out)] = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        grads.update(kept)
        return grads

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Return d(loss)/d(w) for each w (leaf or intermediate), without touching ``.grad``."""
        grads = self._propagate(loss, seed, keep=frozenset(id(w) for w in wrt))
        out = []
        for w in wrt:
            g = grads.get(id(w))
            out.append(np.zeros_like(w.data) if g is None else g)
        return out

    def backward(self, loss: Tensor, seed=None) -> None:
        """Accumulate gradients into ``.grad`` of every leaf tensor on the tape."""
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        grads = self._propagate(loss, seed)
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str = "") -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the active tape if needed.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(inputs), backward, op))
    return out
