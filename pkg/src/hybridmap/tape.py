"""A minimal reverse-mode tape for the mapper's fixed computation graph.

Each recorded op stores its output node, its input nodes and a closure that maps
the output cotangent to input cotangents. Parameter cotangents are pushed into
``tape.param_grads`` by the closures themselves.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError


class Node:
    __slots__ = ("index", "value")

    def __init__(self, index: int, value: np.ndarray):
        self.index = index
        self.value = value

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.value, dtype=dtype)

    def __len__(self):
        return len(self.value)

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.index}, shape={self.shape})"


class GradientTape:
    def __init__(self, param_shapes: dict[str, tuple] | None = None, dtype=np.float32):
        self._ops: list[tuple[int, tuple[int, ...], Callable]] = []
        self._count = 0
        self._consumed = False
        self.dtype = np.dtype(dtype)
        self.param_shapes = dict(param_shapes or {})
        self.param_grads: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self._ops)

    def _new(self, value) -> Node:
        node = Node(self._count, value)
        self._count += 1
        return node

    def constant(self, value) -> Node:
        self._check_open()
        return self._new(value)

    def record(self, value, inputs: Sequence[Node], vjp: Callable) -> Node:
        """Register ``value = f(inputs)``; ``vjp(g)`` returns one cotangent per input."""
        self._check_open()
        out = self._new(value)
        self._ops.append((out.index, tuple(n.index for n in inputs), vjp))
        return out

    def accumulate(self, group: str, grad: np.ndarray, index=None):
        """Add ``grad`` into parameter group ``group`` (optionally at flat ``index``)."""
        buf = self.param_grads.get(group)
        if buf is None:
            shape = self.param_shapes.get(group, np.shape(grad) if index is None else None)
            if shape is None:
                raise UsageError(f"unknown shape for parameter group {group!r}")
            buf = np.zeros(shape, dtype=self.dtype)
            self.param_grads[group] = buf
        if index is None:
            buf += grad
        else:
            buf.reshape(-1)[index] += np.asarray(grad, dtype=self.dtype).reshape(-1)

    def _check_open(self):
        if self._consumed:
            raise UsageError("gradient tape was already consumed by backward()")

    def backward(self, seeds: dict[Node, np.ndarray] | Node, grad=None) -> dict[str, np.ndarray]:
        """Reverse sweep from ``seeds``; returns gradients for every parameter group."""
        self._check_open()
        self._consumed = True
        if isinstance(seeds, Node):
            seeds = {seeds: np.ones_like(seeds.value) if grad is None else grad}
        cot: dict[int, np.ndarray] = {}
        for node, g in seeds.items():
            cot[node.index] = np.asarray(g, dtype=self.dtype) + 0
        for out_idx, in_idx, vjp in reversed(self._ops):
            g = cot.pop(out_idx, None)
            if g is None:
                continue
            in_grads = vjp(g)
            for i, gi in zip(in_idx, in_grads):
                if gi is None:
                    continue
                if i in cot:
                    cot[i] = cot[i] + gi
                else:
                    cot[i] = gi
        self._ops.clear()
        grads = {}
        for name, shape in self.param_shapes.items():
            grads[name] = self.param_grads.get(name, np.zeros(shape, dtype=self.dtype))
        for name, g in self.param_grads.items():
            grads.setdefault(name, g)
        return grads


def backward(tape: GradientTape, loss: Node, loss_gradient=None) -> dict[str, np.ndarray]:
    return tape.backward(loss, loss_gradient)


# --------------------------------------------------------------------- ops
def add(tape: GradientTape, a: Node, b: Node) -> Node:
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def scale(tape: GradientTape, a: Node, factor: float) -> Node:
    return tape.record(a.value * factor, (a,), lambda g: (g * factor,))


def weighted_sum(tape: GradientTape, nodes: Sequence[Node], weights: Sequence[float]) -> Node:
    value = sum(w * n.value for n, w in zip(nodes, weights))
    return tape.record(value, tuple(nodes), lambda g: tuple(g * w for w in weights))
