"""Reverse-mode autodiff over float64 numpy arrays.

Every operation that consumes gradient-tracked arrays attaches a Node to its
output recording the input arrays and a vector-Jacobian-product closure.
Nodes carry a global monotone sequence number; a Tape is the ordered record
of nodes reachable from a root, and the backward pass walks it in strictly
descending sequence order (reverse execution order is a valid reverse
topological order, and it is deterministic).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import EngineError

_seq_counter = itertools.count()

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One executed operation: inputs plus the VJP that maps the output
    gradient to per-input gradient contributions (None for non-array slots)."""

    __slots__ = ("inputs", "vjp", "name")

    def __init__(self, inputs: Sequence["Array"], vjp: Callable, name: str):
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.name = name


class Array:
    """Dense float64 array with optional gradient tracking.

    `data` is always a float64 ndarray; `grad`, once populated by a backward
    pass, has the same shape as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return self._node is None

    def detach(self) -> "Array":
        """Alias of stop_grad: same values, no gradient flow."""
        return stop_grad(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.data.shape}{flag})"

    # Arithmetic operators are attached by engine.ops at import time to keep
    # the op definitions (and their shape errors) in one module.


def make_output(data: np.ndarray, inputs: Sequence[Array], vjp: Callable, name: str) -> Array:
    """Wrap an op result, recording a Node when gradients are being traced."""
    track = _grad_enabled and any(a.requires_grad for a in inputs)
    out = Array(data, requires_grad=track)
    if track:
        out._node = Node(inputs, vjp, name)
    return out


def stop_grad(x: Array) -> Array:
    """Identity forward; exactly zero gradient flows through the result."""
    out = Array.__new__(Array)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._node = None
    out._seq = next(_seq_counter)
    return out


class Tape:
    """Ordered record of the operations that feed a root array.

    `entries` lists the op-producing arrays in execution order; reverse
    accumulation visits them back-to-front.
    """

    def __init__(self, entries: list):
        self.entries = entries

    @classmethod
    def trace(cls, root: Array) -> "Tape":
        seen = set()
        found = []
        stack = [root]
        while stack:
            arr = stack.pop()
            if arr._node is None or id(arr) in seen:
                continue
            seen.add(id(arr))
            found.append(arr)
            stack.extend(arr._node.inputs)
        found.sort(key=lambda a: a._seq)
        return cls(found)

    def run_backward(self, root: Array, seed=None) -> None:
        if seed is None:
            if root.data.size != 1:
                raise EngineError("backward: non-scalar root requires an explicit seed gradient")
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != root.data.shape:
                raise EngineError("backward: seed gradient shape mismatch")

        grads: dict[int, np.ndarray] = {id(root): seed}
        for arr in reversed(self.entries):
            g = grads.pop(id(arr), None)
            if g is None:
                continue
            contributions = arr._node.vjp(g)
            for inp, gi in zip(arr._node.inputs, contributions):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
        # A root that is itself a tracked leaf (rare, e.g. loss == parameter).
        if root._node is None and root.requires_grad:
            g = grads.pop(id(root), None)
            if g is not None:
                root.grad = g.copy() if root.grad is None else root.grad + g


def backward(root: Array, seed=None) -> None:
    """Reverse accumulation from `root` into the `.grad` of tracked leaves."""
    Tape.trace(root).run_backward(root, seed)


def as_array(x, like_requires_grad: bool = False) -> Array:
    """Coerce scalars / ndarrays to a constant Array; pass Arrays through."""
    if isinstance(x, Array):
        return x
    return Array(np.asarray(x, dtype=np.float64), requires_grad=like_requires_grad)


def collect_parameters(arrays: Iterable[Array]) -> list:
    return [a for a in arrays if a.requires_grad]
