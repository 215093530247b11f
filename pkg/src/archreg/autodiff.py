"""Minimal define-then-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records a static graph of primitive ops. Graphs are built
symbolically from named leaves, evaluated with :meth:`Tape.forward` and
differentiated with :meth:`Tape.backward`::

    tape = Tape()
    x = tape.leaf("x")
    y = ad.sum(ad.square(x))
    tape.forward({"x": np.array([3.0, 4.0])})   # -> 25.0
    tape.backward(wrt=["x"])["x"]                # -> [6., 8.]

The same tape can be re-evaluated at new leaf values, which is what the
finite-difference checker and the inner PGD loop rely on.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""


class TapeStateError(RuntimeError):
    """Raised when backward is requested before a forward pass."""


class Node:
    __slots__ = ("tape", "op", "parents", "attrs", "name", "index", "value")

    def __init__(self, tape, op, parents=(), attrs=None, name=None):
        self.tape = tape
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.name = name
        self.index = len(tape.nodes)
        self.value = None
        tape.nodes.append(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# Each entry: (forward(values, attrs) -> array,
#              backward(g, values, out, attrs) -> tuple of parent grads)
_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(name, fwd, bwd):
    _OPS[name] = (fwd, bwd)


def _check_broadcast(a, b):
    np.broadcast_shapes(np.shape(a), np.shape(b))


def _add_fwd(v, at):
    _check_broadcast(*v)
    return v[0] + v[1]


def _sub_fwd(v, at):
    _check_broadcast(*v)
    return v[0] - v[1]


def _mul_fwd(v, at):
    _check_broadcast(*v)
    return v[0] * v[1]


def _matmul_fwd(v, at):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _sum_fwd(v, at):
    return np.sum(v[0], axis=at.get("axis"), keepdims=at.get("keepdims", False))


def _sum_bwd(g, v, out, at):
    (x,) = v
    axis = at.get("axis")
    if axis is not None and not at.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _softmax_bwd(g, v, s, at):
    return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)


def _clip_fwd(v, at):
    return np.clip(v[0], at["lo"], at["hi"])


def _clip_bwd(g, v, out, at):
    x = v[0]
    return (g * ((x >= at["lo"]) & (x <= at["hi"])),)


def _embed_fwd(v, at):
    W = v[0]
    tokens = at["tokens"]
    if W.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-d, got {W.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= W.shape[1]):
        raise ShapeError(f"token index out of range for vocabulary {W.shape[1]}")
    # (d, |V|) gathered at tokens (...), moved to (..., d)
    return np.moveaxis(W[:, tokens], 0, -1)


def _embed_bwd(g, v, out, at):
    W = v[0]
    tokens = at["tokens"].ravel()
    flat = g.reshape(-1, W.shape[0])
    grad = np.zeros((W.shape[1], W.shape[0]))
    np.add.at(grad, tokens, flat)
    return (grad.T.copy(),)


def _view_fwd(v, at):
    x = v[0]
    if x.ndim != 1 or at["stop"] > x.shape[0]:
        raise ShapeError(f"view [{at['start']}:{at['stop']}] out of range for {x.shape}")
    return x[at["start"]:at["stop"]].reshape(at["shape"])


def _view_bwd(g, v, out, at):
    grad = np.zeros_like(v[0])
    grad[at["start"]:at["stop"]] = g.ravel()
    return (grad,)


_register("add", _add_fwd,
          lambda g, v, o, at: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)))
_register("sub", _sub_fwd,
          lambda g, v, o, at: (_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)))
_register("mul", _mul_fwd,
          lambda g, v, o, at: (_unbroadcast(g * v[1], v[0].shape),
                               _unbroadcast(g * v[0], v[1].shape)))
_register("matmul", _matmul_fwd, lambda g, v, o, at: (g @ v[1].T, v[0].T @ g))
_register("scale", lambda v, at: v[0] * at["c"], lambda g, v, o, at: (g * at["c"],))
_register("square", lambda v, at: v[0] * v[0], lambda g, v, o, at: (2.0 * v[0] * g,))
_register("tanh", lambda v, at: np.tanh(v[0]), lambda g, v, o, at: (g * (1.0 - o * o),))
_register("relu", lambda v, at: np.maximum(v[0], 0.0), lambda g, v, o, at: (g * (v[0] > 0),))
_register("log", lambda v, at: np.log(v[0]), lambda g, v, o, at: (g / v[0],))
_register("softmax", lambda v, at: _softmax(v[0]), _softmax_bwd)
_register("sum", _sum_fwd, _sum_bwd)
_register("clip", _clip_fwd, _clip_bwd)
_register("embed", _embed_fwd, _embed_bwd)
_register("view", _view_fwd, _view_bwd)
_register("stop_gradient", lambda v, at: v[0], lambda g, v, o, at: (None,))


class Tape:
    """Ordered record of ops. Nodes are appended in creation order, so the
    node list is always a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.output: Node | None = None
        self._evaluated = False

    def leaf(self, name: str) -> Node:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf {name!r}")
        node = Node(self, "leaf", name=name)
        self.leaves[name] = node
        return node

    def const(self, value) -> Node:
        node = Node(self, "const", attrs={"value": np.asarray(value, dtype=np.float64)})
        node.value = node.attrs["value"]
        return node

    def forward(self, leaf_values: Mapping[str, np.ndarray], output: Node | None = None):
        """Evaluate every node; returns the value of ``output`` (default: last node)."""
        missing = set(self.leaves) - set(leaf_values)
        if missing:
            raise KeyError(f"unbound leaves: {sorted(missing)}")
        for node in self.nodes:
            if node.op == "leaf":
                node.value = np.asarray(leaf_values[node.name], dtype=np.float64)
            elif node.op == "const":
                continue
            else:
                fwd, _ = _OPS[node.op]
                args = [p.value for p in node.parents]
                try:
                    node.value = fwd(args, node.attrs)
                except (ValueError, IndexError) as exc:
                    shapes = ", ".join(str(np.shape(a)) for a in args)
                    raise ShapeError(f"{node!r} rejected operands ({shapes}): {exc}") from exc
        self.output = output if output is not None else self.nodes[-1]
        self._evaluated = True
        return self.output.value

    def backward(self, seed=None, wrt: Iterable[str] | None = None,
                 output: Node | None = None) -> dict[str, np.ndarray]:
        """Reverse sweep from ``output``; returns gradients for leaves in ``wrt``.

        Nodes that do not depend on a requested leaf are skipped entirely.
        """
        if not self._evaluated:
            raise TapeStateError("backward called before forward")
        out = output if output is not None else self.output
        names = list(self.leaves) if wrt is None else list(wrt)
        targets = {self.leaves[n].index for n in names}

        live = [False] * len(self.nodes)
        for node in self.nodes:
            if node.index in targets:
                live[node.index] = True
            elif node.op != "stop_gradient":
                live[node.index] = any(live[p.index] for p in node.parents)

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        seed = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        grads[out.index] = np.broadcast_to(seed, np.shape(out.value)).astype(np.float64)

        for node in reversed(self.nodes[: out.index + 1]):
            g = grads[node.index]
            if g is None or not live[node.index] or node.op in ("leaf", "const"):
                continue
            _, bwd = _OPS[node.op]
            parent_grads = bwd(g, [p.value for p in node.parents], node.value, node.attrs)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not live[parent.index]:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg

        result = {}
        for n in names:
            leaf = self.leaves[n]
            g = grads[leaf.index]
            result[n] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.value.shape)
        return result


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _binary(op, a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    return Node(tape, op, (_lift(tape, a), _lift(tape, b)))


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def matmul(a, b):
    return _binary("matmul", a, b)


def scale(x: Node, c: float) -> Node:
    return Node(x.tape, "scale", (x,), {"c": float(c)})


def square(x: Node) -> Node:
    return Node(x.tape, "square", (x,))


def tanh(x: Node) -> Node:
    return Node(x.tape, "tanh", (x,))


def relu(x: Node) -> Node:
    return Node(x.tape, "relu", (x,))


def log(x: Node) -> Node:
    return Node(x.tape, "log", (x,))


def softmax(x: Node) -> Node:
    """Softmax over the last axis, max-shifted."""
    return Node(x.tape, "softmax", (x,))


def sum(x: Node, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    return Node(x.tape, "sum", (x,), {"axis": axis, "keepdims": keepdims})


def clip(x: Node, lo: float, hi: float) -> Node:
    return Node(x.tape, "clip", (x,), {"lo": lo, "hi": hi})


def embed(W: Node, tokens: np.ndarray) -> Node:
    """Gather columns of a (d, |V|) matrix at integer ``tokens``; output (*tokens.shape, d)."""
    return Node(W.tape, "embed", (W,), {"tokens": np.asarray(tokens, dtype=np.int64)})


def view(x: Node, start: int, stop: int, shape: tuple) -> Node:
    """Reshaped slice ``x[start:stop]`` of a flat vector."""
    return Node(x.tape, "view", (x,), {"start": start, "stop": stop, "shape": tuple(shape)})


def stop_gradient(x: Node) -> Node:
    return Node(x.tape, "stop_gradient", (x,))


def grad_check(tape: Tape, leaf: str, point: Mapping[str, np.ndarray], h: float = 1e-5,
               coords: np.ndarray | None = None, output: Node | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``point`` binds every leaf; only ``leaf`` is perturbed. ``coords`` optionally
    restricts the check to a subset of flat indices of that leaf.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    values = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    tape.forward(values, output)
    analytic = tape.backward(wrt=[leaf], output=output)[leaf].ravel()

    base = values[leaf]
    flat = base.ravel()
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for k in idx:
        bumped = flat.copy()
        bumped[k] = flat[k] + h
        f_plus = float(tape.forward({**values, leaf: bumped.reshape(base.shape)}, output))
        bumped[k] = flat[k] - h
        f_minus = float(tape.forward({**values, leaf: bumped.reshape(base.shape)}, output))
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[k] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, err)
    # leave the tape evaluated at the unperturbed point
    tape.forward(values, output)
    return worst
