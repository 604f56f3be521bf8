"""Reverse-mode automatic differentiation over dense 2-D float64 tensors.

Only the operations needed by the training losses are provided. Every
operation takes and returns :class:`Tensor` objects of rank exactly two;
scalars are ``1x1`` tensors. The graph is built define-by-run: each result
that depends on a trainable input carries a :class:`Node` recording its
parents and a closure mapping the output gradient to parent gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12
LAYERNORM_EPS = 1e-5

_GELU_C = np.sqrt(2.0 / np.pi)
_sequence = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    seq: int = field(default_factory=lambda: next(_sequence))


class Tensor:
    """A 2-D grid of float64 values, optionally attached to the tape."""

    __slots__ = ("values", "requires_grad", "node", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "",
                 node: Node | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below are canonical
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def parameter(values, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(values: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, node=Node(op, tuple(parents), backward))
    return Tensor(values)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. ``b`` may be a 1xn row broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return _make(a.values + b.values, "add_row", (a, b),
                     lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"subtract: shapes {a.shape} and {b.shape} differ")
    return _make(a.values - b.values, "subtract", (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"multiply: shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values
    return _make(av * bv, "multiply", (a, b), lambda g: (g * bv, g * av))


def scalar_scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.values * s, "scale", (x,), lambda g: (g * s,))


def transpose(x: Tensor) -> Tensor:
    return _make(x.values.T.copy(), "transpose", (x,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    need_a, need_b = a.requires_grad, b.requires_grad
    return _make(av @ bv, "matmul", (a, b),
                 lambda g: (g @ bv.T if need_a else None, av.T @ g if need_b else None))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form (the Flax/JAX default)."""
    xv = x.values
    th = np.tanh(_GELU_C * (xv + 0.044715 * xv * xv * xv))

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xv * xv)
        return (g * (0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * d_inner),)

    return _make(0.5 * xv * (1.0 + th), "gelu", (x,), backward)


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {x.shape[0]} rows")
    rows = x.shape[0]

    def backward(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.values[idx], "gather_rows", (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x``, detached from the tape."""
    return Tensor(x.values, requires_grad=False)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array([[x.values.sum()]]), "sum_all", (x,),
                 lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.values.size
    return _make(np.array([[x.values.mean()]]), "mean_all", (x,),
                 lambda g: (np.full(shape, g[0, 0] / n),))


def frobenius_sq_diff(a: Tensor, b: Tensor) -> Tensor:
    """sum_ij (a_ij - b_ij)^2."""
    if a.shape != b.shape:
        raise DimensionError(f"frobenius_sq_diff: shapes {a.shape} and {b.shape} differ")
    diff = a.values - b.values
    return _make(np.array([[np.sum(diff * diff)]]), "frobenius_sq_diff", (a, b),
                 lambda g: (2.0 * g[0, 0] * diff, -2.0 * g[0, 0] * diff))


# ---------------------------------------------------------------------------
# row-wise normalizations


def row_l2_normalize(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm.

    Rows with norm below ``NORM_EPS`` are divided by ``NORM_EPS`` instead and
    receive zero gradient.
    """
    xv = x.values
    norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
    small = norms < NORM_EPS
    denom = np.where(small, NORM_EPS, norms)
    y = xv / denom

    def backward(g):
        radial = np.sum(g * y, axis=1, keepdims=True)
        return (np.where(small, 0.0, (g - radial * y) / denom),)

    return _make(y, "row_l2_normalize", (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    xv = x.values
    shifted = xv - xv.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, "log_softmax_rows", (x,),
                 lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def layernorm_rows(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Zero-mean, unit-variance rows (no learned affine)."""
    xv = x.values
    centered = xv - xv.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + eps)
    y = centered * inv_std

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = np.mean(g * y, axis=1, keepdims=True)
        return (inv_std * (g - gm - y * gy),)

    return _make(y, "layernorm_rows", (x,), backward)


def kl_rows(p_log: Tensor, q_log: Tensor) -> Tensor:
    """Per-row sum_j exp(p_j) * (p_j - q_j) as an m x 1 column.

    Both inputs are row-wise log-probabilities.
    """
    if p_log.shape != q_log.shape:
        raise DimensionError(f"kl_rows: shapes {p_log.shape} and {q_log.shape} differ")
    p = np.exp(p_log.values)
    diff = p_log.values - q_log.values
    out = np.sum(p * diff, axis=1, keepdims=True)
    return _make(out, "kl_rows", (p_log, q_log),
                 lambda g: (g * p * (diff + 1.0), -g * p))


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Operation records reachable from a root, in creation order.

    Nodes get a global sequence number when created, so sorting reachable
    nodes by it reproduces the append order of a define-by-run tape.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t.node) in seen:
                continue
            seen.add(id(t.node))
            nodes.append(t.node)
            stack.extend(t.node.parents)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable trainable leaf.

    Returns a mapping from each such leaf to its gradient array. Gradients of
    leaves are reset before accumulation, so calling ``backward`` twice on
    the same graph gives identical results.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss is not on the tape (no trainable inputs)")

    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    # gradients of intermediate results, keyed by their producing node
    node_grad: dict[int, np.ndarray] = {id(loss.node): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = node_grad.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is not None:
                key = id(parent.node)
                if key in node_grad:
                    node_grad[key] = node_grad[key] + pg
                else:
                    node_grad[key] = pg
            else:
                key = id(parent)
                leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64, copy=True)

    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = leaf.grad
    return out


def grad_of(grads: dict[Tensor, np.ndarray], t: Tensor) -> np.ndarray:
    """Gradient of ``t`` from a backward() result; zeros when unreachable."""
    g = grads.get(t)
    return np.zeros(t.shape) if g is None else g
