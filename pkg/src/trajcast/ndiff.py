"""Minimal reverse-mode differentiation over dense float64 matrices.

The engine is define-by-run: each primitive computes its forward value
immediately and records a backward rule on the returned :class:`Node`.
``backward`` replays the reachable subgraph in reverse creation order,
accumulating gradients, so a parameter used at every step of an unrolled
recurrence receives the sum of all its per-step contributions.

Everything is a 2-D float64 matrix. Scalars are 1x1, batches of vectors are
(batch, dim). There is deliberately no broadcasting beyond the explicit
``rowwise_broadcast_add`` primitive; shape mismatches fail loudly with the
offending primitive named.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping

import numpy as np

from .containers import PARAMS_TAG, read_container, write_container
from .errors import NumericalError, ShapeError

_IDS = itertools.count()


class Node:
    """One matrix in the computation graph.

    ``value`` is the forward result, ``grad`` the accumulator filled in by
    :func:`backward`. ``_idx`` is the creation counter; creation order is a
    valid topological order because operands always exist before the result.
    """

    __slots__ = ("value", "grad", "op", "parents", "_bwd", "_idx")

    def __init__(self, value, op: str = "leaf", parents: tuple = (),
                 bwd: Callable[[np.ndarray], None] | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise ShapeError(f"{op}: nodes hold 2-D matrices, got shape {value.shape}")
        self.value = value
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._bwd = bwd
        self._idx = next(_IDS)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def constant(value) -> Node:
    """Wrap a plain array as a leaf; its gradient is computed but unused."""
    return Node(value, op="const")


def _check_same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions of {a.value.shape} and {b.value.shape} differ"
        )
    out = Node(a.value @ b.value, op="matmul", parents=(a, b))

    def bwd(g: np.ndarray) -> None:
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._bwd = bwd
    return out


def add(a: Node, b: Node) -> Node:
    _check_same_shape("add", a, b)
    out = Node(a.value + b.value, op="add", parents=(a, b))

    def bwd(g: np.ndarray) -> None:
        a.grad += g
        b.grad += g

    out._bwd = bwd
    return out


def subtract(a: Node, b: Node) -> Node:
    _check_same_shape("subtract", a, b)
    out = Node(a.value - b.value, op="subtract", parents=(a, b))

    def bwd(g: np.ndarray) -> None:
        a.grad += g
        b.grad -= g

    out._bwd = bwd
    return out


def multiply(a: Node, b: Node) -> Node:
    _check_same_shape("multiply", a, b)
    out = Node(a.value * b.value, op="multiply", parents=(a, b))

    def bwd(g: np.ndarray) -> None:
        a.grad += g * b.value
        b.grad += g * a.value

    out._bwd = bwd
    return out


def rowwise_broadcast_add(a: Node, b: Node) -> Node:
    """Add a 1xN row vector to every row of an MxN matrix."""
    if b.value.shape != (1, a.value.shape[1]):
        raise ShapeError(
            f"rowwise_broadcast_add: row {b.value.shape} does not broadcast "
            f"over {a.value.shape}"
        )
    out = Node(a.value + b.value, op="rowwise_broadcast_add", parents=(a, b))

    def bwd(g: np.ndarray) -> None:
        a.grad += g
        b.grad += g.sum(axis=0, keepdims=True)

    out._bwd = bwd
    return out


def sigmoid(a: Node) -> Node:
    v = a.value
    out_val = np.empty_like(v)
    pos = v >= 0
    out_val[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_val[~pos] = ev / (1.0 + ev)
    out = Node(out_val, op="sigmoid", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        a.grad += g * out_val * (1.0 - out_val)

    out._bwd = bwd
    return out


def tanh(a: Node) -> Node:
    out_val = np.tanh(a.value)
    out = Node(out_val, op="tanh", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        a.grad += g * (1.0 - out_val * out_val)

    out._bwd = bwd
    return out


def log(a: Node) -> Node:
    out = Node(np.log(a.value), op="log", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        a.grad += g / a.value

    out._bwd = bwd
    return out


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes only where not clamped."""
    out_val = np.clip(a.value, lo, hi)
    out = Node(out_val, op="clip", parents=(a,))
    inside = (a.value > lo) & (a.value < hi)

    def bwd(g: np.ndarray) -> None:
        a.grad += g * inside

    out._bwd = bwd
    return out


def scale(a: Node, c: float) -> Node:
    out = Node(a.value * c, op="scale", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        a.grad += g * c

    out._bwd = bwd
    return out


def concat_columns(a: Node, b: Node) -> Node:
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(
            f"concat_columns: row counts of {a.value.shape} and {b.value.shape} differ"
        )
    p = a.value.shape[1]
    out = Node(np.hstack((a.value, b.value)), op="concat_columns", parents=(a, b))

    def bwd(g: np.ndarray) -> None:
        a.grad += g[:, :p]
        b.grad += g[:, p:]

    out._bwd = bwd
    return out


def select_columns(a: Node, cols) -> Node:
    cols = np.asarray(cols, dtype=np.intp)
    if cols.ndim != 1 or (cols.size and (cols.min() < 0 or cols.max() >= a.value.shape[1])):
        raise ShapeError(
            f"select_columns: column index out of range for shape {a.value.shape}"
        )
    out = Node(a.value[:, cols], op="select_columns", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        # np.add.at handles repeated column indices correctly
        np.add.at(a.grad, (slice(None), cols), g)

    out._bwd = bwd
    return out


def sum_all(a: Node) -> Node:
    out = Node(np.array([[a.value.sum()]]), op="sum", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        a.grad += g[0, 0]

    out._bwd = bwd
    return out


def mean_over(a: Node, mask: np.ndarray) -> Node:
    """Mean of the entries selected by a {0,1} mask; 0 if the mask is empty."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.value.shape:
        raise ShapeError(
            f"mean_over: mask shape {mask.shape} does not match {a.value.shape}"
        )
    count = mask.sum()
    val = (a.value * mask).sum() / count if count > 0 else 0.0
    out = Node(np.array([[val]]), op="mean_over", parents=(a,))

    def bwd(g: np.ndarray) -> None:
        if count > 0:
            a.grad += g[0, 0] * mask / count

    out._bwd = bwd
    return out


def backward(output: Node) -> None:
    """Populate ``grad`` on every node reachable from a scalar output.

    Gradients are reset on each call; repeated uses of a node inside one
    graph accumulate by summation, as required when a parameter appears at
    every step of an unrolled recurrence.
    """
    if output.value.shape != (1, 1):
        raise ShapeError(f"backward: output must be 1x1, got {output.value.shape}")
    nodes = [output]
    seen = {id(output)}
    stack = [output]
    while stack:
        node = stack.pop()
        for parent in node.parents:
            if id(parent) not in seen:
                seen.add(id(parent))
                nodes.append(parent)
                stack.append(parent)
    nodes.sort(key=lambda n: n._idx, reverse=True)
    for node in nodes:
        node.grad = np.zeros_like(node.value)
    output.grad[0, 0] = 1.0
    for node in nodes:
        if node._bwd is not None:
            node._bwd(node.grad)


def gradient_of(leaf: Node) -> np.ndarray:
    """Gradient populated by backward; exact zeros for an unreachable leaf."""
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)


class ParamStore:
    """Named parameter matrices with a canonical flat-vector view.

    The canonical ordering is lexicographic by name; ``flatten`` and
    ``set_flat`` are exact inverses. ``leaf_nodes`` wraps the live arrays
    (no copy), so mutating a stored array is visible to subsequently built
    graphs -- this is what the finite-difference checker relies on.
    """

    def __init__(self, params: Mapping[str, np.ndarray]):
        self._params: dict[str, np.ndarray] = {}
        for name in sorted(params):
            arr = np.array(params[name], dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            if arr.ndim != 2:
                raise ShapeError(f"parameter {name!r} must be 2-D, got {arr.shape}")
            self._params[name] = arr

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {name: arr.shape for name, arr in self._params.items()}

    @property
    def n_params(self) -> int:
        return sum(arr.size for arr in self._params.values())

    def get(self, name: str) -> np.ndarray:
        return self._params[name]

    def set(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._params[name].shape:
            raise ShapeError(
                f"parameter {name!r} has shape {self._params[name].shape}, "
                f"cannot assign {arr.shape}"
            )
        self._params[name] = arr.copy()

    def leaf_nodes(self) -> dict[str, Node]:
        return {name: Node(arr, op="param") for name, arr in self._params.items()}

    def flatten(self) -> np.ndarray:
        return np.concatenate([self._params[n].ravel() for n in self.names])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"flat vector must have shape ({self.n_params},)")
        offset = 0
        for name in self.names:
            arr = self._params[name]
            arr[...] = vec[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def copy(self) -> "ParamStore":
        return ParamStore({n: a.copy() for n, a in self._params.items()})

    def to_payload(self) -> dict:
        return {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in self._params.items()
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ParamStore":
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload.items()
        }
        return cls(params)

    def save(self, path) -> None:
        write_container(path, PARAMS_TAG, self.to_payload())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_payload(read_container(path, PARAMS_TAG))


def grad_check(loss_fn: Callable[[Mapping[str, Node]], Node],
               store: ParamStore, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` builds a fresh scalar graph from a dict of parameter leaves.
    Returns the maximum relative error |a - n| / max(1e-8, |a| + |n|) over
    every parameter coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = store.leaf_nodes()
    out = loss_fn(leaves)
    backward(out)
    analytic = np.concatenate([gradient_of(leaves[n]).ravel() for n in store.names])

    def evaluate(coord: str) -> float:
        val = float(loss_fn(store.leaf_nodes()).value[0, 0])
        if not np.isfinite(val):
            raise NumericalError(f"non-finite loss while probing {coord}")
        return val

    numeric = np.empty_like(analytic)
    pos = 0
    for name in store.names:
        flat = store.get(name).ravel()
        for i in range(flat.size):
            coord = f"{name}[{i}]"
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate(coord)
            flat[i] = orig - eps
            f_minus = evaluate(coord)
            flat[i] = orig
            numeric[pos] = (f_plus - f_minus) / (2.0 * eps)
            pos += 1

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def sum_nodes(nodes: Iterable[Node]) -> Node:
    """Left fold of ``add`` over a nonempty sequence of same-shape nodes."""
    it = iter(nodes)
    total = next(it)
    for node in it:
        total = add(total, node)
    return total
