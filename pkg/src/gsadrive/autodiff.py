"""Minimal reverse-mode automatic differentiation over dense 2-D float64 arrays.

A :class:`Tape` records every operation applied to its :class:`Var` handles in
creation order, which is already a topological order.  :meth:`Tape.backward`
sweeps that list in reverse and accumulates gradients into the
:class:`Param` objects that were bound to the tape.

Only the operations the driving models need are provided.  Every op takes and
returns ``Var`` objects living on the same tape; values are plain 2-D
``numpy.ndarray`` instances of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


def as_tensor2(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class Param:
    """A named trainable array whose gradient persists across tapes."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = as_tensor2(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray) -> None:
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 value, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Backward | None = None
    param: Param | None = None


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    _bound: dict[int, Var] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op: str,
        value: np.ndarray,
        inputs: Sequence[Var] = (),
        backward: Backward | None = None,
        param: Param | None = None,
    ) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ContractError(f"{op}: operand belongs to a different tape")
        node = _Node(op, tuple(v.id for v in inputs), value, backward, param)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, value)

    def const(self, value) -> Var:
        return self.record("const", as_tensor2(value))

    def param(self, p: Param) -> Var:
        """Bind ``p`` to this tape; repeated binds return the same node."""
        var = self._bound.get(id(p))
        if var is None:
            var = self.record("param", p.value, param=p)
            self._bound[id(p)] = var
        return var

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(param) into every bound parameter.

        Returns the gradient of every node, keyed by node id; nodes that do
        not reach the loss get zeros.
        """
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.id] = np.ones((1, 1))
        for i in range(loss.id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.param is not None:
                node.param.grad += g
            if node.backward is None:
                continue
            for src, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if grads[src] is None:
                    grads[src] = gi
                else:
                    grads[src] = grads[src] + gi
        return {
            i: (g if g is not None else np.zeros_like(self.nodes[i].value))
            for i, g in enumerate(grads)
        }


def _check_same_shape(op: str, a: Var, b: Var) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _matmul_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    return g @ b.T, a.T @ g


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record(
        "matmul", av @ bv, (a, b), lambda g: _matmul_backward(av, bv, g)
    )


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def add(a: Var, b: Var) -> Var:
    _check_same_shape("add", a, b)
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def add_row(a: Var, row: Var) -> Var:
    """Add a 1xn row vector to every row of an mxn matrix (bias)."""
    if row.shape[0] != 1 or row.shape[1] != a.shape[1]:
        raise ShapeError(f"add_row: cannot add {row.shape} to rows of {a.shape}")
    return a.tape.record(
        "add_row", a.value + row.value, (a, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def mul_col(a: Var, col: Var) -> Var:
    """Scale row i of ``a`` by ``col[i, 0]``."""
    if col.shape != (a.shape[0], 1):
        raise ShapeError(f"mul_col: column {col.shape} does not match rows of {a.shape}")
    av, cv = a.value, col.value
    return a.tape.record(
        "mul_col", av * cv, (a, col),
        lambda g: (g * cv, (g * av).sum(axis=1, keepdims=True)),
    )


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    s = _sigmoid(a.value)
    return a.tape.record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax_rows(x: Var, scale: float = 1.0) -> Var:
    """Row-wise softmax of ``x / scale``."""
    if not scale > 0:
        raise ContractError(f"softmax_rows: scale must be positive, got {scale}")
    z = x.value / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner) / scale,)

    return x.tape.record("softmax_rows", p, (x,), backward)


def concat_cols(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ContractError("concat_cols: need at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ ({[q.shape for q in parts]})"
            )
    if len(parts) == 1:
        return parts[0]
    edges = np.cumsum([0] + [p.shape[1] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=1)
    return parts[0].tape.record(
        "concat_cols", value, tuple(parts),
        lambda g: [g[:, edges[i]:edges[i + 1]] for i in range(len(parts))],
    )


def stack_rows(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ContractError("stack_rows: need at least one part")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(
                f"stack_rows: column counts differ ({[q.shape for q in parts]})"
            )
    if len(parts) == 1:
        return parts[0]
    edges = np.cumsum([0] + [p.shape[0] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=0)
    return parts[0].tape.record(
        "stack_rows", value, tuple(parts),
        lambda g: [g[edges[i]:edges[i + 1]] for i in range(len(parts))],
    )


def flatten(a: Var) -> Var:
    """Row-major reshape of an mxn matrix into a 1x(m*n) row."""
    shape = a.shape
    return a.tape.record(
        "flatten", a.value.reshape(1, -1), (a,), lambda g: (g.reshape(shape),)
    )


def mean_rows(a: Var) -> Var:
    n = a.shape[0]
    return a.tape.record(
        "mean_rows", a.value.mean(axis=0, keepdims=True), (a,),
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


def take_rows(a: Var, index: Sequence[int]) -> Var:
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g: np.ndarray):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record("take_rows", a.value[idx], (a,), backward)


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape.record(
        "sum_all", np.array([[a.value.sum()]]), (a,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def bce(p: Var, y, eps: float = 1e-12) -> Var:
    """Mean binary cross entropy of probabilities ``p`` against 0/1 targets ``y``.

    Probabilities are clamped to ``[eps, 1 - eps]``; the clamp passes zero
    gradient outside that interval.
    """
    y = as_tensor2(y)
    if y.shape != p.shape:
        raise ContractError(f"bce: target shape {y.shape} != probability shape {p.shape}")
    n = y.size
    pc = np.clip(p.value, eps, 1.0 - eps)
    inside = (p.value >= eps) & (p.value <= 1.0 - eps)
    terms = y * np.log(pc) + (1.0 - y) * np.log1p(-pc)
    value = np.array([[-terms.sum() / n]])

    def backward(g: np.ndarray):
        d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        return (g[0, 0] * d * inside,)

    return p.tape.record("bce", value, (p,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [name for name, e in self.errors.items() if e > self.tol]

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(
    build: Callable[[Tape], Var],
    params: Iterable[Param],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central differences for every element.

    ``build`` must construct the scalar loss on the given tape from the
    current values of ``params``.
    """
    if not step > 0:
        raise ContractError(f"grad_check: step must be positive, got {step}")
    params = list(params)
    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(build(tape))
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad[...] = g

    errors: dict[str, float] = {}
    for p, a in zip(params, analytic):
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = build(Tape()).item()
            flat[j] = orig - step
            down = build(Tape()).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2.0 * step)
        errors[p.name] = relative_error(a, numeric, floor)
    return GradCheckReport(errors, tol)
