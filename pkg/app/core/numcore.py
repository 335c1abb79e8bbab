"""
Dense float32 tensors with tape-based reverse-mode differentiation.

Ops only record onto a tape while one is active (``with GradTape() as tape``)
and at least one input is tracked, so plain forward passes build no graph.
Every op rejects non-finite results.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from app.core.errors import NumericFault, ShapeError, TapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DTYPE = np.float32
_TAPES: List["GradTape"] = []

GELU_C = math.sqrt(2.0 / math.pi)


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Evaluate ops in float64 (used by the finite-difference oracle)"""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = previous


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite value produced by {op}")


class Tensor:
    """Immutable dense tensor in row-major order"""

    __slots__ = ("_data", "name", "requires_grad", "__weakref__")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        op: str = "tensor",
    ):
        arr = np.array(data, dtype=_DTYPE, order="C")
        _check_finite(arr, op)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values"""
        return np.array(self._data)

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape}{label}>"

    # Operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor whose values may be replaced by an optimizer"""

    __slots__ = ()

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name, op=f"parameter {name}")

    def assign(self, values: ArrayLike) -> None:
        """Replace values in place of identity; shape must not change"""
        arr = np.array(values, dtype=np.float32, order="C")
        if arr.shape != self.shape:
            raise ShapeError(f"assign to {self.name}: {arr.shape} != {self.shape}")
        _check_finite(arr, f"assign {self.name}")
        arr.flags.writeable = False
        self._data = arr


GradientMap = Dict[Tensor, np.ndarray]


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class GradTape:
    """
    Records ops executed inside its context for one backward pass.

    With ``auto_watch`` any tensor flagged ``requires_grad`` becomes a leaf on
    first use; otherwise only explicitly watched tensors are differentiated.
    ``GradTape.constructed`` counts every tape ever created in the process.
    """

    constructed = 0

    def __init__(self, auto_watch: bool = True):
        GradTape.constructed += 1
        self.auto_watch = auto_watch
        self._nodes: List[_Node] = []
        self._tracked: Dict[int, Tensor] = {}
        self._leaves: Dict[int, Tensor] = {}
        self._grads: Dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        """Track tensors as differentiable leaves"""
        for t in tensors:
            self._tracked[id(t)] = t
            self._leaves[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        if id(t) in self._tracked:
            return True
        if self.auto_watch and t.requires_grad:
            self.watch(t)
            return True
        return False

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a consumed tape")
        self._nodes.append(_Node(op, output, inputs, backward))
        self._tracked[id(output)] = output

    @property
    def n_ops(self) -> int:
        return len(self._nodes)

    def backward(self, output: Tensor, seed_grad: Optional[ArrayLike] = None) -> GradientMap:
        """
        Replay the tape in reverse and return gradients of every tracked leaf

        Args:
            output: Tensor produced on this tape
            seed_grad: Upstream gradient, defaults to ones for a scalar output

        Returns:
            Map from leaf tensor to gradient array of the leaf's shape
        """
        if self._consumed:
            raise TapeError("tape already consumed")
        if seed_grad is None:
            if output.size != 1:
                raise TapeError(f"seed gradient required for output of shape {output.shape}")
            seed = np.ones(output.shape, dtype=output.data.dtype)
        else:
            seed = np.asarray(seed_grad, dtype=output.data.dtype)
            if seed.shape != output.shape:
                raise TapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        self._consumed = True
        self._grads = {id(output): seed}

        for node in reversed(self._nodes):
            g = self._grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in self._grads:
                    self._grads[key] = self._grads[key] + gi
                else:
                    self._grads[key] = gi
        result: GradientMap = {}
        for key, leaf in self._leaves.items():
            g = self._grads.get(key)
            if g is None:
                g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
            _check_finite(g, f"gradient of {leaf.name or 'leaf'}")
            result[leaf] = g
        self._nodes.clear()
        return result


def _active_tape() -> Optional[GradTape]:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="constant")


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor(data, op=op)
    tape = _active_tape()
    if tape is not None:
        tracked = [tape.is_tracked(t) for t in inputs]
        if any(tracked):
            tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result("sigmoid", s, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)

    def backward(g):
        return (g * e,)

    return _result("exp", e, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result("log", out, (x,), backward)


def gelu(x) -> Tensor:
    """GELU, tanh approximation"""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(GELU_C * (xd + 0.044715 * xd ** 3))

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result("gelu", 0.5 * xd * (1.0 + t), (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result("clip", np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------------------
# Reductions and normalization
# ---------------------------------------------------------------------------


def sum_(x, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    x = as_tensor(x)
    kept = x.data.sum(axis=axis, keepdims=True)

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept.shape), x.shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def softmax(x) -> Tensor:
    """Softmax over the last axis"""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", s, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with affine gain and bias"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def bce_with_logits(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """
    Weighted sum of per-element binary cross-entropy on sigmoid(logits)

    Targets and weights are constants broadcastable to the logits.
    """
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    w = np.asarray(weights, dtype=x.dtype)
    if t.shape != x.shape or w.shape != x.shape:
        raise ShapeError(f"bce: logits {x.shape}, targets {t.shape}, weights {w.shape}")
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * w * (expit(x) - t),)

    return _result("bce", np.asarray((w * per).sum()), (logits,), backward)


# ---------------------------------------------------------------------------
# Layout ops
# ---------------------------------------------------------------------------


def embedding(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result("embedding", table.data[idx], (table,), backward)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _result("reshape", out, (x,), backward)


def transpose(x, axes: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), backward)


def slice_seq(x, start: int, stop: int) -> Tensor:
    """Slice along the sequence axis (second to last)"""
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[-2]:
        raise ShapeError(f"slice_seq: [{start}:{stop}] outside sequence of {x.shape[-2]}")

    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[..., start:stop, :] = g
        return (grad,)

    return _result("slice", x.data[..., start:stop, :], (x,), backward)


def concat_seq(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the sequence axis (second to last)"""
    parts = tuple(as_tensor(p) for p in parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=-2)
    except ValueError as e:
        raise ShapeError(f"concat_seq: {[p.shape for p in parts]}") from e
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    return _result("concat", out, parts, backward)


def broadcast_batch(x, n: int) -> Tensor:
    """Repeat a tensor along a new leading batch axis"""
    x = as_tensor(x)

    def backward(g):
        return (g.sum(axis=0),)

    return _result("broadcast", np.broadcast_to(x.data, (n,) + x.shape), (x,), backward)


# ---------------------------------------------------------------------------
# Graph evaluation and the gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """A composed differentiable function with a declared input signature

    ``None`` in a signature entry matches any size (batch and sequence dims).
    """

    fn: Callable[..., Union[Tensor, Sequence[Tensor]]]
    signature: Sequence[Tuple[Optional[int], ...]]


def forward_eval(graph: Graph, inputs: Sequence[Tensor]) -> List[Tensor]:
    if len(inputs) != len(graph.signature):
        raise ShapeError(f"expected {len(graph.signature)} inputs, got {len(inputs)}")
    for i, (t, sig) in enumerate(zip(inputs, graph.signature)):
        shape = as_tensor(t).shape
        if len(shape) != len(sig) or any(s is not None and s != d for s, d in zip(sig, shape)):
            raise ShapeError(f"input {i}: shape {shape} does not match signature {tuple(sig)}")
    out = graph.fn(*inputs)
    return list(out) if isinstance(out, (list, tuple)) else [out]


def backward(tape: GradTape, output: Tensor, seed_grad: Optional[ArrayLike] = None) -> GradientMap:
    return tape.backward(output, seed_grad)


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: ArrayLike, eps: float = 1e-4) -> float:
    """
    Compare tape gradients against central differences

    Evaluated in float64 so the difference quotient is not swamped by rounding.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with float64_mode():
        x = Tensor(np.asarray(point, dtype=np.float64), requires_grad=True, name="point")
        with GradTape() as tape:
            y = fn(x)
        if y.size != 1:
            raise ShapeError(f"finite_diff_check needs a scalar function, got {y.shape}")
        analytic = tape.backward(y)[x].reshape(-1)

        base = np.asarray(point, dtype=np.float64).reshape(-1)
        numeric = np.empty_like(base)
        for i in range(base.size):
            hi, lo = base.copy(), base.copy()
            hi[i] += eps
            lo[i] -= eps
            f_hi = fn(Tensor(hi.reshape(x.shape))).item()
            f_lo = fn(Tensor(lo.reshape(x.shape))).item()
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                raise NumericFault(f"non-finite function value near coordinate {i}")
            numeric[i] = (f_hi - f_lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
