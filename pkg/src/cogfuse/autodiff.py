"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A :class:`Tape` records every primitive operation that touches a
grad-enabled tensor, in execution order, together with a closure that maps
the output gradient back onto the operands.  Because operands must exist
before the operation that consumes them, the record list is already a
topological order; :func:`backward` walks it once in reverse.

Rules of the road:

* exactly one tape may be active at a time (``with Tape(): ...``),
* tensors are never mutated by operations; only the optimizer writes to
  parameter storage, between steps,
* gradients of leaf tensors (parameters) accumulate across ``backward``
  calls until cleared with :func:`zero_grad`,
* broadcasting is restricted to the two cases the model layers need:
  a trailing bias vector added to a higher-rank tensor, and a 2-d matrix
  shared across the leading axes of a stacked matmul.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    GraphError,
    InvalidValueError,
    MissingNodeError,
)

_STATE = threading.local()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive operations for one forward/backward pass."""

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise GraphError("a tape is already active; one tape per step")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None
        # Node ids are tape-scoped; clearing them keeps stale intermediates
        # from masquerading as recorded nodes on a later tape.
        for out, _, _ in self._records:
            out.node_id = None

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """Immutable view of a float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "grad_enabled", "node_id")

    def __init__(self, data, grad_enabled: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.grad_enabled = bool(grad_enabled)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis=axis)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        return reshape(self, shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    out.grad_enabled = any(p.grad_enabled for p in parents)
    tape = _active_tape()
    if tape is not None and out.grad_enabled:
        out.node_id = len(tape._records)
        tape._records.append((out, parents, vjp))
    return out


def _add_grad(t: Tensor, g: np.ndarray, flows: dict[int, np.ndarray]) -> None:
    if not t.grad_enabled:
        return
    if t.node_id is None:  # leaf: persistent accumulation
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g
    else:
        buf = flows.get(id(t))
        if buf is None:
            flows[id(t)] = np.array(g, dtype=np.float64)
        else:
            buf += g


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every grad-enabled leaf on the active tape.

    Returns a map from leaf tensor to its (accumulated) gradient.  Leaves
    that participated in the taped computation but do not influence the
    loss receive a zero gradient.  Calling again without :func:`zero_grad`
    adds another d(loss)/d(leaf) on top.
    """
    tape = _active_tape()
    if tape is None or loss.node_id is None:
        raise MissingNodeError("loss was not produced on the active tape")
    if loss.data.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")

    records = tape._records[: loss.node_id + 1]
    leaves: dict[int, Tensor] = {}
    for _, parents, _ in records:
        for p in parents:
            if p.grad_enabled and p.node_id is None:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                leaves[id(p)] = p

    flows: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for out, _, vjp in reversed(records):
        g = flows.pop(id(out), None)
        if g is None:
            continue
        vjp(g, flows)
    return {t: t.grad for t in leaves.values()}


def zero_grad(params: Iterable[Tensor]) -> None:
    """Clear accumulated gradients."""
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing bias vector."""
    if a.shape != b.shape and b.shape != a.shape[-1:]:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    bias = b.shape != a.shape

    def vjp(g, flows):
        _add_grad(a, g, flows)
        gb = g.reshape(-1, b.shape[-1]).sum(axis=0) if bias else g
        _add_grad(b, gb, flows)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, flows):
        _add_grad(a, g, flows)
        _add_grad(b, -g, flows)

    return _make(a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g, flows):
        _add_grad(a, -g, flows)

    return _make(-a.data, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, flows):
        _add_grad(a, g * b.data, flows)
        _add_grad(b, g * a.data, flows)

    return _make(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g, flows):
        _add_grad(a, g * s, flows)

    return _make(a.data * s, (a,), vjp)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _reduce_leading(g: np.ndarray, target_ndim: int) -> np.ndarray:
    while g.ndim > target_ndim:
        g = g.sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match exactly; alternatively either operand may be a
    plain 2-d matrix shared across the other's leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must have ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim != 2 and b.ndim != 2:
        raise DimensionError(f"matmul: leading axes differ, {a.shape} @ {b.shape}")

    def vjp(g, flows):
        if a.grad_enabled:
            _add_grad(a, _reduce_leading(g @ _swap(b.data), a.ndim), flows)
        if b.grad_enabled:
            if b.ndim == 2 and g.ndim > 2:
                # A^T g summed over the leading axes, flattened into one product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_leading(_swap(a.data) @ g, b.ndim)
            _add_grad(b, gb, flows)

    return _make(a.data @ b.data, (a, b), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    def vjp(g, flows):
        _add_grad(a, np.broadcast_to(g, a.shape).copy(), flows)

    return _make(a.data.sum(), (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over one axis, or over all entries when ``axis`` is None."""
    if axis is None:
        n = a.data.size

        def vjp(g, flows):
            _add_grad(a, np.full(a.shape, g / n), flows)

        return _make(a.data.mean(), (a,), vjp)

    ax = axis if axis >= 0 else a.ndim + axis
    n = a.shape[ax]

    def vjp(g, flows):
        _add_grad(a, np.repeat(np.expand_dims(g / n, ax), n, axis=ax), flows)

    return _make(a.data.mean(axis=ax), (a,), vjp)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise InvalidValueError(f"{op}: input contains NaN or infinity")


def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, shift-stabilized."""
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, flows):
        _add_grad(a, y * (g - (g * y).sum(axis=-1, keepdims=True)), flows)

    return _make(y, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g, flows):
        _add_grad(a, g - sm * g.sum(axis=-1, keepdims=True), flows)

    return _make(out, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine parameters {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g, flows):
        if gamma.grad_enabled:
            _add_grad(gamma, (g * xhat).reshape(-1, d).sum(axis=0), flows)
        if beta.grad_enabled:
            _add_grad(beta, g.reshape(-1, d).sum(axis=0), flows)
        if a.grad_enabled:
            gx = g * gamma.data
            ga = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _add_grad(a, ga, flows)

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_cdf

    def vjp(g, flows):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _add_grad(a, g * (phi_cdf + x * pdf), flows)

    return _make(out, (a,), vjp)


def row_unit(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if (norms == 0.0).any():
        raise DegenerateInputError("row_unit: zero-norm row has no direction")
    y = a.data / norms

    def vjp(g, flows):
        _add_grad(a, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norms, flows)

    return _make(y, (a,), vjp)


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"swap_last: need ndim >= 2, got shape {a.shape}")

    def vjp(g, flows):
        _add_grad(a, _swap(g), flows)

    return _make(_swap(a.data).copy(), (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def vjp(g, flows):
        _add_grad(a, g.reshape(a.shape), flows)

    return _make(a.data.reshape(shape), (a,), vjp)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(parts)
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise DimensionError(
            f"concat_last: leading axes differ, {[p.shape for p in parts]}"
        )
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g, flows):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _add_grad(p, g[..., lo:hi], flows)

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, vjp)


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` of the last axis."""
    if not (0 <= start < stop <= a.shape[-1]):
        raise DimensionError(f"take_last: [{start}:{stop}] out of range for width {a.shape[-1]}")

    def vjp(g, flows):
        if a.grad_enabled:
            ga = np.zeros_like(a.data)
            ga[..., start:stop] = g
            _add_grad(a, ga, flows)

    return _make(a.data[..., start:stop].copy(), (a,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``;
    ``f`` must be deterministic and must produce a scalar.
    """
    if not x.grad_enabled:
        raise ContractError("grad_check: x must be grad-enabled")
    saved_grad = x.grad
    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    analytic = np.array(x.grad, dtype=np.float64)
    x.grad = saved_grad

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
