"""Dense float64 tensors with tape-based reverse-mode differentiation.

All model math in this package runs through the ops defined here. Each op
computes its forward value with numpy and, when a tape is active, records a
closure that maps the output gradient to input gradients. ``backward`` walks
the tape once, in reverse, from a scalar root.

Shape convention: arbitrary N-d arrays. Elementwise ops follow numpy
broadcasting (gradients are summed back over broadcast axes); reductions,
``masked_softmax`` and ``layer_norm`` act on explicit axes; ``matmul``
contracts the last two axes with batched leading dimensions.
"""

from __future__ import annotations

import math
import threading

import numpy as np

# Additive-mask sentinel standing in for -inf. Large enough that exp()
# underflows to exactly 0 after max-subtraction, small enough to avoid
# inf - inf = NaN when a whole row is masked and we need to detect it.
MASK_BLOCKED = -1e30
_MASK_THRESHOLD = -1e29


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError):
    """Operands do not conform."""


class NumericError(TensorError):
    """A non-finite value appeared where the contract forbids it."""


class DegenerateMaskError(TensorError):
    """Every position of a softmax row is masked."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    Tensors are treated as immutable while a tape is recording; parameter
    updates rebind ``.data`` between training steps (single writer).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are promoted to untracked tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Tape:
    """Ordered record of executed ops for one forward/backward episode.

    A tape is confined to the thread that opened it. Entries are
    (output, inputs, backward_fn) where backward_fn maps the output
    gradient to one gradient per input (None for untracked inputs).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(root)/d(leaf) for every tracked leaf on this tape.

        ``root`` must be scalar. Returns a map from parameter tensors
        (requires_grad leaves) to their gradient arrays, and assigns each
        parameter's ``.grad`` (overwriting, one buffer per pass).
        """
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        output_ids = {id(out) for out, _, _ in self._entries}
        for out, inputs, backward_fn in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                acc = grads.get(id(inp))
                if acc is None:
                    # Copy: backward closures may hand back views or the
                    # upstream gradient itself, and we accumulate in place.
                    grads[id(inp)] = np.array(gi)
                else:
                    acc += gi
        result: dict[Tensor, np.ndarray] = {}
        seen: set[int] = set()
        for _, inputs, _ in self._entries:
            for inp in inputs:
                if (
                    inp.requires_grad
                    and id(inp) not in output_ids
                    and id(inp) not in seen
                ):
                    seen.add(id(inp))
                    grad = grads.get(id(inp))
                    if grad is None:
                        grad = np.zeros_like(inp.data)
                    inp.grad = grad
                    result[inp] = grad
        return result


_local = threading.local()


def _push_tape(tape: Tape) -> None:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(tape)


def _pop_tape(tape: Tape) -> None:
    stack = _local.stack
    if not stack or stack[-1] is not tape:
        raise RuntimeError("tape stack corrupted; tapes must nest")
    stack.pop()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode accumulation on the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise TensorError("backward called with no active tape")
    return tape.backward(root)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def bwd(g):
        return (g * c if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        return (g * data if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / data) if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - data * data) if a.requires_grad else None,)

    return _make(data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner),)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def bwd(g):
        return (np.transpose(g, inverse) if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape) if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            p if t.requires_grad else None for p, t in zip(pieces, tensors)
        )

    return _make(data, tuple(tensors), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = a.data[index]

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(data, (a,), bwd)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.broadcast_to(a.data, shape)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table by an integer index array (embedding lookup)."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        if not table.requires_grad:
            return (None,)
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(data, (table,), bwd)


def take_positions(a: Tensor, positions: np.ndarray) -> Tensor:
    """Pick one row per batch item: out[i] = a[i, positions[i], :]."""
    positions = np.asarray(positions)
    batch = np.arange(a.shape[0])
    data = a.data[batch, positions]

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[batch, positions] = g
        return (full,)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.shape).copy() if a.requires_grad else None,)

    return _make(data, (a,), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), bwd)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis (max shift treated as constant)."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(total), axis=axis)
    softmax = shifted / total

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        return (np.expand_dims(g, axis) * softmax,)

    return _make(data, (a,), bwd)


def masked_softmax(logits: Tensor, mask: Tensor | np.ndarray) -> Tensor:
    """Softmax over the last axis with an additive {0, MASK_BLOCKED} mask.

    Masked positions come out exactly 0 and the unmasked positions sum to 1.
    Raises DegenerateMaskError when a row has no surviving position. The mask
    is a constant: no gradient flows into it.
    """
    mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    blocked = mask_data <= _MASK_THRESHOLD
    masked_logits = np.where(blocked, MASK_BLOCKED, logits.data + mask_data)
    m = masked_logits.max(axis=-1, keepdims=True)
    if np.any(m <= _MASK_THRESHOLD):
        raise DegenerateMaskError("softmax row with every position masked")
    e = np.exp(masked_logits - m)
    e = np.where(np.broadcast_to(blocked, e.shape), 0.0, e)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if not logits.requires_grad:
            return (None,)
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (_unbroadcast(data * (g - inner), logits.shape),)

    return _make(data, (logits,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(data, (x, gain, bias), bwd)


def check_finite(t: Tensor, label: str = "tensor") -> Tensor:
    """Raise NumericError if any entry is NaN/Inf; identity otherwise."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {label}")
    return t


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    step: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Compare tape gradients with central finite differences.

    ``loss_fn`` takes no arguments, reads ``params`` and returns a scalar
    Tensor; it must be deterministic. Returns (max_relative_error, details)
    where details lists per-parameter worst coordinates as
    (name, flat_index, analytic, numeric, relative_error).
    """
    with Tape() as tape:
        loss = loss_fn()
        if not np.isfinite(loss.data):
            raise NumericError("loss is non-finite at the evaluation point")
        grads = tape.backward(loss)

    details = []
    worst = 0.0
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst_here = (name, -1, 0.0, 0.0, 0.0)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = loss_fn().item()
            flat[idx] = orig - step
            f_minus = loss_fn().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = analytic.reshape(-1)[idx]
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            if rel >= worst_here[4]:
                worst_here = (name, int(idx), float(ana), float(numeric), float(rel))
        details.append(worst_here)
        worst = max(worst, worst_here[4])
    return worst, details
