"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the knowledge-tracing model are provided.
Every op returns a new :class:`Tensor`; when any input requires a gradient the
output keeps a reference to its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` orders the reachable ops
topologically (the tape) and sweeps it once in reverse.

Randomness goes through :func:`make_rng`, which wraps NumPy's PCG64 bit
generator seeded by a ``SeedSequence`` built from ``(seed, *stream_keys)``.
Appending a key gives an independent child stream, so a run can hand one
stream to shuffling and another to dropout without the two interacting.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

MAX_RANK = 3


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class EmptyContextError(ValueError):
    """A masked softmax row had no unmasked entry."""


class Tensor:
    """A float64 array that may take part in gradient computation.

    ``data`` is a C-ordered (row-major) ndarray. ``grad`` is ``None`` until a
    backward pass reaches the tensor, after which it has the same shape as
    ``data`` and accumulates across passes until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    t = Tensor(out, _check=False)
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with NumPy broadcasting."""
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        "concat",
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _make(a.data[..., start:stop].copy(), "take_last", (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return _make(
        np.ascontiguousarray(np.swapaxes(a.data, -1, -2)),
        "transpose",
        (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup ``table[index]``; ``index`` is an integer array."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range [0, {table.shape[0]}) "
            f"(got min {index.min()}, max {index.max()})"
        )

    def back(g):
        out = np.zeros(table.shape)
        np.add.at(out, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(table.data[index], "gather_rows", (table,), back)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports ``[m,k]@[k,n]``, ``[B,m,k]@[k,n]`` and ``[B,m,k]@[B,k,n]``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.data.ndim == 3 and (a.data.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    if a.data.ndim == 2 and b.data.ndim == 3:
        raise ShapeError("matmul: [m,k] @ [B,k,n] is not supported")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim == 3:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def softmax_masked(logits: Tensor, mask: np.ndarray, empty: str = "raise") -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries get probability exactly 0. A row with no unmasked entry
    raises :class:`EmptyContextError`, unless ``empty="zero"``, in which case
    the whole row is 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        mask = np.broadcast_to(mask, logits.shape)
    any_row = mask.any(axis=-1, keepdims=True)
    if empty == "raise" and not any_row.all():
        raise EmptyContextError("softmax over an empty context")
    if empty not in ("raise", "zero"):
        raise ValueError(f"unknown empty-row policy {empty!r}")
    z = np.where(mask, logits.data, -np.inf)
    row_max = np.where(any_row, z.max(axis=-1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(z - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    probs = e / np.where(any_row, denom, 1.0)

    def back(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _make(probs, "softmax_masked", (logits,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an elementwise affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def back(g):
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), back)


def bce_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Summed binary cross-entropy on logits over positions where ``mask`` holds.

    Uses ``max(x, 0) - x*r + log1p(exp(-|x|))``, which stays finite for any
    finite logit.
    """
    r = np.asarray(targets, dtype=np.float64)
    if r.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {r.shape} vs logits {logits.shape}")
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: mask {mask.shape} vs logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * r + np.log1p(np.exp(-np.abs(x)))
    loss = np.where(mask, per, 0.0).sum()
    w = mask.astype(np.float64)
    return _make(np.asarray(loss), "bce_with_logits", (logits,), lambda g: (g * w * (expit(x) - r),))


# ---------------------------------------------------------------------------
# reverse sweep


def build_tape(root: Tensor) -> list[Tensor]:
    """Ops reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf needing it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# randomness and checking helpers


def _stream_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional stream path.

    String keys are mapped through CRC-32 so ``make_rng(42, "dropout", 3)`` is
    stable across platforms and Python hash seeds.
    """
    entropy = [_stream_key(seed), *(_stream_key(k) for k in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def finite_difference_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max |a - n|`` scaled by the larger of ``max |a|`` and ``max |n|``.

    Normalising by the array's scale rather than per element keeps entries
    whose true gradient is ~0 from turning finite-difference round-off into a
    spurious large ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), np.finfo(np.float64).tiny)
    return float(np.abs(a - n).max() / scale)
