"""Reverse-mode automatic differentiation over numpy arrays.

Ops build a flat tape in construction order; the backward pass walks it in
reverse, so no explicit topological sort is needed.  Outside a ``Tape``
context the same functions run as plain numpy forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

_BackFn = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """A numpy array plus the edges needed to backpropagate through it."""

    __slots__ = ("data", "_parents", "_backs")

    def __init__(self, data: np.ndarray | float | Sequence) -> None:
        self.data = np.asarray(data)
        self._parents: tuple[Tensor, ...] = ()
        self._backs: tuple[_BackFn, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Records op outputs while active; computes gradients afterwards."""

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ValidationError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def gradients(self, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss for each named parameter.

        Parameters the loss never touched map to zero arrays of the
        parameter's shape.
        """
        if loss.data.size != 1:
            raise ValidationError(f"loss must be scalar, got shape {loss.data.shape}")
        if not any(node is loss for node in self._nodes):
            raise ValidationError("loss was not computed under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            out_grad = grads.pop(id(node), None)
            if out_grad is None:
                continue
            for parent, back in zip(node._parents, node._backs):
                contrib = back(out_grad)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
        return {
            name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
        }


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backs: tuple[_BackFn, ...]) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        out._parents = parents
        out._backs = backs
        _ACTIVE_TAPE._nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape numpy broadcast it up from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x: Tensor | float | np.ndarray, like: Tensor) -> Tensor:
    """Wrap a plain value; bare scalars adopt the other operand's dtype so a
    python float cannot silently upcast a float32 graph."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim == 0:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def add(a: Tensor, b: Tensor | float | np.ndarray) -> Tensor:
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor | float | np.ndarray) -> Tensor:
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(
        data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def back_a(g: np.ndarray) -> np.ndarray:
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def back_b(g: np.ndarray) -> np.ndarray:
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _record(data, (a, b), (back_a, back_b))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _record(np.where(keep, x.data, 0.0).astype(x.dtype), (x,), (lambda g: g * keep,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g: np.ndarray) -> np.ndarray:
        dot = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - dot)

    return _record(s, (x,), (back,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = gain.data * y + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def back_x(g: np.ndarray) -> np.ndarray:
        dy = g * gain.data
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        return inv * (dy - m1 - y * m2)

    return _record(
        out.astype(x.dtype),
        (x, gain, bias),
        (back_x, lambda g: (g * y).sum(axis=lead), lambda g: g.sum(axis=lead)),
    )


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValidationError(
            f"embedding ids out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )

    def back(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return acc

    return _record(table.data[ids], (table,), (back,))


class DropoutSource:
    """Supplies multiplicative dropout masks (inverted scaling baked in)."""

    def mask(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        raise NotImplementedError


class GeneratorDropout(DropoutSource):
    """Masks drawn straight from a numpy generator (or a seed for one)."""

    def __init__(self, rng: np.random.Generator | int) -> None:
        self._rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def mask(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        keep = self._rng.random(shape) >= p
        return keep.astype(np.float64) / (1.0 - p)


def dropout(x: Tensor, p: float, train: bool, source: DropoutSource | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if source is None:
        raise ValidationError("training-mode dropout needs a mask source")
    m = source.mask(x.shape, p).astype(x.dtype)
    return _record(x.data * m, (x,), (lambda g: g * m,))


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    ignore_id: int | None = None,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Mean cross-entropy over non-ignored positions.

    ``logits`` is (n, vocab); ``targets`` is (n,) int ids.  With smoothing
    eps the target distribution puts 1-eps on the gold id and eps/(vocab-1)
    on every other id.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValidationError(f"label smoothing must be in [0, 1), got {label_smoothing}")
    n, vocab = logits.shape
    keep = np.ones(n, dtype=bool) if ignore_id is None else targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ValidationError("cross_entropy: every position is ignored")

    x = logits.data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - lse

    on = 1.0 - label_smoothing
    off = label_smoothing / (vocab - 1) if vocab > 1 else 0.0
    rows = np.arange(n)
    gold_lp = log_probs[rows, targets]
    per_row = -(on * gold_lp + off * (log_probs.sum(axis=-1) - gold_lp))
    loss = (per_row * keep).sum() / count

    def back(g: np.ndarray) -> np.ndarray:
        probs = np.exp(log_probs)
        target_dist = np.full_like(probs, off)
        target_dist[rows, targets] = on
        grad = (probs - target_dist) * (keep[:, None] / count)
        return (grad * g).astype(logits.dtype)

    return _record(np.asarray(loss), (logits,), (back,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _record(x.data.transpose(axes), (x,), (lambda g: g.transpose(inv),))


def reduce_sum(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), (lambda g: np.broadcast_to(g, x.shape).copy(),))


@dataclass(frozen=True)
class GradCheckResult:
    """Worst-case agreement between tape and finite-difference gradients."""

    max_rel_error: float
    n_coords: int
    worst_param: str


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of ``f()`` against central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    Large parameters may be spot-checked on a random coordinate subset.
    """
    with Tape() as tape:
        loss = f()
        analytic = tape.gradients(loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_param = ""
    n_checked = 0
    for name, p in params.items():
        size = p.data.size
        idxs = np.arange(size)
        if max_coords_per_param is not None and size > max_coords_per_param:
            idxs = rng.choice(size, size=max_coords_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            up = float(f().data)
            p.data.flat[i] = orig - h
            down = float(f().data)
            p.data.flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            n_checked += 1
            if rel > worst:
                worst = rel
                worst_param = name
    return GradCheckResult(max_rel_error=worst, n_coords=n_checked, worst_param=worst_param)
