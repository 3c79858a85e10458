"""Dense float64 math with a small reverse-mode tape.

Only the operations the classifier and the adaptation losses need are
provided. Plain functions (``affine_forward``, ``softmax`` ...) work on
numpy arrays; the same operations recorded on a :class:`GradientTape`
operate on :class:`Var` handles and can be differentiated.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateBatchError, DimensionError

LOG_FLOOR = _kernels.LOG_FLOOR
DEFAULT_BN_EPS = 1e-5


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ----------------------------------------------------------- plain forwards

def affine_forward(x, weight, bias) -> np.ndarray:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1 \
            or x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"affine shapes do not conform: x{x.shape} weight{weight.shape} bias{bias.shape}")
    return _kernels.affine_rows(x, weight, bias)


def relu(x) -> np.ndarray:
    x = as_tensor(x)
    return np.where(x > 0.0, x, 0.0)


def batchnorm_forward(x, gain, shift, mode: str, running, eps: float = DEFAULT_BN_EPS):
    """Normalize each feature column.

    In ``train`` mode the per-batch mean and population variance are used
    and returned; in ``eval`` mode ``running = (mu, var)`` is used and the
    returned batch stats are ``None``.
    """
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(
            f"batchnorm shapes do not conform: x{x.shape} gain{gain.shape} shift{shift.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"batchnorm in train mode needs at least 2 rows, got {x.shape[0]}")
        out, _, mean, var, _ = _kernels.bn_train_forward(
            np.ascontiguousarray(x), gain, shift, eps)
        return out, (mean, var)
    if mode == "eval":
        mu, var = (as_tensor(r) for r in running)
        if mu.shape != gain.shape or var.shape != gain.shape:
            raise DimensionError(
                f"running stats shape {mu.shape}/{var.shape} does not match features {gain.shape}")
        return gain * ((x - mu) / np.sqrt(var + eps)) + shift, None
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; ``q`` is floored at 1e-12 inside the log."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionError(f"kl_divergence needs equal-length vectors, got {p.shape} and {q.shape}")
    return float(_kernels.rowwise_kl(p[None, :], q[None, :])[0])


def entropy(p) -> float:
    p = as_tensor(p)
    return float(_kernels.rowwise_entropy(p.reshape(1, -1))[0])


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


# ------------------------------------------------------------------- tape

class Var:
    """A value on a tape. ``requires_grad`` is true for watched leaves and
    everything computed from them."""

    __slots__ = ("value", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool):
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class GradientTape:
    """Records operations on :class:`Var` values for one backward pass.

    A tape belongs to a single thread of execution.
    """

    def __init__(self):
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def watch(self, value) -> Var:
        return Var(as_tensor(value), True)

    def constant(self, value) -> Var:
        return Var(as_tensor(value), False)

    def _emit(self, value, inputs: tuple[Var, ...], backward) -> Var:
        req = any(v.requires_grad for v in inputs)
        out = Var(value, req)
        if req:
            self._records.append((out, inputs, backward))
        return out

    # -- ops
    def affine(self, x: Var, weight: Var, bias: Var) -> Var:
        value = affine_forward(x.value, weight.value, bias.value)

        def backward(g):
            return g @ weight.value.T, x.value.T @ g, g.sum(axis=0)

        return self._emit(value, (x, weight, bias), backward)

    def relu(self, x: Var) -> Var:
        mask = x.value > 0.0
        return self._emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def batchnorm_train(self, x: Var, gain: Var, shift: Var, eps: float = DEFAULT_BN_EPS):
        """Train-mode batchnorm; returns ``(out, (batch_mean, batch_var))``."""
        if x.value.ndim != 2 or x.value.shape[0] < 2:
            raise DegenerateBatchError(
                f"batchnorm in train mode needs at least 2 rows, got shape {x.value.shape}")
        if gain.value.shape != (x.value.shape[1],) or shift.value.shape != gain.value.shape:
            raise DimensionError(
                f"batchnorm shapes do not conform: x{x.value.shape} gain{gain.value.shape}")
        out, xhat, mean, var, inv_std = _kernels.bn_train_forward(
            np.ascontiguousarray(x.value), gain.value, shift.value, eps)

        def backward(g):
            return _kernels.bn_train_backward(np.ascontiguousarray(g), xhat, gain.value, inv_std)

        return self._emit(out, (x, gain, shift), backward), (mean, var)

    def batchnorm_eval(self, x: Var, gain: Var, shift: Var, running, eps: float = DEFAULT_BN_EPS) -> Var:
        mu, var = (as_tensor(r) for r in running)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mu) * inv_std
        value = gain.value * xhat + shift.value

        def backward(g):
            return g * gain.value * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

        return self._emit(value, (x, gain, shift), backward)

    def softmax(self, z: Var) -> Var:
        s = softmax(z.value)

        def backward(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return self._emit(s, (z,), backward)

    def log_softmax(self, z: Var, floor: float = LOG_FLOOR) -> Var:
        """``log(max(softmax(z), floor))``, computed stably."""
        ls = log_softmax(z.value)
        log_floor = np.log(floor)
        active = ls > log_floor
        value = np.where(active, ls, log_floor)
        s = np.exp(ls)

        def backward(g):
            g = np.where(active, g, 0.0)
            return (g - s * g.sum(axis=-1, keepdims=True),)

        return self._emit(value, (z,), backward)

    def log(self, x: Var, floor: float = LOG_FLOOR) -> Var:
        active = x.value > floor
        safe = np.where(active, x.value, floor)
        return self._emit(np.log(safe), (x,), lambda g: (np.where(active, g / safe, 0.0),))

    def scale(self, x: Var, c: float) -> Var:
        return self._emit(x.value * c, (x,), lambda g: (g * c,))

    def add(self, a: Var, b: Var) -> Var:
        return self._emit(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))

    def sub(self, a: Var, b: Var) -> Var:
        return self._emit(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)))

    def mul(self, a: Var, b: Var) -> Var:
        return self._emit(a.value * b.value, (a, b),
                          lambda g: (_unbroadcast(g * b.value, a.value.shape),
                                     _unbroadcast(g * a.value, b.value.shape)))

    def sum(self, x: Var) -> Var:
        shape = x.value.shape
        return self._emit(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))

    def mean(self, x: Var) -> Var:
        shape, n = x.value.shape, x.value.size
        return self._emit(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))

    def mean_rows(self, x: Var) -> Var:
        """Average over the leading (batch) axis."""
        n = x.value.shape[0]
        return self._emit(x.value.mean(axis=0), (x,),
                          lambda g: (np.broadcast_to(g / n, x.value.shape).copy(),))

    # -- backward
    def gradient(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``wrt``."""
        if loss.value.size != 1:
            raise DimensionError(f"gradient needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for var, gi in zip(inputs, backward(g)):
                if not var.requires_grad:
                    continue
                key = id(var)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.asarray(gi, dtype=np.float64)
        return [grads.get(id(v), np.zeros_like(v.value)).reshape(v.value.shape) for v in wrt]
