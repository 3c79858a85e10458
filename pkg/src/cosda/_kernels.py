"""Hot inner loops, compiled with numba when available.

Set ``COSDA_KERNELS=numpy`` to force the pure-numpy path (useful for
debugging and for the benchmark in ``benchmarks/bench_kernels.py``).
Both paths consume identical inputs; all randomness is drawn by the
callers so the backends see the same streams.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

LOG_FLOOR = 1e-12


def _select_backend() -> str:
    requested = os.environ.get("COSDA_KERNELS", "numba").strip().lower()
    if requested not in ("numba", "numpy"):
        raise ValueError(f"COSDA_KERNELS must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not _HAVE_NUMBA:
        return "numpy"
    return requested


BACKEND = _select_backend()


# ---------------------------------------------------------------- numpy path

def _np_bn_train_forward(x, gain, shift, eps):
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + shift, xhat, mean, var, inv_std


def _np_bn_train_backward(gout, xhat, gain, inv_std):
    n = gout.shape[0]
    g_shift = gout.sum(axis=0)
    g_gain = (gout * xhat).sum(axis=0)
    gxhat = gout * gain
    gx = (inv_std / n) * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
    return gx, g_gain, g_shift


def _np_affine_rows(x, weight, bias):
    # einsum without BLAS: each output row depends on its input row only,
    # so results do not change with batch composition
    return np.einsum("bd,dh->bh", x, weight) + bias


def _np_rowwise_kl(p, q, floor):
    # 0 * log 0 := 0 on the p side; q is floored inside the log
    logp = np.log(np.where(p > 0.0, p, 1.0))
    logq = np.log(np.maximum(q, floor))
    return np.where(p > 0.0, p * (logp - logq), 0.0).sum(axis=1)


def _np_rowwise_entropy(p):
    logp = np.log(np.where(p > 0.0, p, 1.0))
    return -(np.where(p > 0.0, p * logp, 0.0)).sum(axis=1)


def _np_pair_moments(base, partner, thetas, js, target):
    """Sum and sum of squares of ``theta*base + (1-theta)*partner[j] - target``."""
    t = thetas[:, None]
    dev = t * base[None, :] + (1.0 - t) * partner[js] - target[None, :]
    return dev.sum(axis=0), (dev * dev).sum(axis=0)


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:

    @njit(cache=True)
    def _nb_bn_train_forward(x, gain, shift, eps):
        n, h = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        mean = np.zeros(h)
        var = np.zeros(h)
        inv_std = np.empty(h)
        # row-outer loops follow the C memory order
        for b in range(n):
            for k in range(h):
                mean[k] += x[b, k]
        for k in range(h):
            mean[k] /= n
        for b in range(n):
            for k in range(h):
                d = x[b, k] - mean[k]
                var[k] += d * d
        for k in range(h):
            var[k] /= n
            inv_std[k] = 1.0 / np.sqrt(var[k] + eps)
        for b in range(n):
            for k in range(h):
                xh = (x[b, k] - mean[k]) * inv_std[k]
                xhat[b, k] = xh
                out[b, k] = xh * gain[k] + shift[k]
        return out, xhat, mean, var, inv_std

    @njit(cache=True)
    def _nb_bn_train_backward(gout, xhat, gain, inv_std):
        n, h = gout.shape
        gx = np.empty_like(gout)
        g_gain = np.zeros(h)
        g_shift = np.zeros(h)
        for b in range(n):
            for k in range(h):
                g_shift[k] += gout[b, k]
                g_gain[k] += gout[b, k] * xhat[b, k]
        for b in range(n):
            for k in range(h):
                # d/dxhat = gout * gain, so its column sums are gain-scaled
                gx[b, k] = (inv_std[k] / n) * (n * gout[b, k] * gain[k] - gain[k] * g_shift[k]
                                               - xhat[b, k] * gain[k] * g_gain[k])
        return gx, g_gain, g_shift

    @njit(cache=True)
    def _nb_affine_rows(x, weight, bias):
        n, d = x.shape
        h = weight.shape[1]
        out = np.empty((n, h))
        for b in range(n):
            for k in range(h):
                out[b, k] = 0.0
            for j in range(d):
                xv = x[b, j]
                for k in range(h):
                    out[b, k] += xv * weight[j, k]
            for k in range(h):
                out[b, k] += bias[k]
        return out

    @njit(cache=True)
    def _nb_rowwise_kl(p, q, floor):
        n, c = p.shape
        out = np.zeros(n)
        for i in range(n):
            s = 0.0
            for k in range(c):
                pk = p[i, k]
                if pk > 0.0:
                    qk = q[i, k]
                    if qk < floor:
                        qk = floor
                    s += pk * (np.log(pk) - np.log(qk))
            out[i] = s
        return out

    @njit(cache=True)
    def _nb_rowwise_entropy(p):
        n, c = p.shape
        out = np.zeros(n)
        for i in range(n):
            s = 0.0
            for k in range(c):
                pk = p[i, k]
                if pk > 0.0:
                    s -= pk * np.log(pk)
            out[i] = s
        return out

    @njit(cache=True)
    def _nb_pair_moments(base, partner, thetas, js, target):
        d = base.shape[0]
        s1 = np.zeros(d)
        s2 = np.zeros(d)
        for t in range(thetas.shape[0]):
            th = thetas[t]
            j = js[t]
            for k in range(d):
                dev = th * base[k] + (1.0 - th) * partner[j, k] - target[k]
                s1[k] += dev
                s2[k] += dev * dev
        return s1, s2


_NUMPY_IMPLS = {
    "affine_rows": _np_affine_rows,
    "bn_train_forward": _np_bn_train_forward,
    "bn_train_backward": _np_bn_train_backward,
    "rowwise_kl": _np_rowwise_kl,
    "rowwise_entropy": _np_rowwise_entropy,
    "pair_moments": _np_pair_moments,
}

if _HAVE_NUMBA:
    _NUMBA_IMPLS = {
        "affine_rows": _nb_affine_rows,
        "bn_train_forward": _nb_bn_train_forward,
        "bn_train_backward": _nb_bn_train_backward,
        "rowwise_kl": _nb_rowwise_kl,
        "rowwise_entropy": _nb_rowwise_entropy,
        "pair_moments": _nb_pair_moments,
    }
else:  # pragma: no cover
    _NUMBA_IMPLS = _NUMPY_IMPLS


def implementations(backend: str | None = None) -> dict:
    """Kernel table for ``backend`` (defaults to the env-selected one)."""
    backend = backend or BACKEND
    return _NUMBA_IMPLS if backend == "numba" else _NUMPY_IMPLS


_active = implementations()


def affine_rows(x, weight, bias):
    return _active["affine_rows"](np.ascontiguousarray(x, dtype=np.float64),
                                  np.ascontiguousarray(weight, dtype=np.float64),
                                  np.ascontiguousarray(bias, dtype=np.float64))


def bn_train_forward(x, gain, shift, eps):
    return _active["bn_train_forward"](x, gain, shift, float(eps))


def bn_train_backward(gout, xhat, gain, inv_std):
    return _active["bn_train_backward"](gout, xhat, gain, inv_std)


def rowwise_kl(p, q, floor=LOG_FLOOR):
    return _active["rowwise_kl"](np.ascontiguousarray(p, dtype=np.float64),
                                 np.ascontiguousarray(q, dtype=np.float64), float(floor))


def rowwise_entropy(p):
    return _active["rowwise_entropy"](np.ascontiguousarray(p, dtype=np.float64))


def pair_moments(base, partner, thetas, js, target):
    return _active["pair_moments"](
        np.ascontiguousarray(base, dtype=np.float64),
        np.ascontiguousarray(partner, dtype=np.float64),
        np.ascontiguousarray(thetas, dtype=np.float64),
        np.ascontiguousarray(js, dtype=np.int64),
        np.ascontiguousarray(target, dtype=np.float64),
    )
