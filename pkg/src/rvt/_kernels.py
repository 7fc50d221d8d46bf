"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``RVT_DISABLE_NUMBA`` is unset or ``0``.  Both paths compute the
same quantities; they may differ in the last ulp because summation order
differs, so a single run should stick to one backend.

All kernels take and return C-contiguous float64 arrays.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_ENV_DISABLED = os.environ.get("RVT_DISABLE_NUMBA", "0") not in ("", "0")
USE_NUMBA = HAS_NUMBA and not _ENV_DISABLED


def backend():
    return "numba" if USE_NUMBA else "numpy"


def set_backend(name):
    """Switch kernels at runtime ("numba" or "numpy"). Used by the benchmark."""
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    USE_NUMBA = name == "numba"


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _im2col_np(xp, kh, kw):
    # xp: (B, C, Hp, Wp) -> (B, Ho, Wo, C, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im_np(cols, hp, wp):
    b, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((b, c, hp, wp))
    g = cols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += g[:, :, i, j]
    return out


def _layernorm_fwd_np(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def _layernorm_bwd_np(g, y, rstd):
    gm = g.mean(axis=1, keepdims=True)
    gym = (g * y).mean(axis=1, keepdims=True)
    return rstd[:, None] * (g - gm - y * gym)


def _softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _avgpool_fwd_np(x, k):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _avgpool_bwd_np(g, k):
    b, c, ho, wo = g.shape
    out = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (b, c, ho, k, wo, k))
    return np.ascontiguousarray(out).reshape(b, c, ho * k, wo * k)


def _signed_rank_counts_np(ranks2):
    # ranks2: positive integers (doubled mid-ranks). counts[s] = number of
    # sign patterns whose positive-rank sum (doubled) equals s.
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw):
        b, c, hp, wp = xp.shape
        ho = hp - kh + 1
        wo = wp - kw + 1
        out = np.empty((b, ho, wo, c, kh, kw))
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[n, y, x, ch, i, j] = xp[n, ch, y + i, x + j]
        return out

    @njit(cache=True)
    def _col2im_nb(cols, hp, wp):
        b, ho, wo, c, kh, kw = cols.shape
        out = np.zeros((b, c, hp, wp))
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[n, ch, y + i, x + j] += cols[n, y, x, ch, i, j]
        return out

    @njit(cache=True)
    def _layernorm_fwd_nb(x, eps):
        n, d = x.shape
        y = np.empty_like(x)
        rstd = np.empty(n)
        for r in range(n):
            mu = 0.0
            for k in range(d):
                mu += x[r, k]
            mu /= d
            var = 0.0
            for k in range(d):
                t = x[r, k] - mu
                var += t * t
            var /= d
            s = 1.0 / np.sqrt(var + eps)
            rstd[r] = s
            for k in range(d):
                y[r, k] = (x[r, k] - mu) * s
        return y, rstd

    @njit(cache=True)
    def _layernorm_bwd_nb(g, y, rstd):
        n, d = g.shape
        out = np.empty_like(g)
        for r in range(n):
            gm = 0.0
            gym = 0.0
            for k in range(d):
                gm += g[r, k]
                gym += g[r, k] * y[r, k]
            gm /= d
            gym /= d
            s = rstd[r]
            for k in range(d):
                out[r, k] = s * (g[r, k] - gm - y[r, k] * gym)
        return out

    @njit(cache=True)
    def _softmax_fwd_nb(x):
        n, d = x.shape
        y = np.empty_like(x)
        for r in range(n):
            m = x[r, 0]
            for k in range(1, d):
                if x[r, k] > m:
                    m = x[r, k]
            s = 0.0
            for k in range(d):
                e = np.exp(x[r, k] - m)
                y[r, k] = e
                s += e
            for k in range(d):
                y[r, k] /= s
        return y

    @njit(cache=True)
    def _softmax_bwd_nb(g, y):
        n, d = g.shape
        out = np.empty_like(g)
        for r in range(n):
            dot = 0.0
            for k in range(d):
                dot += g[r, k] * y[r, k]
            for k in range(d):
                out[r, k] = y[r, k] * (g[r, k] - dot)
        return out

    @njit(cache=True)
    def _avgpool_fwd_nb(x, k):
        b, c, h, w = x.shape
        ho = h // k
        wo = w // k
        out = np.zeros((b, c, ho, wo))
        inv = 1.0 / (k * k)
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        s = 0.0
                        for i in range(k):
                            for j in range(k):
                                s += x[n, ch, y * k + i, xx * k + j]
                        out[n, ch, y, xx] = s * inv
        return out

    @njit(cache=True)
    def _avgpool_bwd_nb(g, k):
        b, c, ho, wo = g.shape
        out = np.empty((b, c, ho * k, wo * k))
        inv = 1.0 / (k * k)
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        v = g[n, ch, y, xx] * inv
                        for i in range(k):
                            for j in range(k):
                                out[n, ch, y * k + i, xx * k + j] = v
        return out

    @njit(cache=True)
    def _signed_rank_counts_nb(ranks2):
        total = 0
        for r in ranks2:
            total += r
        counts = np.zeros(total + 1, dtype=np.int64)
        counts[0] = 1
        reach = 0
        for r in ranks2:
            reach += r
            for s in range(reach, r - 1, -1):
                counts[s] += counts[s - r]
        return counts


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def im2col(xp, kh, kw):
    if USE_NUMBA:
        return _im2col_nb(xp, kh, kw)
    return _im2col_np(xp, kh, kw)


def col2im(cols, hp, wp):
    if USE_NUMBA:
        return _col2im_nb(np.ascontiguousarray(cols), hp, wp)
    return _col2im_np(cols, hp, wp)


def layernorm_fwd(x, eps):
    if USE_NUMBA:
        return _layernorm_fwd_nb(x, eps)
    return _layernorm_fwd_np(x, eps)


def layernorm_bwd(g, y, rstd):
    if USE_NUMBA:
        return _layernorm_bwd_nb(np.ascontiguousarray(g), y, rstd)
    return _layernorm_bwd_np(g, y, rstd)


def softmax_fwd(x):
    if USE_NUMBA:
        return _softmax_fwd_nb(x)
    return _softmax_fwd_np(x)


def softmax_bwd(g, y):
    if USE_NUMBA:
        return _softmax_bwd_nb(np.ascontiguousarray(g), y)
    return _softmax_bwd_np(g, y)


def avgpool_fwd(x, k):
    if USE_NUMBA:
        return _avgpool_fwd_nb(x, k)
    return _avgpool_fwd_np(x, k)


def avgpool_bwd(g, k):
    if USE_NUMBA:
        return _avgpool_bwd_nb(np.ascontiguousarray(g), k)
    return _avgpool_bwd_np(g, k)


def signed_rank_counts(ranks2):
    ranks2 = np.ascontiguousarray(ranks2, dtype=np.int64)
    if USE_NUMBA:
        return _signed_rank_counts_nb(ranks2)
    return _signed_rank_counts_np(ranks2)
