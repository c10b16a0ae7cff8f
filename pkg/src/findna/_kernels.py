"""Fused elementwise kernels for the hot primitives in :mod:`findna.ndiff`.

Each kernel makes one pass over memory where the numpy formulation would make
five to ten; results agree with the numpy reference to rounding.
"""

import math

import numba
import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


@numba.njit(cache=True)
def _gelu_inner(x, z):
    xf = x.ravel()
    zf = z.ravel()
    for i in range(xf.size):
        v = xf[i]
        zf[i] = _GELU_C * v * (1.0 + _GELU_K * v * v)


@numba.njit(cache=True)
def _gelu_finish(x, t, out, deriv):
    xf = x.ravel()
    tf = t.ravel()
    of = out.ravel()
    df = deriv.ravel()
    for i in range(xf.size):
        v = xf[i]
        th = tf[i]
        of[i] = 0.5 * v * (1.0 + th)
        df[i] = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_K * v * v)


@numba.njit(cache=True)
def _gelu_value(x, t, out):
    xf = x.ravel()
    tf = t.ravel()
    of = out.ravel()
    for i in range(xf.size):
        of[i] = 0.5 * xf[i] * (1.0 + tf[i])


def gelu_forward(x, out, deriv=None):
    """tanh-GELU and (optionally) its derivative; tanh runs in numpy's SIMD loop."""
    if deriv is None:
        _gelu_inner(x, out)
        np.tanh(out, out=out)
        _gelu_value(x, out, out)
        return
    _gelu_inner(x, deriv)
    np.tanh(deriv, out=deriv)
    _gelu_finish(x, deriv, out, deriv)


@numba.njit(cache=True)
def roll_tokens(x, offsets, out):
    """``out[b, n, c] = x[b, (n - offsets[c]) mod N, c]`` for a 3-D array."""
    batch, tokens, channels = x.shape
    shift = np.empty(channels, dtype=np.int64)
    for c in range(channels):
        shift[c] = offsets[c] % tokens
    for b in range(batch):
        for n in range(tokens):
            for c in range(channels):
                src = n - shift[c]
                if src < 0:
                    src += tokens
                out[b, n, c] = x[b, src, c]


@numba.njit(cache=True)
def layer_norm_forward(x, out, inv, eps):
    rows, cols = x.shape
    for r in range(rows):
        m = 0.0
        for j in range(cols):
            m += x[r, j]
        m /= cols
        s = 0.0
        for j in range(cols):
            d = x[r, j] - m
            s += d * d
        iv = 1.0 / math.sqrt(s / cols + eps)
        inv[r] = iv
        for j in range(cols):
            out[r, j] = (x[r, j] - m) * iv


@numba.njit(cache=True)
def layer_norm_backward(g, xhat, inv, out):
    rows, cols = g.shape
    for r in range(rows):
        gm = 0.0
        gx = 0.0
        for j in range(cols):
            gm += g[r, j]
            gx += g[r, j] * xhat[r, j]
        gm /= cols
        gx /= cols
        iv = inv[r]
        for j in range(cols):
            out[r, j] = iv * (g[r, j] - gm - xhat[r, j] * gx)


@numba.njit(cache=True)
def masked_scale(x, keep, factor, out):
    xf = x.ravel()
    kf = keep.ravel()
    of = out.ravel()
    for i in range(xf.size):
        of[i] = xf[i] * factor if kf[i] else 0.0


def dropout_keep_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Boolean keep-mask with ``P(keep) = 1 - rate`` to 16-bit resolution."""
    n = int(np.prod(shape))
    bits = np.frombuffer(rng.bytes(2 * n), dtype=np.uint16).reshape(shape)
    return bits >= np.uint16(min(65535, round(rate * 65536)))
