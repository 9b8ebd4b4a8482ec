"""Pure numpy kernels.

Every reduction runs as an explicit loop over the reduced axis, vectorized over
the other axes.  Each output element therefore sees the same sequence of
float32 roundings regardless of how many rows are stacked into one call, which
is what makes per-candidate results independent of chunk composition.  BLAS
``@`` gives no such guarantee.
"""
import math

import numpy as np

from ..errors import DimensionError

NAME = "python"

_GELU_C = np.float32(math.sqrt(2.0 / math.pi))
_GELU_A = np.float32(0.044715)
_HALF = np.float32(0.5)
_ONE = np.float32(1.0)


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out


def rms_norm_rows(x, gamma, eps):
    rows, d = x.shape
    if gamma.shape[0] != d:
        raise DimensionError(f"rms_norm: x has {d} columns, gamma has {gamma.shape[0]}")
    ss = np.zeros(rows, dtype=np.float32)
    for c in range(d):
        col = x[:, c]
        ss += col * col
    r = np.sqrt(ss / np.float32(d) + np.float32(eps))
    return (x / r[:, None]) * gamma


def gelu(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return _HALF * x * (_ONE + np.tanh(inner))


def attention(q, k, v, n_heads, causal):
    length, d = q.shape
    dh = d // n_heads
    scale = np.float32(1.0 / math.sqrt(dh))
    ctx = np.empty((length, d), dtype=np.float32)
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[:, cols], np.ascontiguousarray(k[:, cols].T)) * scale
        if causal:
            scores[np.triu_indices(length, 1)] = -np.inf
        m = scores.max(axis=1)
        e = np.exp(scores - m[:, None])
        z = np.zeros(length, dtype=np.float32)
        for j in range(length):
            z += e[:, j]
        p = e / z[:, None]
        ctx[:, cols] = matmul(p, v[:, cols])
    return ctx
