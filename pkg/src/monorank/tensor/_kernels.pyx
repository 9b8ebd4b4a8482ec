# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled float32 kernels.

Loop nests mirror the numpy fallback element by element: every reduction
accumulates in ascending index order into a float32 accumulator.
"""
import numpy as np

from libc.math cimport sqrtf, expf, tanhf, sqrt

from ..errors import DimensionError

NAME = "compiled"

cdef float GELU_C = <float>0.7978845608028654
cdef float GELU_A = <float>0.044715


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], p = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef float aik
    if b.shape[0] != m:
        raise DimensionError(f"matmul: ({n}, {m}) @ ({b.shape[0]}, {p})")
    out = np.zeros((n, p), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        for i in range(n):
            for k in range(m):
                aik = a[i, k]
                for j in range(p):
                    o[i, j] += aik * b[k, j]
    return out


def rms_norm_rows(const float[:, ::1] x, const float[::1] gamma, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, c
    cdef float ss, r, feps = <float>eps, fd = <float>d
    if gamma.shape[0] != d:
        raise DimensionError(f"rms_norm: x has {d} columns, gamma has {gamma.shape[0]}")
    out = np.empty((rows, d), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        for i in range(rows):
            ss = 0
            for c in range(d):
                ss = ss + x[i, c] * x[i, c]
            r = sqrtf(ss / fd + feps)
            for c in range(d):
                o[i, c] = (x[i, c] / r) * gamma[c]
    return out


def gelu(const float[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t i, j
    cdef float v, inner
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        for i in range(rows):
            for j in range(cols):
                v = x[i, j]
                inner = GELU_C * (v + GELU_A * v * v * v)
                o[i, j] = <float>0.5 * v * (<float>1.0 + tanhf(inner))
    return out


def attention(const float[:, ::1] q, const float[:, ::1] k, const float[:, ::1] v,
              int n_heads, bint causal):
    cdef Py_ssize_t length = q.shape[0], d = q.shape[1]
    cdef Py_ssize_t dh = d // n_heads
    cdef Py_ssize_t h, i, j, t, c0, jmax
    cdef float scale = <float>(1.0 / sqrt(<double>dh))
    cdef float acc, m, z, pij
    out = np.zeros((length, d), dtype=np.float32)
    s_buf = np.empty(length, dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef float[::1] s = s_buf
    with nogil:
        for h in range(n_heads):
            c0 = h * dh
            for i in range(length):
                jmax = i + 1 if causal else length
                for j in range(jmax):
                    acc = 0
                    for t in range(dh):
                        acc = acc + q[i, c0 + t] * k[j, c0 + t]
                    s[j] = acc * scale
                m = s[0]
                for j in range(1, jmax):
                    if s[j] > m:
                        m = s[j]
                z = 0
                for j in range(jmax):
                    s[j] = expf(s[j] - m)
                    z = z + s[j]
                for j in range(jmax):
                    pij = s[j] / z
                    for t in range(dh):
                        o[i, c0 + t] = o[i, c0 + t] + pij * v[j, c0 + t]
    return out
