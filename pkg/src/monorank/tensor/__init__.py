"""Deterministic float32 kernels for a pre-norm transformer layer.

Two interchangeable backends implement the primitives: the compiled extension
``_kernels`` (built from Cython when available) and the numpy ``_fallback``.
The compiled backend is selected at import when it can be loaded; call
:func:`use_backend` to switch explicitly.
"""
import contextlib
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, DimensionError, NumericError
from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _fallback


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.NAME


def set_backend(name):
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ContractError(
            f"unknown or unavailable backend {name!r}; have {available_backends()}"
        ) from None


@contextlib.contextmanager
def use_backend(name):
    """Temporarily switch the kernel backend (not thread-safe)."""
    previous = _active.NAME
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _f32_2d(x):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got shape {x.shape}")
    return x


def _f32_1d(x):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {x.shape}")
    return x


def matmul(a, b):
    """Row-major float32 product with a fixed ascending k accumulation order."""
    return _active.matmul(_f32_2d(a), _f32_2d(b))


def rms_norm(x, gamma, eps):
    """RMS-normalize a vector (or each row of a matrix) and scale by ``gamma``."""
    if eps < 0:
        raise ContractError(f"eps must be non-negative, got {eps}")
    x = np.asarray(x, dtype=np.float32)
    gamma = _f32_1d(gamma)
    if x.ndim == 1:
        if x.shape[0] != gamma.shape[0]:
            raise DimensionError(f"rms_norm: len(x)={x.shape[0]}, len(gamma)={gamma.shape[0]}")
        return _active.rms_norm_rows(_f32_2d(x[None, :]), gamma, float(eps))[0]
    return _active.rms_norm_rows(_f32_2d(x), gamma, float(eps))


def gelu(x):
    return _active.gelu(_f32_2d(x))


def attention(q, k, v, n_heads=1, causal=False):
    """Scaled dot-product attention within one sequence."""
    q, k, v = _f32_2d(q), _f32_2d(k), _f32_2d(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    if n_heads < 1 or q.shape[1] % n_heads:
        raise DimensionError(f"d_model {q.shape[1]} not divisible by n_heads {n_heads}")
    return _active.attention(q, k, v, int(n_heads), bool(causal))


@dataclass(frozen=True)
class LayerWeights:
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    ffn_in: np.ndarray
    ffn_out: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray
    layer_index: int

    TENSORS = (
        "attn_q", "attn_k", "attn_v", "attn_o", "ffn_in", "ffn_out", "norm_attn", "norm_ffn",
    )

    @property
    def d_model(self):
        return self.attn_q.shape[0]

    @property
    def d_ff(self):
        return self.ffn_in.shape[1]

    def check_shapes(self, d_model, d_ff):
        expected = {
            "attn_q": (d_model, d_model), "attn_k": (d_model, d_model),
            "attn_v": (d_model, d_model), "attn_o": (d_model, d_model),
            "ffn_in": (d_model, d_ff), "ffn_out": (d_ff, d_model),
            "norm_attn": (d_model,), "norm_ffn": (d_model,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"layer {self.layer_index}: {name} is {actual}, expected {shape}")

    def equals(self, other):
        """Bitwise equality of every tensor and the layer index."""
        return self.layer_index == other.layer_index and all(
            np.array_equal(getattr(self, n).view(np.uint32), getattr(other, n).view(np.uint32))
            for n in self.TENSORS
        )


def forward_sequences(sequences, w, causal, n_heads=1, eps=1e-6):
    """Run one layer over several independent sequences.

    Rows of all sequences are stacked for the dense projections (which are
    row-independent), while attention runs per sequence.  The result for any
    sequence is bitwise identical to forwarding it alone.
    """
    if not sequences:
        return []
    d = w.d_model
    for s in sequences:
        if s.ndim != 2 or s.shape[1] != d:
            raise DimensionError(f"hidden state shape {s.shape} does not match d_model {d}")
    lengths = [s.shape[0] for s in sequences]
    h = np.ascontiguousarray(np.concatenate(sequences), dtype=np.float32)
    # overflow surfaces below as NumericError, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        h = _block(h, lengths, w, causal, n_heads, eps)
    if not np.isfinite(h).all():
        raise NumericError(f"non-finite hidden state after layer {w.layer_index}", w.layer_index)
    return np.split(h, np.cumsum(lengths)[:-1])


def _block(h, lengths, w, causal, n_heads, eps):
    x = _active.rms_norm_rows(h, w.norm_attn, float(eps))
    q = _active.matmul(x, w.attn_q)
    k = _active.matmul(x, w.attn_k)
    v = _active.matmul(x, w.attn_v)
    ctx = np.empty_like(h)
    start = 0
    for n in lengths:
        rows = slice(start, start + n)
        ctx[rows] = _active.attention(q[rows], k[rows], v[rows], n_heads, causal)
        start += n
    h = h + _active.matmul(ctx, w.attn_o)

    x = _active.rms_norm_rows(h, w.norm_ffn, float(eps))
    return h + _active.matmul(_active.gelu(_active.matmul(x, w.ffn_in)), w.ffn_out)


def layer_forward(hidden, w, causal, n_heads=1, eps=1e-6):
    """Pre-norm residual block: ``h += Attn(norm(h)); h += FFN(norm(h))``."""
    return forward_sequences([_f32_2d(hidden)], w, causal, n_heads, eps)[0]


__all__ = [
    "LayerWeights", "attention", "available_backends", "backend_name", "forward_sequences",
    "gelu", "layer_forward", "matmul", "rms_norm", "set_backend", "use_backend",
]
