"""On-disk model format: manifest, per-layer weight files, embedding and head.

A model directory holds::

    manifest.json     field-named metadata plus a file table (name -> byte length)
    layer_<i>.bin     attn_q, attn_k, attn_v, attn_o, ffn_in, ffn_out, norm_attn, norm_ffn
    embedding.bin     token table (vocab_size x D) followed by position table (max_seq_len x D)
    head.bin          score head weight (D) followed by its bias (1)

All tensors are little-endian float32, row-major, with fixed strides so that
single layers and single embedding rows can be read by seeking.
"""
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ModelNotFoundError, OutOfRangeError
from .tensor import LayerWeights

FORMAT_VERSION = 1
BLOCK = "prenorm_rms_gelu"
MANIFEST_NAME = "manifest.json"
EMBEDDING_NAME = "embedding.bin"
HEAD_NAME = "head.bin"
FLOAT = np.dtype("<f4")

_ARCH_POSITION = {"decoder_only": "last", "encoder_only": "first"}


def layer_file_name(i):
    return f"layer_{i}.bin"


@dataclass(frozen=True)
class ModelManifest:
    format_version: int
    arch: str
    block: str
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    score_position: str
    rms_eps: float
    files: dict

    @property
    def causal(self):
        return self.arch == "decoder_only"

    def layer_shapes(self):
        d, f = self.d_model, self.d_ff
        return [
            ("attn_q", (d, d)), ("attn_k", (d, d)), ("attn_v", (d, d)), ("attn_o", (d, d)),
            ("ffn_in", (d, f)), ("ffn_out", (f, d)), ("norm_attn", (d,)), ("norm_ffn", (d,)),
        ]

    @property
    def layer_nbytes(self):
        return FLOAT.itemsize * sum(int(np.prod(s)) for _, s in self.layer_shapes())

    @property
    def row_nbytes(self):
        return FLOAT.itemsize * self.d_model

    @property
    def embedding_nbytes(self):
        return self.row_nbytes * (self.vocab_size + self.max_seq_len)

    @property
    def head_nbytes(self):
        return FLOAT.itemsize * (self.d_model + 1)

    def expected_files(self):
        files = {layer_file_name(i): self.layer_nbytes for i in range(self.n_layers)}
        files[EMBEDDING_NAME] = self.embedding_nbytes
        files[HEAD_NAME] = self.head_nbytes
        return files

    def to_json(self):
        doc = {
            "format_version": self.format_version,
            "arch": self.arch,
            "block": self.block,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "score_position": self.score_position,
            "rms_eps": self.rms_eps,
            "files": dict(sorted(self.files.items())),
        }
        return json.dumps(doc, indent=2) + "\n"


@dataclass(frozen=True)
class ScoreHead:
    weight: np.ndarray
    bias: float


@dataclass(frozen=True)
class ModelSpec:
    """Shape parameters for :func:`gen_synthetic_model`."""

    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 1
    d_ff: int = 256
    vocab_size: int = 1024
    max_seq_len: int = 128
    arch: str = "decoder_only"
    rms_eps: float = 1e-6

    def manifest(self):
        proto = ModelManifest(
            format_version=FORMAT_VERSION,
            arch=self.arch,
            block=BLOCK,
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab_size=self.vocab_size,
            max_seq_len=self.max_seq_len,
            score_position=_ARCH_POSITION.get(self.arch, "last"),
            rms_eps=float(self.rms_eps),
            files={},
        )
        _check_fields(proto)
        return ModelManifest(**{**proto.__dict__, "files": proto.expected_files()})


class IORecorder:
    """Thread-safe log of every read issued against a model directory."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events = []

    def record(self, file, offset, nbytes):
        with self._lock:
            self.events.append((file, offset, nbytes))

    def bytes_read(self, file=None):
        with self._lock:
            return sum(n for f, _, n in self.events if file is None or f == file)

    def files(self):
        with self._lock:
            return [f for f, _, _ in self.events]

    def clear(self):
        with self._lock:
            self.events.clear()


_INT_FIELDS = ("format_version", "n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len")
_FIELDS = set(ModelManifest.__dataclass_fields__)


def _check_fields(m):
    for name in _INT_FIELDS:
        value = getattr(m, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise FormatError(f"{name} must be a positive integer, got {value!r}", name)
    if m.format_version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {m.format_version}", "format_version")
    if m.arch not in _ARCH_POSITION:
        raise FormatError(f"arch must be one of {sorted(_ARCH_POSITION)}, got {m.arch!r}", "arch")
    if m.block != BLOCK:
        raise FormatError(f"block must be {BLOCK!r}, got {m.block!r}", "block")
    if m.score_position not in ("last", "first"):
        raise FormatError(f"score_position must be 'last' or 'first', got {m.score_position!r}", "score_position")
    if m.d_model % m.n_heads:
        raise FormatError(f"d_model {m.d_model} not divisible by n_heads {m.n_heads}", "n_heads")
    if not isinstance(m.rms_eps, (int, float)) or isinstance(m.rms_eps, bool) or not m.rms_eps > 0:
        raise FormatError(f"rms_eps must be a positive number, got {m.rms_eps!r}", "rms_eps")


def read_manifest(model_dir, check_files=True):
    """Parse and validate ``manifest.json``; optionally verify every listed file."""
    model_dir = Path(model_dir)
    path = model_dir / MANIFEST_NAME
    if not path.is_file():
        raise ModelNotFoundError(f"no {MANIFEST_NAME} in {model_dir}")
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("manifest must be a JSON object")
    unknown = sorted(set(doc) - _FIELDS)
    if unknown:
        raise FormatError(f"unknown manifest field {unknown[0]!r}", unknown[0])
    missing = sorted(_FIELDS - set(doc))
    if missing:
        raise FormatError(f"missing manifest field {missing[0]!r}", missing[0])
    if not isinstance(doc["files"], dict):
        raise FormatError("files must be an object of name -> byte length", "files")
    m = ModelManifest(**doc)
    _check_fields(m)

    expected = m.expected_files()
    if set(m.files) != set(expected):
        extra = sorted(set(m.files) ^ set(expected))
        raise FormatError(f"file table does not match n_layers: {extra}", "files")
    for name, size in expected.items():
        if m.files[name] != size:
            raise FormatError(
                f"{name}: declared {m.files[name]} bytes, shapes require {size}", "files"
            )
    if check_files:
        for name, size in expected.items():
            fp = model_dir / name
            if not fp.is_file():
                raise FormatError(f"{name} is listed but missing", "files")
            actual = fp.stat().st_size
            if actual != size:
                raise FormatError(
                    f"{name}: byte-length mismatch (file has {actual}, manifest declares {size})",
                    "files",
                )
    return m


def _read_exact(f, offset, nbytes, into=None):
    f.seek(offset)
    if into is None:
        data = f.read(nbytes)
        got = len(data)
    else:
        got = f.readinto(into)
        data = into
    if got != nbytes:
        raise FormatError(f"short read at offset {offset}: wanted {nbytes} bytes, got {got}")
    return data


def layer_from_buffer(buf, manifest, i, readonly=True):
    """Build :class:`LayerWeights` as views over a raw layer byte buffer."""
    arr = np.frombuffer(buf, dtype=FLOAT, count=manifest.layer_nbytes // FLOAT.itemsize)
    tensors = {}
    offset = 0
    for name, shape in manifest.layer_shapes():
        n = int(np.prod(shape))
        t = arr[offset : offset + n].reshape(shape)
        if readonly:
            t.flags.writeable = False
        tensors[name] = t
        offset += n
    return LayerWeights(layer_index=i, **tensors)


def read_layer_into(model_dir, manifest, i, buffer, recorder=None):
    """Read layer ``i`` into a preallocated byte buffer of at least ``layer_nbytes``."""
    if not 0 <= i < manifest.n_layers:
        raise OutOfRangeError(f"layer index {i} outside [0, {manifest.n_layers})")
    name = layer_file_name(i)
    nbytes = manifest.layer_nbytes
    view = memoryview(buffer)[:nbytes]
    with open(Path(model_dir) / name, "rb") as f:
        _read_exact(f, 0, nbytes, into=view)
    if recorder is not None:
        recorder.record(name, 0, nbytes)
    return layer_from_buffer(buffer, manifest, i)


def load_layer(model_dir, i, manifest=None, recorder=None):
    """Read exactly one layer file; no other layer file is opened."""
    if manifest is None:
        manifest = read_manifest(model_dir, check_files=False)
    buf = bytearray(manifest.layer_nbytes)
    return read_layer_into(model_dir, manifest, i, buf, recorder)


def load_head(model_dir, manifest=None, recorder=None):
    if manifest is None:
        manifest = read_manifest(model_dir, check_files=False)
    with open(Path(model_dir) / HEAD_NAME, "rb") as f:
        data = _read_exact(f, 0, manifest.head_nbytes)
    if recorder is not None:
        recorder.record(HEAD_NAME, 0, manifest.head_nbytes)
    arr = np.frombuffer(data, dtype=FLOAT).astype(np.float32)
    return ScoreHead(weight=arr[:-1], bias=float(arr[-1]))


def read_position_table(model_dir, manifest=None, recorder=None):
    if manifest is None:
        manifest = read_manifest(model_dir, check_files=False)
    offset = manifest.vocab_size * manifest.row_nbytes
    nbytes = manifest.max_seq_len * manifest.row_nbytes
    with open(Path(model_dir) / EMBEDDING_NAME, "rb") as f:
        data = _read_exact(f, offset, nbytes)
    if recorder is not None:
        recorder.record(EMBEDDING_NAME, offset, nbytes)
    return np.frombuffer(data, dtype=FLOAT).astype(np.float32).reshape(manifest.max_seq_len, manifest.d_model)


def read_embedding_rows(model_dir, token_ids, manifest=None, recorder=None):
    """Gather token-table rows by seeking; runs of adjacent ids share one read."""
    if manifest is None:
        manifest = read_manifest(model_dir, check_files=False)
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    d = manifest.d_model
    if ids.size == 0:
        return np.empty((0, d), dtype=np.float32)
    if ids.min() < 0 or ids.max() >= manifest.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= manifest.vocab_size)][0])
        raise OutOfRangeError(f"token id {bad} outside [0, {manifest.vocab_size})")

    unique = np.unique(ids)
    rows = np.empty((unique.size, d), dtype=np.float32)
    stride = manifest.row_nbytes
    # split sorted unique ids into runs of consecutive values
    breaks = np.flatnonzero(np.diff(unique) != 1) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [unique.size]))
    with open(Path(model_dir) / EMBEDDING_NAME, "rb") as f:
        for a, b in zip(starts, ends):
            offset = int(unique[a]) * stride
            nbytes = int(b - a) * stride
            data = _read_exact(f, offset, nbytes)
            rows[a:b] = np.frombuffer(data, dtype=FLOAT).reshape(b - a, d)
            if recorder is not None:
                recorder.record(EMBEDDING_NAME, offset, nbytes)
    return rows[np.searchsorted(unique, ids)]


def gen_synthetic_model(spec, seed, dest):
    """Write a seeded random model to ``dest`` and return its path.

    Weight matrices, embeddings and the score head are drawn uniformly from
    [-0.05, 0.05]; RMSNorm gains are 1 plus a draw from the same range.
    The same (spec, seed) always produces byte-identical files.
    """
    manifest = spec.manifest()
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def draw(shape):
        return rng.uniform(-0.05, 0.05, size=shape).astype(FLOAT)

    for i in range(manifest.n_layers):
        with open(dest / layer_file_name(i), "wb") as f:
            for name, shape in manifest.layer_shapes():
                t = draw(shape)
                if name.startswith("norm_"):
                    t = (t + FLOAT.type(1.0)).astype(FLOAT)
                f.write(t.tobytes())
    with open(dest / EMBEDDING_NAME, "wb") as f:
        f.write(draw((manifest.vocab_size, manifest.d_model)).tobytes())
        f.write(draw((manifest.max_seq_len, manifest.d_model)).tobytes())
    with open(dest / HEAD_NAME, "wb") as f:
        f.write(draw((manifest.d_model + 1,)).tobytes())
    tmp = dest / (MANIFEST_NAME + ".tmp")
    tmp.write_text(manifest.to_json())
    os.replace(tmp, dest / MANIFEST_NAME)
    return dest


def load_all_layers(model_dir, manifest=None):
    if manifest is None:
        manifest = read_manifest(model_dir)
    return [load_layer(model_dir, i, manifest) for i in range(manifest.n_layers)]

