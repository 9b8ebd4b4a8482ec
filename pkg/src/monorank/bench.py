"""I/O-compute overlap harness for the weight streamer.

Three passes over the same hidden states:

* compute-only: every layer preloaded, no I/O at all;
* pipelined: layers streamed through the dual-layer window with an injected
  per-layer read delay;
* the sequential bound is not run but computed, as the sum of per-layer
  compute plus per-layer I/O (injected delay plus measured file read).
"""
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor
from .ledger import LAYER_BUFFERS, MemoryLedger
from .store import ModelSpec, gen_synthetic_model, layer_file_name, read_manifest
from .streamer import PreloadedWeights, WeightStreamer


@dataclass(frozen=True)
class OverlapReport:
    n_layers: int
    injected_delay: float
    compute_only: float
    pipelined: float
    sequential_bound: float
    read_seconds: float
    weight_wait: float
    peak_layer_buffers: int

    @property
    def overlap_ratio(self):
        return self.pipelined / self.sequential_bound

    @property
    def slowdown_vs_compute(self):
        return self.pipelined / self.compute_only

    def to_dict(self):
        d = asdict(self)
        d["overlap_ratio"] = self.overlap_ratio
        d["slowdown_vs_compute"] = self.slowdown_vs_compute
        return d


def bench_hidden(manifest, n_candidates, seq_len, seed=0):
    rng = np.random.default_rng(seed)
    return [
        rng.standard_normal((seq_len, manifest.d_model)).astype(np.float32)
        for _ in range(n_candidates)
    ]


def run_layers(source, hidden, manifest):
    """Forward ``hidden`` through every layer of ``source``; return (wall, per-layer compute)."""
    per_layer = []
    t0 = time.perf_counter()
    states = hidden
    for i in range(manifest.n_layers):
        w = source.acquire(i)
        c0 = time.perf_counter()
        states = tensor.forward_sequences(
            states, w, manifest.causal, manifest.n_heads, manifest.rms_eps
        )
        per_layer.append(time.perf_counter() - c0)
        source.release(i)
    return time.perf_counter() - t0, per_layer


def measure_read(model_dir, manifest, repeats=3):
    """Mean seconds to read one layer file (page-cache warm)."""
    best = []
    for i in range(manifest.n_layers):
        path = Path(model_dir) / layer_file_name(i)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            with open(path, "rb") as f:
                f.read()
            times.append(time.perf_counter() - t0)
        best.append(min(times))
    return float(np.mean(best))


def bench_overlap(model_dir, delay=None, *, n_candidates=32, seq_len=64, repeats=3, seed=0):
    """Time compute-only and pipelined passes; ``delay=None`` injects the measured compute time.

    Every timing is the best of ``repeats`` runs.
    """
    manifest = read_manifest(model_dir)
    hidden = bench_hidden(manifest, n_candidates, seq_len, seed)

    layers = PreloadedWeights(model_dir, manifest=manifest).layers
    compute_runs = []
    for _ in range(repeats):
        with PreloadedWeights(model_dir, manifest=manifest, layers=layers) as src:
            compute_runs.append(run_layers(src, hidden, manifest))
    compute_only, per_layer = min(compute_runs, key=lambda r: r[0])
    if delay is None:
        delay = float(np.mean(per_layer))

    ledger = MemoryLedger({LAYER_BUFFERS: 2})
    best_wall, best_wait = None, None
    for _ in range(repeats):
        with WeightStreamer(model_dir, manifest=manifest, ledger=ledger, delay=delay) as s:
            wall, _ = run_layers(s, hidden, manifest)
            if best_wall is None or wall < best_wall:
                best_wall, best_wait = wall, s.wait_seconds

    read = measure_read(model_dir, manifest)
    bound = compute_only + manifest.n_layers * (delay + read)
    return OverlapReport(
        n_layers=manifest.n_layers,
        injected_delay=delay,
        compute_only=compute_only,
        pipelined=best_wall,
        sequential_bound=bound,
        read_seconds=read,
        weight_wait=best_wait,
        peak_layer_buffers=ledger.peak[LAYER_BUFFERS],
    )


def bench_model(dest, seed=0, n_layers=12):
    """Generate the default 12-layer benchmark model under ``dest``."""
    gen_synthetic_model(ModelSpec(n_layers=n_layers), seed, dest)
    return dest
