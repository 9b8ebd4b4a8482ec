"""Device throughput estimates used by the chunk planner."""
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor
from .store import layer_file_name, read_manifest


@dataclass(frozen=True)
class DeviceProfile:
    flops_per_second: float
    disk_bytes_per_second: float

    def __post_init__(self):
        if not (self.flops_per_second > 0 and self.disk_bytes_per_second > 0):
            raise ValueError(f"profile numbers must be positive: {self}")


def measure_profile(model_dir, manifest=None, duration=0.1):
    """Self-benchmark: half the budget on matmuls, half re-reading a layer file."""
    if manifest is None:
        manifest = read_manifest(model_dir)
    d = manifest.d_model
    rng = np.random.default_rng(0)
    a = rng.standard_normal((64, d)).astype(np.float32)
    b = rng.standard_normal((d, d)).astype(np.float32)

    half = duration / 2
    calls = 0
    t0 = time.perf_counter()
    while True:
        tensor.matmul(a, b)
        calls += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= half:
            break
    flops = 2.0 * 64 * d * d * calls / elapsed

    path = Path(model_dir) / layer_file_name(0)
    nbytes = 0
    t0 = time.perf_counter()
    while True:
        with open(path, "rb") as f:
            nbytes += len(f.read())
        elapsed = time.perf_counter() - t0
        if elapsed >= half:
            break
    return DeviceProfile(flops, nbytes / elapsed)
