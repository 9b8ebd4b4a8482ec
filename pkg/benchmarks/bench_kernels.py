"""Time the compiled tensor kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--d-model 64] [--seq-len 64]

Each row is the best of ``--repeats`` runs.  The fallback keeps a fixed
ascending-k accumulation order so both backends round identically, which
makes it far slower than a BLAS matmul; the compiled loops exist to win
that speed back without giving up bitwise agreement.
"""
import argparse
import timeit

import numpy as np

from monorank import tensor
from monorank.tensor import LayerWeights


def random_layer(rng, d, f):
    u = lambda *s: rng.uniform(-0.2, 0.2, s).astype(np.float32)  # noqa: E731
    return LayerWeights(u(d, d), u(d, d), u(d, d), u(d, d), u(d, f), u(f, d),
                        1 + u(d), 1 + u(d), 0)


def cases(args):
    rng = np.random.default_rng(0)
    d, f, L = args.d_model, 4 * args.d_model, args.seq_len
    x = rng.standard_normal((L, d)).astype(np.float32)
    w = rng.standard_normal((d, f)).astype(np.float32)
    h = x @ w
    g = np.ones(d, np.float32)
    layer = random_layer(rng, d, f)
    seqs = [rng.standard_normal((L, d)).astype(np.float32) for _ in range(args.candidates)]
    return {
        f"matmul {L}x{d} @ {d}x{f}": lambda: tensor.matmul(x, w),
        f"rms_norm {L}x{d}": lambda: tensor.rms_norm(x, g, 1e-6),
        f"gelu {L}x{f}": lambda: tensor.gelu(h),
        f"attention L={L} heads={args.heads}": lambda: tensor.attention(x, x, x, args.heads, True),
        f"layer x {args.candidates} candidates": lambda: tensor.forward_sequences(
            seqs, layer, True, args.heads
        ),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--candidates", type=int, default=8)
    args = p.parse_args(argv)

    backends = tensor.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the numpy fallback is available")
    table = {}
    for name in backends:
        with tensor.use_backend(name):
            for label, fn in cases(args).items():
                fn()  # warm up
                table.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeats))

    cols = sorted(backends, reverse=True)
    print(f"{'kernel':<34}" + "".join(f"{c + ' ms':>14}" for c in cols) + f"{'speedup':>10}")
    for label, row in table.items():
        line = f"{label:<34}" + "".join(f"{row[c] * 1e3:>14.3f}" for c in cols)
        if len(cols) == 2:
            line += f"{row['python'] / row['compiled']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
