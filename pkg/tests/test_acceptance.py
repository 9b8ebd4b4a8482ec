"""Exit criteria, one test each; the summary prints a PASS/FAIL line per criterion."""
import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from monorank.bench import bench_model, bench_overlap
from monorank.cache import EmbeddingCache, capacity_for
from monorank.engine import Engine, Runtime, ScriptedScorer, read_trace
from monorank.ledger import EMBEDDING_ROWS, HIDDEN_CHUNKS, LAYER_BUFFERS
from monorank.metrics import precision_at_k
from monorank.prune import (
    PruneConfig,
    ScoreSnapshot,
    calibrate_threshold,
    intermediate_scores,
    kmeans_1d,
    pruning_check,
)
from monorank.store import ModelSpec

from .conftest import FAST_PROFILE, random_batch
from .reference import ReferenceLRU, ReferenceModel, brute_contiguous_sse, exact_sse, zipf_probabilities
from .scenarios import (
    SIXTEEN,
    separable_records,
    staircase_run,
    staircase_set,
    working_example_batch,
    working_example_table,
)

pytestmark = pytest.mark.acceptance


def random_spec(rng):
    d = int(rng.choice([8, 16, 32, 64]))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
    return ModelSpec(
        n_layers=int(rng.integers(1, 17)),
        d_model=d,
        n_heads=heads,
        d_ff=int(rng.integers(4, 129)),
        vocab_size=int(rng.integers(50, 501)),
        max_seq_len=64,
        arch=str(rng.choice(["decoder_only", "encoder_only"])),
    )


def random_instance(rng, model_factory, seed):
    spec = random_spec(rng)
    model = model_factory(spec, seed)
    # N <= K returns right after layer 0 by contract, so keep K < N possible
    n = int(rng.integers(2, 25))
    batch = random_batch(rng, n, spec.vocab_size, int(rng.integers(4, 65)))
    return spec, model, batch


class RecordingScorer:
    """The real score head, keeping a copy of every hidden state it sees."""

    def __init__(self, engine):
        self.engine = engine
        self.states = {}

    def __call__(self, layer, ids, states):
        for c, s in zip(ids, states):
            self.states[layer, c] = s.copy()
        return intermediate_scores(states, self.engine.head, self.engine.manifest)


@pytest.mark.criterion(1, "oracle equivalence with pruning disabled (50 instances, 1e-5)")
def test_oracle_equivalence(model_factory):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        spec, model, batch = random_instance(rng, model_factory, seed)
        k = int(rng.integers(1, batch.n))
        rt = Runtime(profile=FAST_PROFILE, chunk_size=int(rng.integers(1, batch.n + 1)))
        res = Engine(model, rt).rerank(batch, k, PruneConfig(math.inf))
        ref = ReferenceModel(model)
        top, scores = ref.topk(batch.sequences, k)
        assert set(res.ids) == {batch.candidate_ids[p] for p in top}, f"instance {seed}"
        for e in res.entries:
            p = batch.candidate_ids.index(e.candidate_id)
            worst = max(worst, abs(e.score - scores[p]))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-5, worst
    assert elapsed < 120, elapsed


@pytest.mark.criterion(2, "bitwise invariance across chunk plans and weight sources (20 instances)")
def test_chunking_streaming_invariance(model_factory):
    rng = np.random.default_rng(77)
    for seed in range(20):
        spec, model, batch = random_instance(rng, model_factory, 100 + seed)
        runs = []
        for size, stream in itertools.product(sorted({batch.n, -(-batch.n // 2), 1}), (True, False)):
            eng = Engine(model, Runtime(profile=FAST_PROFILE, chunk_size=size, stream_weights=stream))
            rec = RecordingScorer(eng)
            res = eng.rerank(batch, batch.n - 1, PruneConfig(math.inf), scorer=rec)
            assert res.plan["chunk_size"] == size
            runs.append((rec.states, {e.candidate_id: e.score for e in res.entries}))
        base_states, base_scores = runs[0]
        assert len(base_states) == spec.n_layers * batch.n
        for states, scores in runs[1:]:
            assert scores == base_scores
            for key, s in base_states.items():
                assert np.array_equal(states[key].view(np.uint32), s.view(np.uint32))


@pytest.mark.criterion(3, "residency bounds: <=2 layers, <=3 hidden chunks, embedding rows <= capacity")
def test_residency_bounds(model_factory):
    rng = np.random.default_rng(3)
    for seed in range(12):
        spec, model, batch = random_instance(rng, model_factory, 200 + seed)
        capacity = capacity_for(spec.vocab_size, 0.10)
        for offload in (False, True):
            eng = Engine(model, Runtime(profile=FAST_PROFILE, offload=offload, chunk_size=1))
            res = eng.rerank(batch, max(1, batch.n // 3), PruneConfig(0.05))
            peak = res.ledger["peak"]
            assert peak[LAYER_BUFFERS] <= 2
            if offload:
                assert peak[HIDDEN_CHUNKS] <= 3
            assert eng.ledger.peak[EMBEDDING_ROWS] <= capacity
            assert res.ledger["violations"] == 0
            for row in res.trace:
                assert row["ledger"]["peak"][LAYER_BUFFERS] <= 2
                if offload:
                    assert row["ledger"]["peak"][HIDDEN_CHUNKS] <= 3
    # enough chunks that the three-chunk bound is the binding one
    eng = Engine(model_factory(SIXTEEN, 0), Runtime(profile=FAST_PROFILE, offload=True, chunk_size=2))
    res = eng.rerank(working_example_batch(), 10)
    assert res.plan["chunks"] == 10 and res.ledger["peak"][HIDDEN_CHUNKS] == 3


@pytest.mark.criterion(4, "working-example trace (20 candidates, K=10, 10 chunks of 2)")
def test_working_example(model_factory, tmp_path):
    path = tmp_path / "trace.jsonl"
    rt = Runtime(profile=FAST_PROFILE, chunk_size=2, scorer=ScriptedScorer(working_example_table()),
                 trace_path=str(path))
    res = Engine(model_factory(SIXTEEN, 0), rt).rerank(working_example_batch(), 10, PruneConfig(0.2))
    rows = read_trace(path)
    assert rows[0]["chunks"] == 10 and rows[0]["chunk_size"] == 2
    prunes = [r for r in rows if r["action"] != "none"]
    first, last = prunes
    # after layer 9 means before layer 10 runs
    assert first["layer"] == 9 and first["action"] == "prune"
    assert (first["selected"], first["dropped"], first["deferred"]) == (2, 2, 16)
    assert rows[10]["action"] == "none"
    assert last["layer"] == 11 and last["action"] == "terminate"
    assert len(res.ids) == 10 and rows[-1] is last


@pytest.mark.criterion(5, "1-D k-means DP equals exhaustive SSE (200 instances, exact)")
def test_kmeans_optimality():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 13))
        k = int(rng.integers(1, min(4, n) + 1))
        scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4))).tolist()
        c = kmeans_1d(scores, k)
        groups = [[s for s, lab in zip(scores, c.labels) if lab == j] for j in range(c.k)]
        assert exact_sse(groups) == brute_contiguous_sse(scores, k)


@pytest.mark.criterion(6, "routing laws on 1,000 fuzzed score vectors")
def test_routing_laws_fuzzed():
    rng = np.random.default_rng(6)
    checked = 0
    for trial in range(1000):
        n = int(rng.integers(2, 41))
        scores = rng.uniform(0.001, 1, n)
        if trial % 3 == 0:
            scores = np.ceil(scores * 10) / 10  # plenty of ties
        ids = rng.permutation(1000)[:n].tolist()
        snap = ScoreSnapshot.build(0, ids, scores.tolist())
        remaining = int(rng.integers(1, n + 1))
        cfg = PruneConfig(0.0, "auto" if trial % 2 else int(rng.integers(1, 6)),
                          "drop_only" if trial % 5 == 0 else "accept_and_drop")
        d = pruning_check(snap, remaining, cfg)
        if snap.cv == 0:
            continue
        checked += 1
        sc = snap.score_of()
        sel, dfr, drp = d.selected_ids, d.deferred_ids, d.dropped_ids
        assert sorted(sel + dfr + drp) == sorted(ids)
        assert len(sel) + len(dfr) + len(drp) == n
        for hi, lo in ((sel, dfr), (dfr, drp), (sel, drp)):
            if hi and lo:
                assert min(sc[i] for i in hi) > max(sc[i] for i in lo)
        assert len(sel) < remaining <= len(sel) + len(dfr)
        assert d.terminate == (len(dfr) == remaining - len(sel))
        if cfg.mode == "drop_only":
            assert not sel
    assert checked >= 950


@pytest.mark.criterion(7, "weight streaming overlap: <=0.7 of sequential, zero delay within 10%")
def test_overlap(tmp_path):
    model = bench_model(tmp_path / "bench", seed=0, n_layers=12)
    rep = bench_overlap(model)
    assert rep.n_layers == 12 and rep.peak_layer_buffers <= 2
    assert rep.pipelined <= 0.7 * rep.sequential_bound, rep.to_dict()
    zero = bench_overlap(model, 0.0)
    assert zero.pipelined <= 1.10 * zero.compute_only, zero.to_dict()


@pytest.mark.criterion(8, "pruning saves >=30% compute at equal Precision@K on separable data")
def test_pruning_saves_compute(model_factory):
    eng = Engine(model_factory(SIXTEEN, 0), Runtime(profile=FAST_PROFILE))
    records = separable_records(np.random.default_rng(8), 10)
    totals = {}
    for t in (math.inf, 0.2):
        units, precisions = 0, []
        for r in records:
            res = eng.rerank(r.batch, 5, PruneConfig(t), scorer=ScriptedScorer(r.scores_by_layer))
            units += res.compute_units
            precisions.append(precision_at_k(list(res.ids), r.relevant, 5, exact=True))
        totals[t] = (units, sum(precisions) / len(precisions))
    assert totals[math.inf][1] == totals[0.2][1] == 1
    assert totals[0.2][0] <= 0.7 * totals[math.inf][0], totals


@pytest.mark.criterion(9, "calibration picks the minimum feasible grid threshold, inf when infeasible")
def test_calibration():
    grid = [0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05]
    cal = calibrate_threshold(staircase_set(), 5, 0.95, grid, staircase_run)
    assert cal.threshold == 0.3 and not cal.warning
    assert cal.precision_by_threshold == {t: (1.0 if t >= 0.3 else 0.8) for t in grid}
    cal = calibrate_threshold(staircase_set(), 5, 1.0, [0.25, 0.1], staircase_run)
    assert math.isinf(cal.threshold) and cal.warning


@pytest.mark.criterion(10, "LRU matches the oracle on 10,000 steps; Zipf(1.0) hit rate >= 80% at 10%")
def test_lru(model_factory):
    model = model_factory(ModelSpec(n_layers=1, d_model=8, n_heads=1, d_ff=8, vocab_size=10_000,
                                    max_seq_len=512), 0)
    rng = np.random.default_rng(10)
    cache = EmbeddingCache(model, 1000)
    ref = ReferenceLRU(1000)
    for t in rng.integers(0, 2000, 10_000).tolist():
        _, stats = cache.lookup_batch([t])
        assert stats.hits == int(ref.access(t))
    assert cache.resident_ids() == ref.order and cache.evictions == ref.evicted

    # one reranking batch: 20 candidates of 512 tokens
    cache = EmbeddingCache(model, capacity_for(10_000, 0.10))
    p = zipf_probabilities(10_000, 1.0)
    cache.lookup_batch(rng.choice(10_000, 20 * 512, p=p))
    hits = total = 0
    for _ in range(30):
        _, stats = cache.lookup_batch(rng.choice(10_000, 20 * 512, p=p))
        hits += stats.hits
        total += stats.hits + stats.misses
    rate = hits / total
    print(f"Zipf(1.0) steady-state hit rate at 10% capacity: {rate:.4f}")
    assert rate >= 0.80, f"hit rate {rate:.4f}; a static top-1000 cache would reach {p[:1000].sum():.4f}"


@pytest.mark.criterion(11, "Precision@K on hand-built cases, exact rationals")
def test_precision_at_k():
    cases = [
        (["a", "b", "c"], {"a", "b", "c"}, 3, Fraction(1)),
        (["a", "x", "y"], {"a", "b", "c"}, 3, Fraction(1, 3)),
        (["a", "x", "y", "z"], {"a"}, 4, Fraction(1)),
        (["a", "b", "x", "y", "z"], {"a", "b", "q"}, 5, Fraction(2, 3)),
        (["x", "y"], {"a", "b"}, 2, Fraction(0)),
        (["x", "a", "b"], {"a", "b"}, 1, Fraction(0)),
        (["a", "b", "c", "d"], {"d", "e", "f", "g", "h"}, 4, Fraction(1, 4)),
    ]
    for pred, rel, k, want in cases:
        got = precision_at_k(pred, rel, k, exact=True)
        assert isinstance(got, Fraction) and got == want, (pred, rel, k)
