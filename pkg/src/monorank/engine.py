"""Monolithic forwarding: every candidate advances through the layers together.

One call to :meth:`Engine.rerank` runs

1. the embedding stage through the LRU row cache,
2. for each layer: acquire the streamed weights, forward the active batch
   chunk by chunk (optionally spilling hidden states), release the weights,
   score every active candidate,
3. a pruning check on those scores before the next layer, which may accept,
   drop, or defer candidates and may terminate the pass early,

and assembles the top-K with a per-layer trace.

Candidates are addressed internally by their position in the batch; ties in
score are broken by that position.
"""
import json
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .cache import BatchStats, EmbeddingCache, capacity_for
from .errors import ContractError, InputError, PlanningError
from .ledger import EMBEDDING_ROWS, HIDDEN_CHUNKS, LAYER_BUFFERS, MemoryLedger
from .profile import DeviceProfile, measure_profile
from .prune import PruneConfig, ScoreSnapshot, intermediate_scores, pruning_check, ranking
from .spill import HiddenSpill
from .store import load_head, read_manifest, read_position_table
from .streamer import PreloadedWeights, WeightStreamer

TRACE_SCHEMA = 1
BUCKETS = ("embed", "compute", "weight_wait", "spill_wait", "prune")


@dataclass(frozen=True)
class CandidateBatch:
    """Query plus candidates; each sequence is the query followed by one candidate."""

    query: tuple
    sequences: tuple
    candidate_ids: tuple

    @classmethod
    def from_pairs(cls, query, candidates):
        """Build from ``query`` token ids and ``(candidate_id, token_ids)`` pairs."""
        query = tuple(int(t) for t in query)
        ids, seqs = [], []
        for cid, tokens in candidates:
            ids.append(cid)
            seqs.append(query + tuple(int(t) for t in tokens))
        return cls(query, tuple(seqs), tuple(ids))

    @property
    def n(self):
        return len(self.sequences)

    def lengths(self):
        return [len(s) for s in self.sequences]

    def validate(self, manifest):
        if self.n < 1:
            raise ContractError("batch has no candidates")
        if len(self.candidate_ids) != self.n:
            raise ContractError("candidate_ids and sequences differ in length")
        if len(set(self.candidate_ids)) != self.n:
            raise ContractError("candidate ids must be unique")
        for cid, seq in zip(self.candidate_ids, self.sequences):
            if not seq:
                raise ContractError(f"candidate {cid!r} has an empty sequence")
            if len(seq) > manifest.max_seq_len:
                raise ContractError(
                    f"candidate {cid!r}: sequence length {len(seq)} exceeds max_seq_len {manifest.max_seq_len}"
                )
            bad = [t for t in seq if not 0 <= t < manifest.vocab_size]
            if bad:
                raise ContractError(f"candidate {cid!r}: token id {bad[0]} outside vocabulary")


def layer_flops(length, manifest):
    """Multiply-add count x2 for one layer over one sequence."""
    d, f = manifest.d_model, manifest.d_ff
    return 2.0 * (4 * length * d * d + 2 * length * d * f + 2 * length * length * d)


def intermediate_nbytes(length, manifest):
    """Transient bytes one sequence needs inside a layer (activations and scores)."""
    d, f = manifest.d_model, manifest.d_ff
    return 4 * (6 * length * d + length * length + 2 * length * f)


@dataclass(frozen=True)
class ChunkPlan:
    chunks: tuple
    chunk_size: int
    offload_enabled: bool
    rationale: dict = field(default_factory=dict)

    @property
    def n_chunks(self):
        return len(self.chunks)


def plan_chunks(batch, manifest, profile, budget=math.inf, *, active=None, offload=False,
                chunk_size=None):
    """Split the active candidates into sequentially executed chunks.

    The chunk size is the smallest candidate count whose estimated compute
    time covers the time to read one layer file, so the next layer's weights
    arrive before the current layer finishes.  It is then reduced until one
    chunk's intermediate tensors fit ``budget`` bytes and clamped to [1, N].
    ``chunk_size`` overrides the compute target (the budget still applies).
    """
    if not (profile.flops_per_second > 0 and profile.disk_bytes_per_second > 0):
        raise ContractError("profile numbers must be positive")
    if not budget > 0:
        raise ContractError(f"budget must be positive, got {budget}")
    active = list(range(batch.n)) if active is None else list(active)
    if not active:
        raise ContractError("no active candidates to plan")
    lengths = [len(batch.sequences[p]) for p in active]
    n = len(active)

    per_cand = [layer_flops(L, manifest) / profile.flops_per_second for L in lengths]
    mean_compute = sum(per_cand) / n
    io_time = manifest.layer_nbytes / profile.disk_bytes_per_second
    target = max(1, math.ceil(io_time / mean_compute - 1e-12))

    per_cand_bytes = max(intermediate_nbytes(L, manifest) for L in lengths)
    if per_cand_bytes > budget:
        raise PlanningError(
            f"budget {budget} bytes is below one candidate's intermediate tensors "
            f"({per_cand_bytes} bytes)",
            min_budget=per_cand_bytes,
        )
    memory_cap = n if math.isinf(budget) else int(budget // per_cand_bytes)

    size = target if chunk_size is None else int(chunk_size)
    size = max(1, min(size, memory_cap, n))
    chunks = tuple(tuple(active[i : i + size]) for i in range(0, n, size))
    return ChunkPlan(
        chunks=chunks,
        chunk_size=size,
        offload_enabled=bool(offload),
        rationale={
            "compute_estimate": mean_compute * size,
            "io_estimate": io_time,
            "memory_cap": memory_cap,
            "candidate_bytes": per_cand_bytes,
            "overlap_target": target,
        },
    )


def forward_layer_chunked(weights, plan, hidden, *, manifest, offload_store=None, on_chunk=None,
                          timings=None):
    """Forward every chunk of ``plan`` through one layer.

    Without offload ``hidden`` maps candidate -> state and is updated in place.
    With ``offload_store`` the states live on disk; each chunk is loaded,
    computed and written back while the next chunk is prefetched.
    ``on_chunk(ids, states)`` sees each chunk's output while it is resident.
    """
    def compute(states):
        t0 = time.perf_counter()
        out = tensor.forward_sequences(
            states, weights, manifest.causal, manifest.n_heads, manifest.rms_eps
        )
        if timings is not None:
            timings["compute"] += time.perf_counter() - t0
        return out

    if offload_store is None:
        for ids in plan.chunks:
            out = compute([hidden[c] for c in ids])
            for c, s in zip(ids, out):
                hidden[c] = s
            if on_chunk is not None:
                on_chunk(ids, out)
        return hidden

    store = offload_store
    chunks = plan.chunks
    # loads whose ledger entry has not yet been handed over to a write
    in_flight = [store.load(0, chunks[0])]
    try:
        for j, ids in enumerate(chunks):
            t0 = time.perf_counter()
            states = in_flight[0][0].result()
            if timings is not None:
                timings["spill_wait"] += time.perf_counter() - t0
            if j + 1 < len(chunks):
                in_flight.append(store.load(j + 1, chunks[j + 1]))
            out = compute(states)
            if on_chunk is not None:
                on_chunk(ids, out)
            store.store(j, ids, out)
            in_flight.pop(0)
    except BaseException:
        for fut, nbytes in in_flight:
            store.abandon(fut, nbytes)
        raise
    t0 = time.perf_counter()
    store.flush()
    if timings is not None:
        timings["spill_wait"] += time.perf_counter() - t0
    return store


class ScriptedScorer:
    """Replays a fixed per-layer score table instead of running the score head.

    ``table[layer][candidate]`` is the score of a candidate after ``layer``.
    """

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ContractError("score table must be layers x candidates")

    def __call__(self, layer, ids, states):
        if layer >= self.table.shape[0]:
            raise ContractError(f"score table has no row for layer {layer}")
        return self.table[layer, list(ids)]


@dataclass
class Runtime:
    cache_fraction: float = 0.10
    budget: float = math.inf
    offload: bool = False
    profile: DeviceProfile = None
    chunk_size: int = None
    stream_weights: bool = True
    io_delay: object = None
    recorder: object = None
    scorer: object = None
    spill_dir: str = None
    trace_path: str = None


@dataclass(frozen=True)
class ResultEntry:
    candidate_id: object
    score: float
    exit_layer: int
    status: str  # "accepted" | "survivor"


@dataclass
class RerankResult:
    ids: tuple
    entries: tuple
    outcomes: dict
    trace: list
    ledger: dict
    timings: dict
    compute_units: int
    layers_executed: int
    cache_stats: dict
    plan: dict
    notice: str = None

    def to_dict(self):
        return {
            "ids": list(self.ids),
            "entries": [
                {"id": e.candidate_id, "score": e.score, "exit_layer": e.exit_layer, "status": e.status}
                for e in self.entries
            ],
            "outcomes": [
                {"id": cid, "status": status, "layer": layer}
                for cid, (status, layer) in self.outcomes.items()
            ],
            "compute_units": self.compute_units,
            "layers_executed": self.layers_executed,
            "cache": self.cache_stats,
            "plan": self.plan,
            "ledger": self.ledger,
            "notice": self.notice,
            "scores_note": "scores are layer-local and not comparable across exit layers",
            "trace": self.trace,
            "timings": self.timings,
        }


class Engine:
    """Reranking engine bound to one model directory.

    The embedding cache lives as long as the engine.  Calls must not overlap;
    a concurrent call raises :class:`ContractError`.
    """

    def __init__(self, model_dir, runtime=None):
        self.model_dir = model_dir
        self.runtime = runtime if runtime is not None else Runtime()
        rt = self.runtime
        self.manifest = read_manifest(model_dir)
        m = self.manifest
        limits = {}
        if rt.stream_weights:
            limits[LAYER_BUFFERS] = 2
        if rt.offload:
            limits[HIDDEN_CHUNKS] = 3
        self.ledger = MemoryLedger(limits)
        self.head = load_head(model_dir, m, rt.recorder)
        self.positions = read_position_table(model_dir, m, rt.recorder)
        self.cache = EmbeddingCache(
            model_dir, capacity_for(m.vocab_size, rt.cache_fraction),
            manifest=m, ledger=self.ledger, recorder=rt.recorder,
        )
        self.profile = rt.profile if rt.profile is not None else measure_profile(model_dir, m)
        self._busy = threading.Lock()

    def embed(self, batch, positions):
        """Token rows plus position rows for the given batch positions."""
        flat = [t for p in positions for t in batch.sequences[p]]
        rows, stats = self.cache.lookup_batch(flat)
        states = {}
        start = 0
        for p in positions:
            n = len(batch.sequences[p])
            states[p] = rows[start : start + n] + self.positions[:n]
            start += n
        return states, stats

    def _weights(self):
        rt = self.runtime
        if rt.stream_weights:
            return WeightStreamer(
                self.model_dir, 0, manifest=self.manifest, ledger=self.ledger,
                recorder=rt.recorder, delay=rt.io_delay,
            )
        return PreloadedWeights(self.model_dir, manifest=self.manifest, ledger=self.ledger)

    def _plan(self, batch, active):
        rt = self.runtime
        return plan_chunks(
            batch, self.manifest, self.profile, rt.budget,
            active=active, offload=rt.offload, chunk_size=rt.chunk_size,
        )

    def _score_fn(self, layer, scores, scorer):

        def on_chunk(ids, states):
            if scorer is not None:
                vals = scorer(layer, ids, states)
            else:
                vals = intermediate_scores(states, self.head, self.manifest)
            for c, v in zip(ids, vals):
                scores[c] = float(v)

        return on_chunk

    def rerank(self, batch, k, cfg=None, *, scorer=None):
        """Top-``k`` of ``batch``; ``scorer`` overrides the runtime's score source for this call."""
        if not self._busy.acquire(blocking=False):
            raise ContractError("engine is already running a rerank call")
        try:
            scorer = scorer if scorer is not None else self.runtime.scorer
            return self._rerank(batch, k, cfg if cfg is not None else PruneConfig(), scorer)
        finally:
            self._busy.release()

    def _rerank(self, batch, k, cfg, scorer):
        if not isinstance(k, int) or k < 1:
            raise ContractError(f"K must be a positive integer, got {k!r}")
        m = self.manifest
        rt = self.runtime
        batch.validate(m)
        n = batch.n
        k_eff = min(k, n)
        notice = None
        if k > n:
            notice = f"K={k} exceeds the {n} candidates; returning all of them"
        degenerate = n <= k

        ledger = self.ledger
        ledger.reset_peaks((LAYER_BUFFERS, HIDDEN_CHUNKS))
        timings = dict.fromkeys(BUCKETS, 0.0)
        wall0 = time.perf_counter()

        active = list(range(n))
        plan = self._plan(batch, active)
        first_plan = {"chunk_size": plan.chunk_size, "chunks": plan.n_chunks, **plan.rationale}
        accepted = []  # (candidate, score, layer)
        outcomes = {}
        trace = []
        units = 0
        scores = {}
        last_layer = -1
        terminated = False

        source = self._weights()
        spill = None
        hidden = None
        in_memory_chunks = 0
        try:
            t0 = time.perf_counter()
            if rt.offload:
                spill = HiddenSpill(m.d_model, directory=rt.spill_dir, ledger=ledger)
                hits = misses = 0
                for j, ids in enumerate(plan.chunks):
                    # one chunk being embedded, at most two being written
                    spill.wait_writes(keep=2)
                    states, stats = self.embed(batch, ids)
                    hits, misses = hits + stats.hits, misses + stats.misses
                    spill.store(j, ids, [states[c] for c in ids], counted=False)
                spill.flush()
                cache_stats = BatchStats(hits, misses)
            else:
                hidden, cache_stats = self.embed(batch, active)
                in_memory_chunks = plan.n_chunks
                ledger.acquire(HIDDEN_CHUNKS, in_memory_chunks)
            timings["embed"] += time.perf_counter() - t0

            for layer in range(m.n_layers):
                t0 = time.perf_counter()
                weights = source.acquire(layer)
                timings["weight_wait"] += time.perf_counter() - t0
                forward_layer_chunked(
                    weights, plan, hidden, manifest=m, offload_store=spill,
                    on_chunk=self._score_fn(layer, scores, scorer), timings=timings,
                )
                source.release(layer)
                units += len(active)
                last_layer = layer

                t0 = time.perf_counter()
                snapshot = ScoreSnapshot.build(layer, active, [scores[c] for c in active])
                record = {
                    "schema": TRACE_SCHEMA,
                    "layer": layer,
                    "active": len(active),
                    "cv": snapshot.cv,
                    "action": "none",
                    "selected": 0,
                    "deferred": len(active),
                    "dropped": 0,
                    "accepted_total": len(accepted),
                    "chunks": plan.n_chunks,
                    "chunk_size": plan.chunk_size,
                    "replanned": False,
                }
                final = degenerate or layer == m.n_layers - 1
                decision = None if final else pruning_check(snapshot, k_eff - len(accepted), cfg)
                if final:
                    record["action"] = "final"
                elif decision is not None:
                    record.update(decision.counts())
                    record["action"] = "terminate" if decision.terminate else "prune"
                    score_of = snapshot.score_of()
                    for c in decision.selected_ids:
                        accepted.append((c, score_of[c], layer))
                        outcomes[c] = ("accepted", layer)
                    for c in decision.dropped_ids:
                        outcomes[c] = ("dropped", layer)
                    pruned = list(decision.selected_ids) + list(decision.dropped_ids)
                    keep = set(decision.deferred_ids)
                    active = [c for c in active if c in keep]
                    terminated = decision.terminate
                    if pruned and not terminated:
                        if spill is not None:
                            spill.forget(pruned)
                        else:
                            for c in pruned:
                                hidden.pop(c, None)
                        plan = self._plan(batch, active)
                        record["replanned"] = True
                        if spill is None:
                            ledger.release(HIDDEN_CHUNKS, in_memory_chunks)
                            in_memory_chunks = plan.n_chunks
                            ledger.acquire(HIDDEN_CHUNKS, in_memory_chunks)
                record["accepted_total"] = len(accepted)
                timings["prune"] += time.perf_counter() - t0
                self._finish_record(record, timings)
                trace.append(record)
                if final or terminated:
                    break
        finally:
            source.close()
            if spill is not None:
                spill.close()
            if in_memory_chunks:
                ledger.release(HIDDEN_CHUNKS, in_memory_chunks)

        order = ranking([scores[c] for c in active], active)
        survivors = [active[p] for p in order]
        if not terminated:
            survivors = survivors[: k_eff - len(accepted)]
        cut = set(survivors)
        for c in active:
            # ranked below the top-K cut by the final scores
            outcomes[c] = ("survivor" if c in cut else "dropped", last_layer)

        acc_order = sorted(accepted, key=lambda a: (-a[1], a[0]))
        entries = [
            ResultEntry(batch.candidate_ids[c], s, layer, "accepted") for c, s, layer in acc_order
        ] + [
            ResultEntry(batch.candidate_ids[c], scores[c], last_layer, "survivor")
            for c in survivors
        ]
        timings["wall"] = time.perf_counter() - wall0
        result = RerankResult(
            ids=tuple(e.candidate_id for e in entries),
            entries=tuple(entries),
            outcomes={batch.candidate_ids[c]: outcomes[c] for c in range(n)},
            trace=trace,
            ledger=ledger.snapshot(),
            timings=timings,
            compute_units=units,
            layers_executed=last_layer + 1,
            cache_stats={
                "hits": cache_stats.hits, "misses": cache_stats.misses,
                "capacity": self.cache.capacity, "resident": len(self.cache),
            },
            plan=first_plan,
            notice=notice,
        )
        if rt.trace_path is not None:
            write_trace(rt.trace_path, trace)
        return result

    def _finish_record(self, record, timings):
        snap = self.ledger.snapshot()
        record["ledger"] = {"resident": snap["resident"], "peak": snap["peak"]}
        record["timings"] = {b: timings[b] for b in BUCKETS}


def write_trace(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_trace(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def rerank(model_dir, batch, k, cfg=None, runtime=None):
    """One-shot convenience wrapper around :class:`Engine`."""
    return Engine(model_dir, runtime).rerank(batch, k, cfg)
