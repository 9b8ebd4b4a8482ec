"""LRU cache over token-embedding rows.

Only ``capacity`` rows of the token table are kept in memory.  A lookup
deduplicates the batch, serves resident rows, and fetches every missing row
with one ordered, seek-based read.  Within a batch an id's recency is the
position of its last occurrence, and repeated occurrences count as hits.
"""
import math
from collections import OrderedDict
from typing import NamedTuple

import numpy as np

from .errors import ContractError, OutOfRangeError
from .ledger import EMBEDDING_ROWS, MemoryLedger
from .store import read_embedding_rows, read_manifest


class BatchStats(NamedTuple):
    hits: int
    misses: int


class EmbeddingCache:
    def __init__(self, model_dir, capacity, *, manifest=None, ledger=None, recorder=None):
        if not isinstance(capacity, int) or capacity < 1:
            raise ContractError(f"cache capacity must be a positive integer, got {capacity!r}")
        self.model_dir = model_dir
        self.manifest = manifest if manifest is not None else read_manifest(model_dir)
        self.capacity = capacity
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self.ledger.set_limit(EMBEDDING_ROWS, capacity)
        self.recorder = recorder
        self.hits = 0
        self.misses = 0
        self.evictions = []
        self._rows = OrderedDict()

    def __len__(self):
        return len(self._rows)

    def __contains__(self, token_id):
        return token_id in self._rows

    def resident_ids(self):
        """Resident ids from least to most recently used."""
        return list(self._rows)

    def _insert(self, token_id, row):
        if len(self._rows) >= self.capacity:
            evicted, _ = self._rows.popitem(last=False)
            self.evictions.append(evicted)
            self.ledger.release(EMBEDDING_ROWS, 1, self.manifest.row_nbytes)
        self.ledger.acquire(EMBEDDING_ROWS, 1, self.manifest.row_nbytes)
        self._rows[token_id] = row
        assert len(self._rows) <= self.capacity

    def lookup_batch(self, token_ids):
        """Return the embedding rows for ``token_ids`` and this batch's hit/miss counts."""
        ids = [int(t) for t in token_ids]
        vocab = self.manifest.vocab_size
        for t in ids:
            if not 0 <= t < vocab:
                raise OutOfRangeError(f"token id {t} outside [0, {vocab})")

        # unique ids ordered by last occurrence == recency order after the batch
        last = {}
        for t in ids:
            last.pop(t, None)
            last[t] = True
        order = list(last)
        missing = [t for t in order if t not in self._rows]
        fetched = {}
        if missing:
            wanted = sorted(missing)
            rows = read_embedding_rows(self.model_dir, wanted, self.manifest, self.recorder)
            fetched = {t: rows[j].copy() for j, t in enumerate(wanted)}

        served = {t: fetched[t] if t in fetched else self._rows[t] for t in order}
        out = np.empty((len(ids), self.manifest.d_model), dtype=np.float32)
        for j, t in enumerate(ids):
            out[j] = served[t]

        # a hit can be evicted by an earlier insert when the batch outgrows the cache
        for t in order:
            if t in self._rows:
                self._rows.move_to_end(t)
            else:
                self._insert(t, served[t])

        stats = BatchStats(hits=len(ids) - len(missing), misses=len(missing))
        self.hits += stats.hits
        self.misses += stats.misses
        return out, stats

    @property
    def hit_rate(self):
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def clear(self):
        n = len(self._rows)
        if n:
            self.ledger.release(EMBEDDING_ROWS, n, n * self.manifest.row_nbytes)
        self._rows.clear()


def capacity_for(vocab_size, capacity_fraction):
    if not 0 < capacity_fraction <= 1:
        raise ContractError(f"capacity fraction must be in (0, 1], got {capacity_fraction}")
    return max(1, math.floor(capacity_fraction * vocab_size))


def configure_cache(model_dir, capacity_fraction, **kwargs):
    """Create an empty cache sized to ``floor(fraction * vocab_size)`` rows (at least 1)."""
    manifest = kwargs.pop("manifest", None) or read_manifest(model_dir)
    capacity = capacity_for(manifest.vocab_size, capacity_fraction)
    return EmbeddingCache(model_dir, capacity, manifest=manifest, **kwargs)


def lookup_batch(cache, token_ids):
    return cache.lookup_batch(token_ids)
