"""Residency accounting for layer buffers, hidden-state chunks and embedding rows."""
import threading

from .errors import ResidencyError

LAYER_BUFFERS = "layer_buffers"
HIDDEN_CHUNKS = "hidden_chunks"
EMBEDDING_ROWS = "embedding_rows"
CATEGORIES = (LAYER_BUFFERS, HIDDEN_CHUNKS, EMBEDDING_ROWS)

# every violation from every ledger in this process, for suite-wide audits
_process_violations = []


def process_violations():
    return list(_process_violations)


class MemoryLedger:
    """Counters of what is resident, with peaks and optional hard limits.

    ``limits`` maps a category to the maximum resident count.  Exceeding a
    limit records the violation and raises :class:`ResidencyError`, so a
    bound that is ever broken fails the run that broke it.
    """

    def __init__(self, limits=None):
        self._lock = threading.Lock()
        self.limits = dict(limits or {})
        self.resident = dict.fromkeys(CATEGORIES, 0)
        self.resident_bytes = dict.fromkeys(CATEGORIES, 0)
        self.peak = dict.fromkeys(CATEGORIES, 0)
        self.peak_bytes = dict.fromkeys(CATEGORIES, 0)
        self.violations = []

    def set_limit(self, category, limit):
        with self._lock:
            if limit is None:
                self.limits.pop(category, None)
            else:
                self.limits[category] = limit

    def acquire(self, category, count=1, nbytes=0):
        with self._lock:
            self.resident[category] += count
            self.resident_bytes[category] += nbytes
            n = self.resident[category]
            self.peak[category] = max(self.peak[category], n)
            self.peak_bytes[category] = max(self.peak_bytes[category], self.resident_bytes[category])
            limit = self.limits.get(category)
            if limit is not None and n > limit:
                self.violations.append((category, n, limit))
                _process_violations.append((category, n, limit))
                raise ResidencyError(f"{category}: {n} resident exceeds bound {limit}")

    def release(self, category, count=1, nbytes=0):
        with self._lock:
            if count > self.resident[category] or nbytes > self.resident_bytes[category]:
                raise ResidencyError(f"{category}: releasing more than is resident")
            self.resident[category] -= count
            self.resident_bytes[category] -= nbytes

    def reset_peaks(self, categories=CATEGORIES):
        """Restart peak tracking for ``categories`` from their current residency."""
        with self._lock:
            for c in categories:
                self.peak[c] = self.resident[c]
                self.peak_bytes[c] = self.resident_bytes[c]

    @property
    def layer_buffers_resident(self):
        return self.resident[LAYER_BUFFERS]

    @property
    def hidden_chunks_resident(self):
        return self.resident[HIDDEN_CHUNKS]

    @property
    def embedding_rows_resident(self):
        return self.resident[EMBEDDING_ROWS]

    def snapshot(self):
        with self._lock:
            return {
                "resident": dict(self.resident),
                "resident_bytes": dict(self.resident_bytes),
                "peak": dict(self.peak),
                "peak_bytes": dict(self.peak_bytes),
                "violations": len(self.violations),
            }
