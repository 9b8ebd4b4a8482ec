"""Progressive cluster pruning.

Between layers every active candidate gets a provisional score from the score
head.  When the coefficient of variation of those scores exceeds the
dispersion threshold, the scores are clustered with an exact 1-D k-means and
candidates are routed around the *boundary cluster*, the one holding the
candidate at rank ``remaining_k``:

* clusters ranked wholly above it are selected (accepted into the top-K),
* clusters ranked wholly below it are dropped,
* the boundary cluster itself is deferred to the next layer.

Candidates are ranked by score descending, ties broken by candidate id
ascending; clusters are numbered in that ranking order (cluster 0 holds the
highest scores).
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor
from .errors import ContractError, NumericError
from .metrics import precision_at_k

log = logging.getLogger(__name__)

ACCEPT_AND_DROP = "accept_and_drop"
DROP_ONLY = "drop_only"
MAX_AUTO_CLUSTERS = 5

# Default "low" and "high" dispersion thresholds; not derived from real models.
LOW_THRESHOLD = 0.15
HIGH_THRESHOLD = 0.35


@dataclass(frozen=True)
class PruneConfig:
    dispersion_threshold: float = math.inf
    k_clusters: object = "auto"
    mode: str = ACCEPT_AND_DROP

    def __post_init__(self):
        t = self.dispersion_threshold
        if not isinstance(t, (int, float)) or math.isnan(t) or t < 0:
            raise ContractError(f"dispersion threshold must be >= 0, got {t!r}")
        if self.k_clusters != "auto" and (
            not isinstance(self.k_clusters, int) or self.k_clusters < 1
        ):
            raise ContractError(f"k_clusters must be 'auto' or a positive int, got {self.k_clusters!r}")
        if self.mode not in (ACCEPT_AND_DROP, DROP_ONLY):
            raise ContractError(f"unknown pruning mode {self.mode!r}")

    @property
    def enabled(self):
        return math.isfinite(self.dispersion_threshold)


def coefficient_of_variation(scores):
    """Population standard deviation over mean; 0 for a single score."""
    xs = [float(s) for s in scores]
    if not xs:
        raise ContractError("coefficient of variation of an empty score list")
    if any(not x > 0 for x in xs):
        raise ContractError("coefficient of variation needs strictly positive scores")
    if len(xs) == 1:
        return 0.0
    # exact rationals: identical scores give exactly 0
    fs = [Fraction(x) for x in xs]
    mean = sum(fs) / len(fs)
    var = sum((x - mean) ** 2 for x in fs) / len(fs)
    return math.sqrt(var / (mean * mean))


@dataclass(frozen=True)
class ScoreSnapshot:
    layer_index: int
    active_ids: tuple
    scores: tuple
    cv: float

    @classmethod
    def build(cls, layer_index, active_ids, scores):
        ids = tuple(active_ids)
        vals = tuple(float(s) for s in scores)
        if len(ids) != len(vals):
            raise ContractError(f"{len(ids)} ids but {len(vals)} scores")
        cv = coefficient_of_variation(vals) if len(vals) >= 2 else 0.0
        return cls(layer_index, ids, vals, cv)

    def score_of(self):
        return dict(zip(self.active_ids, self.scores))


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def intermediate_scores(hidden, head, manifest):
    """Score each candidate's hidden state with the classifier head.

    ``score = sigmoid(w . rms_norm(h[pos]) + b)`` where ``pos`` is the last
    token for decoder-only models and the first for encoder-only ones.  The
    dot product is an exactly rounded sum of exact float32 x float32
    products, so a candidate's score never depends on its batch.
    """
    pos = -1 if manifest.score_position == "last" else 0
    if not hidden:
        return np.empty(0)
    rows = np.stack([h[pos] for h in hidden]).astype(np.float32)
    if not np.isfinite(rows).all():
        raise NumericError("non-finite hidden state at the score position")
    normed = tensor.rms_norm(rows, np.ones(manifest.d_model, np.float32), manifest.rms_eps)
    w = head.weight.astype(np.float64)
    out = np.empty(len(hidden))
    for j, x in enumerate(normed.astype(np.float64)):
        out[j] = _sigmoid(math.fsum((w * x).tolist()) + head.bias)
    return out


def ranking(scores, ids=None):
    """Positions ordered by score descending, ties by id ascending."""
    ids = list(range(len(scores))) if ids is None else list(ids)
    return sorted(range(len(scores)), key=lambda p: (-scores[p], ids[p]))


@dataclass(frozen=True)
class Clustering:
    order: tuple
    labels: tuple
    means: tuple
    sizes: tuple
    sse: float
    sse_exact: Fraction = field(repr=False)

    @property
    def k(self):
        return len(self.means)


class _SegmentCosts:
    """Exact within-segment sum of squares over values in ranking order."""

    def __init__(self, values):
        self.values = values
        self.s1 = [Fraction(0)]
        self.s2 = [Fraction(0)]
        for v in values:
            fv = Fraction(v)
            self.s1.append(self.s1[-1] + fv)
            self.s2.append(self.s2[-1] + fv * fv)

    def __call__(self, a, b):
        s = self.s1[b] - self.s1[a]
        return (self.s2[b] - self.s2[a]) - s * s / (b - a)


def _dp_tables(costs, n, kmax):
    """best[m][i]: min exact SSE of the first i values in m clusters; arg holds split points."""
    best = [[None] * (n + 1) for _ in range(kmax + 1)]
    arg = [[0] * (n + 1) for _ in range(kmax + 1)]
    best[0][0] = Fraction(0)
    for m in range(1, kmax + 1):
        for i in range(m, n + 1):
            cur = None
            cur_j = m - 1
            for j in range(m - 1, i):
                prev = best[m - 1][j]
                if prev is None:
                    continue
                val = prev + costs(j, i)
                if cur is None or val < cur:
                    cur, cur_j = val, j
            best[m][i] = cur
            arg[m][i] = cur_j
    return best, arg


def _assemble(values, order, arg, n, k, sse):
    bounds = []
    i = n
    for m in range(k, 0, -1):
        j = arg[m][i]
        bounds.append((j, i))
        i = j
    bounds.reverse()
    labels = [0] * n
    means, sizes = [], []
    for c, (a, b) in enumerate(bounds):
        for r in range(a, b):
            labels[order[r]] = c
        seg = values[a:b]
        means.append(math.fsum(seg) / len(seg))
        sizes.append(b - a)
    return Clustering(tuple(order), tuple(labels), tuple(means), tuple(sizes), float(sse), sse)


def _prepare(scores, ids):
    scores = [float(s) for s in scores]
    if ids is not None and len(ids) != len(scores):
        raise ContractError(f"{len(ids)} ids but {len(scores)} scores")
    order = ranking(scores, ids)
    values = [scores[p] for p in order]
    return scores, order, values


def kmeans_1d(scores, k, ids=None):
    """Globally optimal 1-D k-means by dynamic programming over ranked scores.

    Clusters are contiguous in ranking order.  Costs are exact rationals, so
    the returned partition minimizes the true within-cluster sum of squares
    and ``sse`` is that minimum correctly rounded.
    """
    n = len(scores)
    if not isinstance(k, int) or not 1 <= k <= n:
        raise ContractError(f"k={k!r} outside [1, {n}]")
    _, order, values = _prepare(scores, ids)
    costs = _SegmentCosts(values)
    best, arg = _dp_tables(costs, n, k)
    return _assemble(values, order, arg, n, k, best[k][n])


def kmeans_1d_auto(scores, ids=None, max_k=MAX_AUTO_CLUSTERS):
    """Pick k in 2..min(max_k, n) minimizing SSE_k + k * variance / 4."""
    n = len(scores)
    if n == 0:
        raise ContractError("cannot cluster an empty score list")
    if n == 1:
        return kmeans_1d(scores, 1, ids)
    kmax = min(max_k, n)
    _, order, values = _prepare(scores, ids)
    costs = _SegmentCosts(values)
    best, arg = _dp_tables(costs, n, kmax)
    penalty = best[1][n] / n / 4
    chosen = min(range(2, kmax + 1), key=lambda k: (best[k][n] + penalty * k, k))
    return _assemble(values, order, arg, n, chosen, best[chosen][n])


@dataclass(frozen=True)
class RoutingDecision:
    selected_ids: tuple
    deferred_ids: tuple
    dropped_ids: tuple
    boundary_cluster_index: int
    cluster_assignment: dict
    terminate: bool

    def counts(self):
        return {
            "selected": len(self.selected_ids),
            "deferred": len(self.deferred_ids),
            "dropped": len(self.dropped_ids),
        }


def route_candidates(snapshot, clustering, remaining_k, cfg):
    """Three-way routing around the boundary cluster."""
    ids = snapshot.active_ids
    n = len(ids)
    if not isinstance(remaining_k, int) or remaining_k < 1:
        raise ContractError(f"remaining_k must be >= 1, got {remaining_k!r}")
    if remaining_k > n:
        raise ContractError(f"remaining_k {remaining_k} exceeds {n} active candidates")
    if len(clustering.labels) != n:
        raise ContractError("clustering does not cover the active set")

    scores = snapshot.scores
    order = clustering.order
    labels = clustering.labels
    boundary = labels[order[remaining_k - 1]]
    lo = {}
    hi = {}
    for p in range(n):
        c = labels[p]
        lo[c] = min(lo.get(c, scores[p]), scores[p])
        hi[c] = max(hi.get(c, scores[p]), scores[p])

    # Equal scores may straddle a cluster edge.  Grow the deferred range over
    # every cluster touching it so the three groups stay strictly ordered.
    d_lo, d_hi = lo[boundary], hi[boundary]
    deferred_clusters = {boundary}
    grown = True
    while grown:
        grown = False
        for c in lo:
            if c not in deferred_clusters and lo[c] <= d_hi and hi[c] >= d_lo:
                deferred_clusters.add(c)
                d_lo, d_hi = min(d_lo, lo[c]), max(d_hi, hi[c])
                grown = True

    selected, deferred, dropped = [], [], []
    for p in order:
        c = labels[p]
        if c in deferred_clusters:
            deferred.append(ids[p])
        elif lo[c] > d_hi:
            selected.append(ids[p])
        else:
            dropped.append(ids[p])
    if cfg.mode == DROP_ONLY:
        deferred = selected + deferred
        selected = []
    terminate = len(deferred) == remaining_k - len(selected)
    return RoutingDecision(
        selected_ids=tuple(selected),
        deferred_ids=tuple(deferred),
        dropped_ids=tuple(dropped),
        boundary_cluster_index=boundary,
        cluster_assignment={ids[p]: labels[p] for p in range(n)},
        terminate=terminate,
    )


def cluster_scores(snapshot, cfg):
    ids = snapshot.active_ids
    if cfg.k_clusters == "auto":
        return kmeans_1d_auto(snapshot.scores, ids)
    return kmeans_1d(snapshot.scores, min(cfg.k_clusters, len(ids)), ids)


def pruning_check(snapshot, remaining_k, cfg):
    """Return a routing decision when the CV exceeds the threshold, else ``None``."""
    if not snapshot.cv > cfg.dispersion_threshold:
        return None
    return route_candidates(snapshot, cluster_scores(snapshot, cfg), remaining_k, cfg)


@dataclass(frozen=True)
class Calibration:
    threshold: float
    warning: bool
    precision_by_threshold: dict


def calibrate_threshold(validation, k, precision_target, grid, run):
    """Smallest grid threshold whose mean Precision@K meets ``precision_target``.

    ``validation`` holds ``(query, candidates, relevant_ids)`` records and
    ``run(record, threshold)`` returns the ranked ids for one record.  When
    no grid value is good enough the result is ``inf`` (pruning disabled)
    with ``warning`` set.
    """
    grid = list(grid)
    validation = list(validation)
    if not grid:
        raise ContractError("calibration grid is empty")
    if not validation:
        raise ContractError("calibration needs a nonempty validation set")
    if not 0 < precision_target <= 1:
        raise ContractError(f"precision target must be in (0, 1], got {precision_target}")
    measured = {}
    for t in grid:
        total = Fraction(0)
        for record in validation:
            relevant = record[2]
            total += precision_at_k(run(record, t), relevant, k, exact=True)
        measured[t] = float(total / len(validation))
    feasible = [t for t, p in measured.items() if p >= precision_target]
    if feasible:
        return Calibration(min(feasible), False, measured)
    log.warning(
        "no threshold in %s reaches precision %.3f; pruning disabled", grid, precision_target
    )
    return Calibration(math.inf, True, measured)
