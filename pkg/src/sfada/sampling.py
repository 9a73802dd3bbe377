"""Query strategies over model hypotheses.

The contrastive strategy scores each unlabeled sample from its current and
previous-round softmax vectors:

1. contrastive log-probs  p~ = log p_r + alpha * (log p_r - log p_prev)
2. best-vs-second-best margin u_cm on p~
3. strict-less-than rank of every margin within the pool
4. per-class share among the kappa largest margins, normalised by its max
5. u = u_cm + lam * u_ct[y_a]; the b smallest u are queried.

Everything here is a pure function of arrays; ties always go to the lower id.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import LOG_EPS

STRATEGIES = (
    "cas",
    "random",
    "entropy_max",
    "entropy_min",
    "least_confidence",
    "bvsb",
    "kcenter_greedy",
    "kmeans",
)


@dataclass
class CasConfig:
    alpha: float = 0.03
    lam: float = 0.1
    kappa: int = 100
    b: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")
        if self.kappa < 1 or self.b < 1:
            raise ValueError("kappa and b must be >= 1")


@dataclass
class HypothesisLog:
    """Softmax vectors of the current model and, from round 1 on, the previous one.

    ``probs_prev`` rows are aligned with ``ids`` (the caller drops ids that
    were labeled since the previous snapshot).
    """

    round: int
    ids: np.ndarray
    probs_current: np.ndarray
    probs_prev: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.probs_current = np.asarray(self.probs_current, dtype=np.float64)
        if self.probs_current.shape[0] != self.ids.size:
            raise ValueError("probs_current rows must match ids")
        if (self.probs_prev is None) != (self.round == 0):
            raise ValueError("probs_prev must be given exactly when round > 0")
        if self.probs_prev is not None:
            self.probs_prev = np.asarray(self.probs_prev, dtype=np.float64)
            if self.probs_prev.shape != self.probs_current.shape:
                raise ValueError("probs_prev must have the same shape as probs_current")
        for arr in (self.probs_current, self.probs_prev):
            if arr is not None and np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-6):
                raise ValueError("hypotheses must be probability vectors")

    @classmethod
    def from_maps(cls, round, current: dict, prev: dict | None = None):
        ids = np.array(sorted(current), dtype=np.int64)
        cur = np.stack([current[i] for i in ids])
        prv = None if prev is None else np.stack([prev[i] for i in ids])
        return cls(round, ids, cur, prv)


@dataclass(frozen=True)
class SampleScore:
    id: int
    u_cm: float
    y_a: int
    y_b: int
    u_ct_of_ya: float
    u: float


@dataclass
class CasScores:
    """Column-wise scores for a pool; ``records()`` yields one SampleScore per id."""

    ids: np.ndarray
    u_cm: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    ranks: np.ndarray
    u_ct: np.ndarray  # per class
    u: np.ndarray

    @property
    def u_ct_of_ya(self) -> np.ndarray:
        return self.u_ct[self.y_a]

    def records(self) -> list[SampleScore]:
        ct = self.u_ct_of_ya
        return [SampleScore(int(i), float(m), int(a), int(b), float(c), float(u))
                for i, m, a, b, c, u in zip(self.ids, self.u_cm, self.y_a, self.y_b, ct, self.u)]


def _log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_EPS))


def contrastive_log_probs(p_r, p_prev=None, alpha: float = 0.03, round: int = 0) -> np.ndarray:
    """Works on a single vector or row-wise on a matrix."""
    p_r = np.asarray(p_r, dtype=np.float64)
    if round == 0:
        return _log(p_r)
    if p_prev is None:
        raise ValueError("p_prev is required when round > 0")
    p_prev = np.asarray(p_prev, dtype=np.float64)
    if p_prev.shape != p_r.shape:
        raise ValueError(f"length mismatch: {p_r.shape} vs {p_prev.shape}")
    log_r = _log(p_r)
    if alpha == 0:
        return log_r
    return log_r + alpha * (log_r - _log(p_prev))


def bvsb_margin(p_tilde):
    """Best-vs-second-best margin.

    For a vector returns ``(u_cm, y_a, y_b)``; for a matrix returns three
    arrays, one entry per row.
    """
    p = np.asarray(p_tilde, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] < 2:
        raise ValueError("need at least two classes")
    # stable sort on the negated scores keeps the lower index first among ties
    order = np.argsort(-p, axis=1, kind="stable")
    y_a, y_b = order[:, 0], order[:, 1]
    rows = np.arange(p.shape[0])
    u_cm = p[rows, y_a] - p[rows, y_b]
    if single:
        return float(u_cm[0]), int(y_a[0]), int(y_b[0])
    return u_cm, y_a, y_b


def rank_scores(u_cm) -> np.ndarray:
    """rank(i) = number of scores strictly below u_cm(i)."""
    u = np.asarray(u_cm, dtype=np.float64)
    return np.searchsorted(np.sort(u), u, side="left").astype(np.int64)


def class_transferability(y_a, ranks, kappa: int, n_classes: int) -> np.ndarray:
    y_a = np.asarray(y_a, dtype=np.int64)
    ranks = np.asarray(ranks, dtype=np.int64)
    if y_a.shape != ranks.shape:
        raise ValueError("y_a and ranks must have equal length")
    n = y_a.size
    kappa = min(int(kappa), n)
    top = ranks > (n - kappa)
    counts = np.bincount(y_a[top], minlength=n_classes).astype(np.float64)
    peak = counts.max() if counts.size else 0.0
    if peak == 0:
        return np.zeros(n_classes)
    return counts / peak


def cas_scores(log: HypothesisLog, config: CasConfig) -> CasScores:
    p_tilde = contrastive_log_probs(log.probs_current, log.probs_prev, config.alpha, log.round)
    u_cm, y_a, y_b = bvsb_margin(p_tilde)
    ranks = rank_scores(u_cm)
    n_classes = log.probs_current.shape[1]
    u_ct = class_transferability(y_a, ranks, config.kappa, n_classes)
    u = u_cm + config.lam * u_ct[y_a]
    return CasScores(log.ids.copy(), u_cm, y_a, y_b, ranks, u_ct, u)


def select_queries(ids, u, b: int, already_labeled=()) -> list[int]:
    """The ``b`` ids with the smallest score, ties to the smaller id."""
    ids = np.asarray(ids, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    labeled = set(int(i) for i in already_labeled)
    keep = np.array([int(i) not in labeled for i in ids], dtype=bool)
    ids, u = ids[keep], u[keep]
    if b > ids.size:
        raise ValueError(f"cannot select {b} from a pool of {ids.size}")
    order = np.lexsort((ids, u))
    return [int(i) for i in ids[order[:b]]]


# ---------------------------------------------------------------------------
# baselines


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -(p * _log(p)).sum(axis=1)


def _kcenter_greedy(features, labeled_features, b, rng) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    picked = []
    if labeled_features is not None and len(labeled_features):
        lab = np.asarray(labeled_features, dtype=np.float64)
        d2 = ((features[:, None, :] - lab[None, :, :]) ** 2).sum(-1)
        min_d = d2.min(axis=1)
    else:
        first = int(rng.integers(n))
        picked.append(first)
        min_d = ((features - features[first]) ** 2).sum(-1)
    while len(picked) < b:
        nxt = int(np.argmax(min_d))
        picked.append(nxt)
        min_d = np.minimum(min_d, ((features - features[nxt]) ** 2).sum(-1))
    return np.array(picked, dtype=np.int64)


def _kmeans_pick(features, b, seed) -> np.ndarray:
    from sklearn.cluster import KMeans

    features = np.asarray(features, dtype=np.float64)
    km = KMeans(n_clusters=b, n_init=4, random_state=seed).fit(features)
    d2 = ((features[:, None, :] - km.cluster_centers_[None, :, :]) ** 2).sum(-1)
    picked: list[int] = []
    taken = np.zeros(features.shape[0], dtype=bool)
    for k in range(b):
        # nearest still-free point to each centroid, ties to the lower index
        order = np.argsort(d2[:, k], kind="stable")
        j = int(next(i for i in order if not taken[i]))
        taken[j] = True
        picked.append(j)
    return np.array(picked, dtype=np.int64)


def baseline_select(strategy: str, ids, b: int, probs=None, features=None,
                    labeled_features=None, seed: int = 0) -> list[int]:
    """Classic query strategies; returns ``b`` ids from ``ids``.

    ``probs``/``features`` are rows aligned with ``ids``. The ``bvsb`` margin
    is taken on log-probabilities, matching the contrastive score with
    alpha = 0.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if b > ids.size:
        raise ValueError(f"cannot select {b} from a pool of {ids.size}")
    rng = np.random.default_rng(seed)

    def need(x, name):
        if x is None:
            raise ValueError(f"strategy {strategy!r} needs {name}")
        return np.asarray(x, dtype=np.float64)

    if strategy == "random":
        return [int(i) for i in rng.choice(ids, size=b, replace=False)]
    if strategy == "entropy_max":
        return select_queries(ids, -entropy_rows(need(probs, "probs")), b)
    if strategy == "entropy_min":
        return select_queries(ids, entropy_rows(need(probs, "probs")), b)
    if strategy == "least_confidence":
        return select_queries(ids, need(probs, "probs").max(axis=1), b)
    if strategy == "bvsb":
        u_cm, _, _ = bvsb_margin(_log(need(probs, "probs")))
        return select_queries(ids, u_cm, b)
    if strategy == "kcenter_greedy":
        idx = _kcenter_greedy(need(features, "features"), labeled_features, b, rng)
        return [int(i) for i in ids[idx]]
    if strategy == "kmeans":
        idx = _kmeans_pick(need(features, "features"), b, seed)
        return [int(i) for i in ids[idx]]
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
