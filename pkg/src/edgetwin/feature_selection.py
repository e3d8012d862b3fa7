"""Filter-style feature rankers.

Each method scores every feature against the binary Normal/Attack label; the
ranking orders features by descending score with ties going to the lower
feature index.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .flow_model import FlowRecord, as_matrix, binary_labels

TOP_K = 10
N_BINS = 4
_TINY = 1e-12


class FsKind(str, Enum):
    VARIANCE = "variance"
    PEARSON = "pearson"
    ANOVA_F = "anova_f"
    CHI2 = "chi2"
    MUTUAL_INFO = "mutual_info"


SUPERVISED = {FsKind.PEARSON, FsKind.ANOVA_F, FsKind.CHI2, FsKind.MUTUAL_INFO}


class FeatureSelectionError(Exception):
    pass


@dataclass(frozen=True)
class FeatureRanking:
    kind: FsKind
    ranked: Tuple[Tuple[int, float], ...]
    # top-k indices in ascending order, so equal sets train identical models
    selected: Tuple[int, ...]

    def scores(self) -> Dict[int, float]:
        return dict(self.ranked)


def _variance(X, y):
    return X.var(axis=0)


def _pearson(X, y):
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt((xc**2).sum(axis=0))
    sy = np.sqrt((yc**2).sum())
    out = np.zeros(X.shape[1])
    ok = (sx > _TINY) & (sy > _TINY)
    out[ok] = np.abs((xc[:, ok] * yc[:, None]).sum(axis=0) / (sx[ok] * sy))
    return np.minimum(out, 1.0)


def _anova_f(X, y):
    n = len(y)
    groups = [X[y == c] for c in (0, 1)]
    grand = X.mean(axis=0)
    ss_between = sum(len(g) * (g.mean(axis=0) - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean(axis=0)) ** 2).sum(axis=0) for g in groups)
    ms_between = ss_between / 1.0  # two groups -> one degree of freedom
    ms_within = ss_within / max(n - 2, 1)
    f = ms_between / np.maximum(ms_within, _TINY)
    f[ss_between <= _TINY] = 0.0
    return f


def quantile_bins(x: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-frequency bin index per value; a constant column is one bin."""
    edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1]))
    return np.searchsorted(edges, x, side="right")


def _contingency(col: np.ndarray, y: np.ndarray) -> np.ndarray:
    bins = quantile_bins(col)
    table = np.zeros((bins.max() + 1, 2))
    np.add.at(table, (bins, y), 1)
    return table[table.sum(axis=1) > 0]


def _chi2(X, y):
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        table = _contingency(X[:, j], y)
        if len(table) < 2:
            continue
        expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
        mask = expected > 0
        out[j] = float((((table - expected) ** 2)[mask] / expected[mask]).sum())
    return out


def mutual_information(table: np.ndarray) -> float:
    """MI in nats of a joint count table."""
    n = table.sum()
    if n == 0:
        return 0.0
    pxy = table / n
    px = pxy.sum(1, keepdims=True)
    py = pxy.sum(0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    return max(mi, 0.0)


def _mutual_info(X, y):
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        table = _contingency(X[:, j], y)
        if len(table) >= 2:
            out[j] = mutual_information(table)
    return out


_SCORERS: Dict[FsKind, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    FsKind.VARIANCE: _variance,
    FsKind.PEARSON: _pearson,
    FsKind.ANOVA_F: _anova_f,
    FsKind.CHI2: _chi2,
    FsKind.MUTUAL_INFO: _mutual_info,
}


def score_features(kind: FsKind, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    kind = FsKind(kind)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise FeatureSelectionError("cannot rank features on empty data")
    if kind in SUPERVISED and len(np.unique(y)) < 2:
        raise FeatureSelectionError(f"{kind.value} needs both Normal and Attack records")
    scores = _SCORERS[kind](X, y)
    # constant columns carry no information under any method
    scores = np.where(np.ptp(X, axis=0) > 0, scores, 0.0)
    return scores


def rank_from_scores(kind: FsKind, scores: Sequence[float], k: int = TOP_K) -> FeatureRanking:
    scores = [float(s) for s in scores]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranked = tuple((i, scores[i]) for i in order)
    ranking = FeatureRanking(FsKind(kind), ranked, ())
    return FeatureRanking(ranking.kind, ranked, tuple(sorted(select_top_k(ranking, k))))


def rank_features(kind: FsKind, data: Sequence[FlowRecord], k: int = TOP_K) -> FeatureRanking:
    if not data:
        raise FeatureSelectionError("cannot rank features on empty data")
    return rank_from_scores(kind, score_features(kind, as_matrix(data), binary_labels(data)), k)


def select_top_k(ranking: FeatureRanking, k: int = TOP_K) -> List[int]:
    if k < 0:
        raise ValueError("k must be non-negative")
    return [i for i, _ in ranking.ranked[: min(k, len(ranking.ranked))]]
