"""Online learning: pseudo-label a fresh batch, run the classifier and
feature-selection tournaments, and hot-swap the production pair.

Candidates are scored as ``alpha * sigma - beta * theta_norm`` where sigma is
0.6 * recall + 0.4 * precision and theta_norm is the candidate's detection
time min-max normalized over its cohort.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .classifiers import (
    ClassifierKind,
    ConfusionCounts,
    SchemaMismatch,
    TrainedModel,
    evaluate,
    fit,
    predict,
    Prediction,
)
from .feature_selection import FeatureRanking, FsKind, rank_features
from .flow_model import NORMAL, BaselineDataset, FlowRecord, as_matrix, binary_labels
from .twin_graph import EventKind, TwinGraph

logger = logging.getLogger(__name__)

RECALL_WEIGHT = 0.6
PRECISION_WEIGHT = 0.4


class SelectionError(Exception):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.9
    beta: float = 0.1
    batch_size: int = 1000
    baseline_size: int = 1000
    baseline_attack_ratio: float = 0.65
    split: float = 0.7
    seed: int = 0
    top_k: int = 10
    knn_k: int = 5
    clock: str = "wall"
    workers: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.split < 1:
            raise ValueError("split must lie strictly between 0 and 1")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if self.clock not in ("wall", "cost"):
            raise ValueError(f"unknown clock {self.clock!r}")

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class CandidateScore:
    candidate: str
    counts: ConfusionCounts
    sigma: float
    theta_ms: float
    theta_norm: float
    combined: float
    features: Optional[Tuple[int, ...]] = None

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "candidate": self.candidate,
            "counts": self.counts.as_dict(),
            "sigma": self.sigma,
            "theta_ms": self.theta_ms,
            "theta_norm": self.theta_norm,
            "combined": self.combined,
        }
        if self.features is not None:
            d["features"] = list(self.features)
        return d


def sigma(counts: ConfusionCounts) -> float:
    """Weighted recall/precision; an undefined term contributes 0."""
    rec_d = counts.tp + counts.fn
    prec_d = counts.tp + counts.fp
    rec = counts.tp / rec_d if rec_d else 0.0
    prec = counts.tp / prec_d if prec_d else 0.0
    return RECALL_WEIGHT * rec + PRECISION_WEIGHT * prec


def normalized_time(theta_ms: float, cohort_times: Sequence[float]) -> float:
    lo, hi = min(cohort_times), max(cohort_times)
    if hi <= lo:
        return 0.0
    return (theta_ms - lo) / (hi - lo)


def score_candidate(
    counts: ConfusionCounts,
    theta_ms: float,
    cohort_times: Sequence[float],
    config: SelectionConfig,
    candidate: str = "",
    features: Optional[Sequence[int]] = None,
) -> CandidateScore:
    s = sigma(counts)
    tn = normalized_time(theta_ms, cohort_times)
    return CandidateScore(
        candidate,
        counts,
        s,
        float(theta_ms),
        tn,
        config.alpha * s - config.beta * tn,
        None if features is None else tuple(features),
    )


def score_cohort(
    entries: Sequence[Tuple[str, ConfusionCounts, float]], config: SelectionConfig
) -> List[CandidateScore]:
    times = [t for _, _, t in entries]
    return [score_candidate(c, t, times, config, candidate=name) for name, c, t in entries]


def choose_winner(scores: Sequence[CandidateScore]) -> CandidateScore:
    """Highest combined score; ties go to the faster candidate, then to list order."""
    if not scores:
        raise SelectionError("empty cohort")
    best = scores[0]
    for s in scores[1:]:
        if s.combined > best.combined or (s.combined == best.combined and s.theta_ms < best.theta_ms):
            best = s
    return best


# -- pseudo-labeling ---------------------------------------------------------------


def pseudo_label(unlabeled: Sequence[FlowRecord], reference: Sequence[FlowRecord], k: int = 5) -> List[FlowRecord]:
    """k-NN labels from a labeled reference set.

    A record with an exact duplicate in the reference takes the duplicate's
    label.  Attack verdicts carry the most common attack class among the
    neighbours that voted Attack.
    """
    if not reference:
        raise SelectionError("pseudo-labeling needs a non-empty baseline")
    if not unlabeled:
        return []
    R = as_matrix(reference)
    ref_attack = binary_labels(reference)
    ref_labels = [r.label for r in reference]
    X = as_matrix(unlabeled)
    k = min(k, len(reference))
    out: List[FlowRecord] = []
    rsq = (R * R).sum(1)
    for start in range(0, len(X), 512):
        chunk = X[start : start + 512]
        d = np.maximum((chunk * chunk).sum(1)[:, None] - 2.0 * chunk @ R.T + rsq[None, :], 0.0)
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        for row, idx in enumerate(nn):
            rec = unlabeled[start + row]
            exact = np.nonzero(np.all(R == chunk[row], axis=1))[0]
            if len(exact):
                out.append(rec.with_label(ref_labels[int(exact[0])]))
                continue
            votes = ref_attack[idx]
            if votes.sum() * 2 > len(idx):
                attack_classes = [ref_labels[i] for i in idx if ref_attack[i]]
                counts: Dict[str, int] = {}
                for c in attack_classes:
                    counts[c] = counts.get(c, 0) + 1
                top = max(counts.values())
                label = next(c for c in attack_classes if counts[c] == top)
            else:
                label = NORMAL
            out.append(rec.with_label(label))
    return out


def label_batch(unlabeled: Sequence[FlowRecord], baseline: BaselineDataset, config: SelectionConfig) -> List[FlowRecord]:
    if len(unlabeled) != config.batch_size:
        raise SelectionError(f"batch has {len(unlabeled)} records, expected {config.batch_size}")
    if not len(baseline):
        raise SelectionError("baseline is empty")
    return pseudo_label(unlabeled, baseline.records, config.knn_k) + list(baseline.records)


def stratified_split(records: Sequence[FlowRecord], frac: float, seed: int) -> Tuple[List[FlowRecord], List[FlowRecord]]:
    rng = np.random.default_rng(seed)
    y = binary_labels(records)
    train_idx: List[int] = []
    test_idx: List[int] = []
    for c in (0, 1):
        idx = np.nonzero(y == c)[0]
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(frac * len(idx)))
        train_idx.extend(idx[:cut].tolist())
        test_idx.extend(idx[cut:].tolist())
    train_idx.sort()
    test_idx.sort()
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


def _require_both_classes(records: Sequence[FlowRecord]) -> None:
    y = binary_labels(records)
    if len(np.unique(y)) < 2:
        raise SelectionError("selection needs both Normal and Attack records")


def _map(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def data_fingerprint(records: Sequence[FlowRecord]) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(as_matrix(records)).tobytes())
    h.update("|".join(str(r.label) for r in records).encode())
    return h.hexdigest()[:16]


# -- tournaments -------------------------------------------------------------------


@dataclass
class ClassifierTournament:
    winner: ClassifierKind
    model: TrainedModel
    scores: List[CandidateScore]


@dataclass
class FsTournament:
    winner: FsKind
    features: Tuple[int, ...]
    rankings: Dict[FsKind, FeatureRanking]
    scores: List[CandidateScore]


def select_classifier(labeled: Sequence[FlowRecord], config: SelectionConfig) -> ClassifierTournament:
    _require_both_classes(labeled)
    train, test = stratified_split(labeled, config.split, config.seed)
    _require_both_classes(train)
    all_features = list(range(len(labeled[0].values)))
    kinds = list(ClassifierKind)

    def run(kind):
        model = fit(kind, train, all_features, seed=config.seed)
        ev = evaluate(model, test, clock=config.clock)
        return model, ev

    results = _map(run, kinds, config.workers)
    scores = score_cohort([(k.value, ev.counts, ev.theta_ms) for k, (_, ev) in zip(kinds, results)], config)
    best = choose_winner(scores)
    winner = ClassifierKind(best.candidate)
    return ClassifierTournament(winner, results[kinds.index(winner)][0], scores)


def select_fs(labeled: Sequence[FlowRecord], kind: ClassifierKind, config: SelectionConfig) -> FsTournament:
    if not labeled:
        raise SelectionError("feature selection needs labeled records")
    _require_both_classes(labeled)
    train, test = stratified_split(labeled, config.split, config.seed)
    fs_kinds = list(FsKind)

    def run(fs_kind):
        ranking = rank_features(fs_kind, labeled, config.top_k)
        model = fit(kind, train, ranking.selected, seed=config.seed)
        return ranking, evaluate(model, test, clock=config.clock)

    results = _map(run, fs_kinds, config.workers)
    times = [ev.theta_ms for _, ev in results]
    scores = [
        score_candidate(ev.counts, ev.theta_ms, times, config, candidate=k.value, features=r.selected)
        for k, (r, ev) in zip(fs_kinds, results)
    ]
    best = choose_winner(scores)
    winner = FsKind(best.candidate)
    rankings = {k: r for k, (r, _) in zip(fs_kinds, results)}
    return FsTournament(winner, rankings[winner].selected, rankings, scores)


@dataclass
class SelectionReport:
    trigger: str
    config: SelectionConfig
    classifier_scores: List[CandidateScore]
    fs_scores: List[CandidateScore]
    classifier: ClassifierKind
    fs_method: FsKind
    features: Tuple[int, ...]
    fingerprints: Dict[str, str]
    started: float
    finished: float
    model: TrainedModel = field(repr=False)
    rankings: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trigger": self.trigger,
            "config": self.config.to_dict(),
            "classifier_scores": [s.to_dict() for s in self.classifier_scores],
            "fs_scores": [s.to_dict() for s in self.fs_scores],
            "winner_classifier": self.classifier.value,
            "winner_fs": self.fs_method.value,
            "features": list(self.features),
            "rankings": {k: [[i, s] for i, s in v] for k, v in self.rankings.items()},
            "fingerprints": self.fingerprints,
            "started": self.started,
            "finished": self.finished,
            "model": self.model.to_dict(),
        }

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def select_on_labeled(
    labeled: Sequence[FlowRecord],
    fs_input: Sequence[FlowRecord],
    config: SelectionConfig,
    trigger: str,
) -> SelectionReport:
    """Both tournaments on already-labeled data, then refit the production model.

    The winning classifier is refit on all of ``labeled`` restricted to the
    winning feature set.
    """
    started = time.time()
    ct = select_classifier(labeled, config)
    ft = select_fs(fs_input, ct.winner, config)
    model = fit(ct.winner, labeled, ft.features, seed=config.seed)
    return SelectionReport(
        trigger=trigger,
        config=config,
        classifier_scores=ct.scores,
        fs_scores=ft.scores,
        classifier=ct.winner,
        fs_method=ft.winner,
        features=ft.features,
        fingerprints={"labeled": data_fingerprint(labeled), "fs_input": data_fingerprint(fs_input)},
        started=started,
        finished=time.time(),
        model=model,
        rankings={k.value: list(r.ranked) for k, r in ft.rankings.items()},
    )


def run_selection(
    unlabeled: Sequence[FlowRecord],
    baseline: BaselineDataset,
    config: SelectionConfig,
    trigger: str = "reliability",
) -> SelectionReport:
    """The full online-learning pass over one batch of unlabeled traffic."""
    labeled = label_batch(unlabeled, baseline, config)
    batch = labeled[: len(unlabeled)]
    report = select_on_labeled(labeled, batch, config, trigger)
    report.fingerprints["baseline"] = data_fingerprint(baseline.records)
    return report


# -- production pair and hot swap ----------------------------------------------------


@dataclass(frozen=True)
class ProductionPair:
    model: TrainedModel
    fs_method: Optional[FsKind] = None

    @property
    def features(self) -> Tuple[int, ...]:
        return self.model.features


@dataclass(frozen=True)
class SwapAck:
    version: int
    classifier: ClassifierKind
    fs_method: Optional[FsKind]
    features: Tuple[int, ...]


class Detector:
    """Serves predictions from the current production pair.

    The pair and its version live in one tuple that is replaced wholesale on a
    swap, so a classification reads exactly one pair.
    """

    def __init__(self, pair: ProductionPair, twin: Optional[TwinGraph] = None):
        self._current: Tuple[int, ProductionPair] = (1, pair)
        self._swap_lock = threading.Lock()
        self.twin = twin

    @property
    def version(self) -> int:
        return self._current[0]

    @property
    def pair(self) -> ProductionPair:
        return self._current[1]

    def classify(self, record: FlowRecord) -> Tuple[int, Prediction]:
        version, pair = self._current
        return version, predict(pair.model, record)

    def swap_model(self, new_pair: ProductionPair, timestamp: Optional[float] = None, reason: str = "") -> SwapAck:
        """Atomically replace the production pair; a failed validation changes nothing."""
        with self._swap_lock:
            version, current = self._current
            model = new_pair.model
            if model.schema_id != current.model.schema_id or model.n_schema_features != current.model.n_schema_features:
                raise SchemaMismatch("replacement model was trained on a different schema")
            if not model.features or max(model.features) >= model.n_schema_features:
                raise SchemaMismatch("replacement model has an invalid feature list")
            self._current = (version + 1, new_pair)
            ack = SwapAck(version + 1, model.kind, new_pair.fs_method, model.features)
        if self.twin is not None:
            self.twin.emit(
                EventKind.MODEL_SWAPPED,
                {
                    "version": ack.version,
                    "classifier": ack.classifier.value,
                    "fs_method": ack.fs_method.value if ack.fs_method else None,
                    "features": list(ack.features),
                    "reason": reason,
                },
                timestamp,
            )
        return ack


class SelectionScheduler:
    """Runs at most one selection at a time in a background worker.

    A run stays in flight until its result is collected with :meth:`collect`;
    a request arriving before that is coalesced and ``request`` returns
    ``None``.  Tying the in-flight window to collection rather than to thread
    completion keeps coalescing independent of machine speed.
    """

    def __init__(self, baseline: BaselineDataset, config: SelectionConfig):
        self.baseline = baseline
        self.config = config
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="selection")
        self._inflight: Optional[Future] = None
        self._lock = threading.Lock()
        self.runs = 0
        self.coalesced = 0

    @property
    def busy(self) -> bool:
        with self._lock:
            return self._inflight is not None

    def request(self, batch: Sequence[FlowRecord], trigger: str = "reliability") -> Optional[Future]:
        with self._lock:
            if self._inflight is not None:
                self.coalesced += 1
                return None
            self.runs += 1
            config = SelectionConfig(**{**self.config.to_dict(), "seed": self.config.seed + self.runs})
            unlabeled = [r.with_label(None) for r in batch]
            self._inflight = self._pool.submit(run_selection, unlabeled, self.baseline, config, trigger)
            return self._inflight

    def collect(self, timeout: Optional[float] = None) -> Optional[SelectionReport]:
        """Block until the in-flight run finishes and return its report."""
        with self._lock:
            fut = self._inflight
        if fut is None:
            return None
        try:
            return fut.result(timeout=timeout)
        finally:
            with self._lock:
                self._inflight = None

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
