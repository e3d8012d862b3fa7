"""Ten binary attack classifiers behind one fit / predict / evaluate surface.

All learners are written against numpy only.  Each kind is a pair of plain
functions: a fitter that turns ``(X, y, rng)`` into a JSON-serializable
parameter dict, and a scorer that maps a feature matrix to an attack score in
[0, 1].  A score of 0.5 or more is an Attack verdict.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .flow_model import NORMAL, FlowRecord, as_matrix, binary_labels

ATTACK = "Attack"


class ClassifierKind(str, Enum):
    GAUSSIAN_NB = "gaussian_nb"
    KNN = "knn"
    NEAREST_CENTROID = "nearest_centroid"
    LOGISTIC = "logistic_regression"
    PERCEPTRON = "perceptron"
    LINEAR_SVM = "linear_svm"
    DECISION_TREE = "decision_tree"
    RANDOM_FOREST = "random_forest"
    ADABOOST = "adaboost"
    RIDGE = "ridge"


DEFAULT_HYPERPARAMS: Dict[ClassifierKind, Dict[str, Any]] = {
    ClassifierKind.GAUSSIAN_NB: {"var_smoothing": 1e-9},
    ClassifierKind.KNN: {"k": 5},
    ClassifierKind.NEAREST_CENTROID: {},
    ClassifierKind.LOGISTIC: {"lr": 0.5, "iters": 500, "l2": 1e-4},
    ClassifierKind.PERCEPTRON: {"epochs": 20},
    ClassifierKind.LINEAR_SVM: {"lam": 1e-3, "iters": 500, "lr": 0.1},
    ClassifierKind.DECISION_TREE: {"max_depth": 8, "min_samples_split": 2},
    ClassifierKind.RANDOM_FOREST: {"n_trees": 15, "max_depth": 6, "min_samples_split": 2},
    ClassifierKind.ADABOOST: {"rounds": 30},
    ClassifierKind.RIDGE: {"lam": 1.0},
}

# Kinds that degenerate gracefully when only one class is present.
SINGLE_CLASS_OK = {
    ClassifierKind.KNN,
    ClassifierKind.NEAREST_CENTROID,
    ClassifierKind.DECISION_TREE,
    ClassifierKind.RANDOM_FOREST,
}


class ClassifierError(Exception):
    pass


class EmptyTrainingSet(ClassifierError):
    pass


class SingleClassTrainingSet(ClassifierError):
    pass


class SchemaMismatch(ClassifierError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @classmethod
    def from_arrays(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "ConfusionCounts":
        y_true = np.asarray(y_true, dtype=bool)
        y_pred = np.asarray(y_pred, dtype=bool)
        return cls(
            int(np.sum(y_true & y_pred)),
            int(np.sum(y_true & ~y_pred)),
            int(np.sum(~y_true & y_pred)),
            int(np.sum(~y_true & ~y_pred)),
        )

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn)

    def as_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}


@dataclass(frozen=True)
class Prediction:
    label: str  # "Attack" | "Normal"
    confidence: float
    attack_score: float
    attack_class: Optional[str] = None

    @property
    def is_attack(self) -> bool:
        return self.label == ATTACK


@dataclass(frozen=True)
class Evaluation:
    counts: ConfusionCounts
    theta_ms: float


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _standardize_fit(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


# -- generative / instance-based --------------------------------------------------


def _fit_gnb(X, y, rng, var_smoothing):
    eps = var_smoothing * max(float(X.var(axis=0).max()), 1.0)
    stats = {}
    for c in (0, 1):
        Xc = X[y == c]
        stats[c] = (Xc.mean(axis=0), Xc.var(axis=0) + eps, len(Xc) / len(X))
    return {
        "mean": [stats[0][0].tolist(), stats[1][0].tolist()],
        "var": [stats[0][1].tolist(), stats[1][1].tolist()],
        "prior": [stats[0][2], stats[1][2]],
    }


def _score_gnb(p, X):
    ll = []
    for c in (0, 1):
        m, v = p["mean"][c], p["var"][c]
        ll.append(math.log(p["prior"][c]) - 0.5 * np.sum(np.log(2 * np.pi * v) + (X - m) ** 2 / v, axis=1))
    return _sigmoid(ll[1] - ll[0])


def _fit_knn(X, y, rng, k):
    return {"X": X, "y": y.astype(float), "k": int(k)}


def _knn_distances(train: np.ndarray, X: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ train.T + (train * train).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _score_knn(p, X):
    train, labels = p["X"], p["y"]
    k = min(p["k"], len(train))
    out = np.empty(len(X))
    for start in range(0, len(X), 512):
        d = _knn_distances(train, X[start : start + 512])
        idx = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[start : start + 512] = labels[idx].mean(axis=1)
    return out


def _fit_centroid(X, y, rng):
    centroids = {}
    for c in (0, 1):
        if np.any(y == c):
            centroids[str(c)] = X[y == c].mean(axis=0).tolist()
    return {"centroids": centroids}


def _score_centroid(p, X):
    cents = p["centroids"]
    if "0" not in cents:
        return np.ones(len(X))
    if "1" not in cents:
        return np.zeros(len(X))
    dn = np.linalg.norm(X - cents["0"], axis=1)
    da = np.linalg.norm(X - cents["1"], axis=1)
    tot = dn + da
    return np.where(tot > 0, dn / np.where(tot > 0, tot, 1.0), 0.5)


# -- linear family -----------------------------------------------------------------


def _linear_params(mu, sd, w, b):
    return {"mu": mu.tolist(), "sd": sd.tolist(), "w": np.asarray(w, dtype=float).tolist(), "b": float(b)}


def _linear_margin(p, X):
    Z = (X - p["mu"]) / p["sd"]
    return Z @ p["w"] + p["b"]


def _fit_logistic(X, y, rng, lr, iters, l2):
    mu, sd = _standardize_fit(X)
    Z = (X - mu) / sd
    n, f = Z.shape
    w = np.zeros(f)
    b = 0.0
    for _ in range(iters):
        err = _sigmoid(Z @ w + b) - y
        w -= lr * (Z.T @ err / n + l2 * w)
        b -= lr * float(err.mean())
    return _linear_params(mu, sd, w, b)


def _score_logistic(p, X):
    return _sigmoid(_linear_margin(p, X))


def _fit_perceptron(X, y, rng, epochs):
    # averaged perceptron; the plain one oscillates on overlapping classes
    mu, sd = _standardize_fit(X)
    Z = (X - mu) / sd
    t = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(Z.shape[1])
    b = 0.0
    w_sum = np.zeros_like(w)
    b_sum = 0.0
    steps = 0
    for _ in range(epochs):
        for i in rng.permutation(len(Z)):
            if t[i] * (Z[i] @ w + b) <= 0:
                w += t[i] * Z[i]
                b += t[i]
            w_sum += w
            b_sum += b
            steps += 1
    return _linear_params(mu, sd, w_sum / steps, b_sum / steps)


def _score_perceptron(p, X):
    return _sigmoid(_linear_margin(p, X))


def _fit_svm(X, y, rng, lam, iters, lr):
    mu, sd = _standardize_fit(X)
    Z = (X - mu) / sd
    t = np.where(y == 1, 1.0, -1.0)
    n, f = Z.shape
    w = np.zeros(f)
    b = 0.0
    w_avg = np.zeros(f)
    b_avg = 0.0
    for it in range(1, iters + 1):
        active = t * (Z @ w + b) < 1
        gw = lam * w - (t[active, None] * Z[active]).sum(0) / n
        gb = -t[active].sum() / n
        step = lr / math.sqrt(it)
        w -= step * gw
        b -= step * gb
        w_avg += (w - w_avg) / it
        b_avg += (b - b_avg) / it
    return _linear_params(mu, sd, w_avg, b_avg)


def _score_svm(p, X):
    return _sigmoid(2.0 * _linear_margin(p, X))


def _fit_ridge(X, y, rng, lam):
    mu, sd = _standardize_fit(X)
    Z = (X - mu) / sd
    A = np.hstack([Z, np.ones((len(Z), 1))])
    t = np.where(y == 1, 1.0, -1.0)
    reg = lam * np.eye(A.shape[1])
    reg[-1, -1] = 0.0
    coef = np.linalg.solve(A.T @ A + reg, A.T @ t)
    return _linear_params(mu, sd, coef[:-1], coef[-1])


def _score_ridge(p, X):
    return _sigmoid(2.0 * _linear_margin(p, X))


# -- trees -------------------------------------------------------------------------


def _split_candidates(xs: np.ndarray) -> np.ndarray:
    return np.nonzero(xs[:-1] < xs[1:])[0]


def _threshold(xs: np.ndarray, i: int) -> float:
    thr = 0.5 * (xs[i] + xs[i + 1])
    return float(xs[i]) if thr >= xs[i + 1] else float(thr)


def _best_gini_split(X, y, features):
    """Return (feature, threshold, weighted_child_impurity) or None."""
    n = len(y)
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cand = _split_candidates(xs)
        if not len(cand):
            continue
        cpos = np.cumsum(y[order])[cand]
        nl = cand + 1.0
        nr = n - nl
        pl = cpos / nl
        pr = (y.sum() - cpos) / nr
        imp = nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)
        j = int(np.argmin(imp))
        if best is None or imp[j] < best[2]:
            best = (int(f), _threshold(xs, cand[j]), float(imp[j]))
    return best


def _grow(X, y, depth, max_depth, min_split, rng, max_features):
    n = len(y)
    p = float(y.mean())
    if depth >= max_depth or n < min_split or p in (0.0, 1.0):
        return {"leaf": p}
    f_all = X.shape[1]
    if max_features is None or max_features >= f_all:
        feats = range(f_all)
    else:
        feats = np.sort(rng.choice(f_all, max_features, replace=False))
    split = _best_gini_split(X, y, feats)
    parent = n * 2 * p * (1 - p)
    if split is None or parent - split[2] <= 1e-12:
        return {"leaf": p}
    f, thr, _ = split
    left = X[:, f] <= thr
    return {
        "f": f,
        "t": thr,
        "l": _grow(X[left], y[left], depth + 1, max_depth, min_split, rng, max_features),
        "r": _grow(X[~left], y[~left], depth + 1, max_depth, min_split, rng, max_features),
    }


def _tree_eval(node, X):
    out = np.empty(len(X))
    stack = [(node, np.arange(len(X)))]
    while stack:
        nd, idx = stack.pop()
        if "leaf" in nd:
            out[idx] = nd["leaf"]
            continue
        go_left = X[idx, nd["f"]] <= nd["t"]
        stack.append((nd["l"], idx[go_left]))
        stack.append((nd["r"], idx[~go_left]))
    return out


def _tree_depth(node) -> int:
    if "leaf" in node:
        return 0
    return 1 + max(_tree_depth(node["l"]), _tree_depth(node["r"]))


def _fit_tree(X, y, rng, max_depth, min_samples_split):
    return {"tree": _grow(X, y.astype(float), 0, max_depth, min_samples_split, rng, None)}


def _score_tree(p, X):
    return _tree_eval(p["tree"], X)


def _fit_forest(X, y, rng, n_trees, max_depth, min_samples_split):
    n, f = X.shape
    m = max(1, int(round(math.sqrt(f))))
    trees = []
    for _ in range(n_trees):
        idx = rng.integers(0, n, n)
        trees.append(_grow(X[idx], y[idx].astype(float), 0, max_depth, min_samples_split, rng, m))
    return {"trees": trees}


def _score_forest(p, X):
    return np.mean([_tree_eval(t, X) for t in p["trees"]], axis=0)


def _best_stump(X, y, w):
    """Weighted-error stump: (feature, threshold, polarity, error)."""
    t = y.astype(float)
    W = w.sum()
    P = (w * t).sum()
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cand = _split_candidates(xs)
        if not len(cand):
            continue
        cw = np.cumsum(w[order])[cand]
        cp = np.cumsum((w * t)[order])[cand]
        # polarity +1: left -> Normal, right -> Attack
        err_pos = cp + ((W - cw) - (P - cp))
        err_neg = W - err_pos
        for err, pol in ((err_pos, 1), (err_neg, -1)):
            j = int(np.argmin(err))
            if best is None or err[j] < best[3] - 1e-15:
                best = (int(f), _threshold(xs, cand[j]), pol, float(err[j]))
    return best


def _fit_adaboost(X, y, rng, rounds):
    n = len(y)
    w = np.full(n, 1.0 / n)
    t = np.where(y == 1, 1.0, -1.0)
    stumps = []
    for _ in range(rounds):
        best = _best_stump(X, y, w)
        if best is None:
            break
        f, thr, pol, err = best
        err = min(max(err / w.sum(), 1e-10), 1 - 1e-10)
        if err >= 0.5:
            break
        alpha = 0.5 * math.log((1 - err) / err)
        h = np.where(X[:, f] > thr, pol, -pol)
        w = w * np.exp(-alpha * t * h)
        w /= w.sum()
        stumps.append([f, thr, pol, alpha])
    return {"stumps": stumps}


def _score_adaboost(p, X):
    F = np.zeros(len(X))
    for f, thr, pol, alpha in p["stumps"]:
        F += alpha * np.where(X[:, int(f)] > thr, pol, -pol)
    return _sigmoid(2.0 * F)


_FIT: Dict[ClassifierKind, Callable] = {
    ClassifierKind.GAUSSIAN_NB: _fit_gnb,
    ClassifierKind.KNN: _fit_knn,
    ClassifierKind.NEAREST_CENTROID: _fit_centroid,
    ClassifierKind.LOGISTIC: _fit_logistic,
    ClassifierKind.PERCEPTRON: _fit_perceptron,
    ClassifierKind.LINEAR_SVM: _fit_svm,
    ClassifierKind.DECISION_TREE: _fit_tree,
    ClassifierKind.RANDOM_FOREST: _fit_forest,
    ClassifierKind.ADABOOST: _fit_adaboost,
    ClassifierKind.RIDGE: _fit_ridge,
}

_SCORE: Dict[ClassifierKind, Callable] = {
    ClassifierKind.GAUSSIAN_NB: _score_gnb,
    ClassifierKind.KNN: _score_knn,
    ClassifierKind.NEAREST_CENTROID: _score_centroid,
    ClassifierKind.LOGISTIC: _score_logistic,
    ClassifierKind.PERCEPTRON: _score_perceptron,
    ClassifierKind.LINEAR_SVM: _score_svm,
    ClassifierKind.DECISION_TREE: _score_tree,
    ClassifierKind.RANDOM_FOREST: _score_forest,
    ClassifierKind.ADABOOST: _score_adaboost,
    ClassifierKind.RIDGE: _score_ridge,
}


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


_ARRAY_KEYS = {"X", "y", "mu", "sd", "w", "mean", "var"}


def _compile(params: Mapping[str, Any]) -> Dict[str, Any]:
    out = dict(params)
    for key in _ARRAY_KEYS & set(out):
        out[key] = np.asarray(out[key], dtype=float)
    if "centroids" in out:
        out["centroids"] = {k: np.asarray(v, dtype=float) for k, v in out["centroids"].items()}
    return out


@dataclass(frozen=True, eq=False)
class TrainedModel:
    kind: ClassifierKind
    params: Dict[str, Any]
    schema_id: str
    features: Tuple[int, ...]
    n_train: int
    n_schema_features: int
    hyperparams: Dict[str, Any] = field(default_factory=dict)
    class_centroids: Dict[str, List[float]] = field(default_factory=dict)
    _compiled: Dict[str, Any] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_compiled", _compile(self.params))
        object.__setattr__(
            self, "_centroid_names", list(self.class_centroids)
        )
        object.__setattr__(
            self,
            "_centroid_matrix",
            np.asarray([self.class_centroids[c] for c in self._centroid_names], dtype=float),
        )

    def check_record(self, record: FlowRecord) -> None:
        if record.schema_id != self.schema_id or len(record.values) != self.n_schema_features:
            raise SchemaMismatch(
                f"record schema {record.schema_id} does not match model schema {self.schema_id}"
            )

    def attack_scores(self, X: np.ndarray) -> np.ndarray:
        """Scores for rows of a full-width feature matrix."""
        Xs = np.atleast_2d(np.asarray(X, dtype=float))[:, list(self.features)]
        return np.clip(_SCORE[self.kind](self._compiled, Xs), 0.0, 1.0)

    def attack_class(self, x: np.ndarray) -> Optional[str]:
        """Nearest attack-class centroid among the training attacks (heuristic)."""
        if not self._centroid_names:
            return None
        xs = np.asarray(x, dtype=float)[list(self.features)]
        d = np.linalg.norm(self._centroid_matrix - xs, axis=1)
        return self._centroid_names[int(np.argmin(d))]

    def predict_cost(self, n_records: int) -> float:
        """Multiply-add count of scoring ``n_records`` rows; used by the cost clock."""
        f = len(self.features)
        p = self.params
        if self.kind is ClassifierKind.KNN:
            per = 3.0 * f * self.n_train
        elif self.kind is ClassifierKind.GAUSSIAN_NB:
            per = 12.0 * f
        elif self.kind is ClassifierKind.NEAREST_CENTROID:
            per = 6.0 * f
        elif self.kind is ClassifierKind.DECISION_TREE:
            per = 2.0 * _tree_depth(p["tree"]) + 1
        elif self.kind is ClassifierKind.RANDOM_FOREST:
            per = sum(2.0 * _tree_depth(t) + 1 for t in p["trees"])
        elif self.kind is ClassifierKind.ADABOOST:
            per = 2.0 * len(p["stumps"]) + 1
        else:
            per = 4.0 * f + 1
        return per * n_records

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "params": _to_jsonable(self.params),
            "schema_id": self.schema_id,
            "features": list(self.features),
            "n_train": self.n_train,
            "n_schema_features": self.n_schema_features,
            "hyperparams": self.hyperparams,
            "class_centroids": self.class_centroids,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainedModel":
        return cls(
            ClassifierKind(d["kind"]),
            d["params"],
            d["schema_id"],
            tuple(d["features"]),
            d["n_train"],
            d["n_schema_features"],
            dict(d.get("hyperparams", {})),
            {k: list(v) for k, v in d.get("class_centroids", {}).items()},
        )


def fit(
    kind: ClassifierKind,
    train: Sequence[FlowRecord],
    features: Sequence[int],
    seed: int = 0,
    hyperparams: Optional[Mapping[str, Any]] = None,
) -> TrainedModel:
    kind = ClassifierKind(kind)
    if not train:
        raise EmptyTrainingSet("cannot fit on an empty training set")
    width = len(train[0].values)
    features = tuple(int(i) for i in features)
    if not features or len(set(features)) != len(features) or min(features) < 0 or max(features) >= width:
        raise ValueError(f"invalid feature list {features} for {width} features")
    schema_id = train[0].schema_id
    if any(r.schema_id != schema_id for r in train):
        raise SchemaMismatch("training records come from more than one schema")
    y = binary_labels(train)
    if len(np.unique(y)) < 2 and kind not in SINGLE_CLASS_OK:
        raise SingleClassTrainingSet(f"{kind.value} needs both Normal and Attack training records")
    hp = dict(DEFAULT_HYPERPARAMS[kind])
    hp.update(hyperparams or {})
    X = as_matrix(train, features)
    rng = np.random.default_rng(seed)
    params = _to_jsonable(_FIT[kind](X, y, rng, **hp))

    centroids: Dict[str, List[float]] = {}
    for cls_name in sorted({r.label for r in train if r.label != NORMAL}):
        rows = X[[r.label == cls_name for r in train]]
        centroids[cls_name] = rows.mean(axis=0).tolist()
    return TrainedModel(kind, params, schema_id, features, len(train), width, hp, centroids)


def predict(model: TrainedModel, record: FlowRecord) -> Prediction:
    model.check_record(record)
    s = float(model.attack_scores(record.values[None, :])[0])
    if s >= 0.5:
        return Prediction(ATTACK, s, s, model.attack_class(record.values))
    return Prediction(NORMAL, 1.0 - s, s, None)


def evaluate(model: TrainedModel, test: Sequence[FlowRecord], clock: str = "wall") -> Evaluation:
    """Confusion counts on ``test`` plus the detection time in milliseconds.

    ``clock="wall"`` times the prediction pass; ``clock="cost"`` reports the
    model's multiply-add count at a nominal 1e6 operations per millisecond,
    which makes tournament results reproducible.
    """
    if not test:
        raise ValueError("evaluation needs at least one record")
    for r in test:
        model.check_record(r)
    X = as_matrix(test)
    y = binary_labels(test)
    start = time.perf_counter()
    pred = model.attack_scores(X) >= 0.5
    end = time.perf_counter()
    if clock == "wall":
        theta_ms = (end - start) * 1000.0
    elif clock == "cost":
        theta_ms = model.predict_cost(len(test)) / 1e6
    else:
        raise ValueError(f"unknown clock {clock!r}")
    return Evaluation(ConfusionCounts.from_arrays(y, pred), theta_ms)


def save_model(model: TrainedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path) -> TrainedModel:
    with open(path, encoding="utf-8") as fh:
        return TrainedModel.from_dict(json.load(fh))
