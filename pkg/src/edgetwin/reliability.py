"""Detection performance monitoring: windowed reliability and an adaptive threshold.

Reliability is ``1 - FN / (TP + FN)`` over the last ``W`` (prediction,
estimated truth) pairs.  Once per full window the monitor compares it with the
current threshold and then nudges the threshold one step: up when the false
positive rate is above target, down when the false negative rate is.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Tuple, Union

from .flow_model import NORMAL
from .twin_graph import EventKind, TwinGraph

logger = logging.getLogger(__name__)


class Decision(str, Enum):
    KEEP_MODEL = "KeepModel"
    TRIGGER_RETRAINING = "TriggerRetraining"


@dataclass(frozen=True)
class ThresholdConfig:
    theta0: float = 0.95
    theta_min: float = 0.80
    theta_max: float = 0.995
    eta: float = 0.02
    target_fpr: float = 0.05
    target_fnr: float = 0.05
    window: int = 1000

    def __post_init__(self):
        if not self.theta_min < self.theta0 < self.theta_max:
            raise ValueError("need theta_min < theta0 < theta_max")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.window < 1:
            raise ValueError("window must hold at least one observation")


def reliability(tp: int, fn: int) -> float:
    """Share of positives the classifier did not miss; 1 when there were none."""
    if tp + fn == 0:
        return 1.0
    return 1.0 - fn / (tp + fn)


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


@dataclass(frozen=True)
class ReliabilityState:
    capacity: int
    theta: float
    window: Tuple[Tuple[bool, bool], ...] = ()
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0
    seen: int = 0

    @classmethod
    def initial(cls, config: ThresholdConfig) -> "ReliabilityState":
        return cls(capacity=config.window, theta=config.theta0)

    @property
    def phi(self) -> float:
        return reliability(self.tp, self.fn)

    @property
    def fpr(self) -> float:
        return _rate(self.fp, self.fp + self.tn)

    @property
    def fnr(self) -> float:
        return _rate(self.fn, self.tp + self.fn)


def _as_flag(x: Union[bool, str]) -> bool:
    if isinstance(x, str):
        return x != NORMAL
    return bool(x)


def _bump(state_counts, pred: bool, truth: bool, delta: int):
    tp, fn, fp, tn = state_counts
    if truth and pred:
        tp += delta
    elif truth:
        fn += delta
    elif pred:
        fp += delta
    else:
        tn += delta
    return tp, fn, fp, tn


def observe(state: ReliabilityState, prediction: Union[bool, str], estimated_truth: Union[bool, str]) -> ReliabilityState:
    """Return the state after one more observation; the oldest is evicted at capacity."""
    pair = (_as_flag(prediction), _as_flag(estimated_truth))
    counts = (state.tp, state.fn, state.fp, state.tn)
    window = state.window + (pair,)
    counts = _bump(counts, *pair, 1)
    if len(window) > state.capacity:
        counts = _bump(counts, *window[0], -1)
        window = window[1:]
    tp, fn, fp, tn = counts
    return replace(state, window=window, tp=tp, fn=fn, fp=fp, tn=tn, seen=state.seen + 1)


def adapt_threshold(state: ReliabilityState, config: ThresholdConfig) -> float:
    step = config.eta * _sign(state.fpr - config.target_fpr) - config.eta * _sign(state.fnr - config.target_fnr)
    theta = min(config.theta_max, max(config.theta_min, state.theta + step))
    # keep the threshold on the eta grid instead of accumulating rounding error
    return round(theta, 10)


def check(state: ReliabilityState) -> Decision:
    return Decision.KEEP_MODEL if state.phi >= state.theta else Decision.TRIGGER_RETRAINING


class ReliabilityMonitor:
    """Stateful wrapper used on the detection path.

    ``on_trigger`` is called once per below-threshold evaluation and should
    return quickly; it reports whether the retraining request was accepted
    (``True``) or coalesced into a run already in flight (``False``).
    """

    def __init__(
        self,
        config: ThresholdConfig = ThresholdConfig(),
        twin: Optional[TwinGraph] = None,
        on_trigger: Optional[Callable[[ReliabilityState], bool]] = None,
    ):
        self.config = config
        self.state = ReliabilityState.initial(config)
        self.twin = twin
        self.on_trigger = on_trigger
        self.triggers = 0
        self.evaluations = 0

    def record(
        self, prediction: Union[bool, str], estimated_truth: Union[bool, str], timestamp: Optional[float] = None
    ) -> Optional[Decision]:
        self.state = observe(self.state, prediction, estimated_truth)
        if self.state.seen % self.config.window:
            return None
        return self.evaluate(timestamp)

    def evaluate(self, timestamp: Optional[float] = None) -> Decision:
        s = self.state
        decision = check(s)
        self.evaluations += 1
        trace = {
            "phi": s.phi,
            "theta": s.theta,
            "tp": s.tp,
            "fn": s.fn,
            "fp": s.fp,
            "tn": s.tn,
            "fpr": s.fpr,
            "fnr": s.fnr,
            "decision": decision.value,
            "observed": s.seen,
        }
        if self.twin is not None:
            self.twin.emit(EventKind.RELIABILITY_CHECKED, trace, timestamp)
        if decision is Decision.TRIGGER_RETRAINING:
            self.triggers += 1
            accepted = self.on_trigger(s) if self.on_trigger is not None else True
            logger.info("reliability %.4f below threshold %.3f (request %s)", s.phi, s.theta,
                        "accepted" if accepted else "coalesced")
            if self.twin is not None:
                self.twin.emit(
                    EventKind.RETRAIN_TRIGGERED,
                    {"phi": s.phi, "theta": s.theta, "observed": s.seen, "coalesced": not accepted},
                    timestamp,
                )
        self.state = replace(s, theta=adapt_threshold(s, self.config))
        return decision
