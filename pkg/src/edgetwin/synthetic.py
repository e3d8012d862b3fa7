"""Synthetic flow generators on the ``synthetic-v1`` profile.

Two scenarios stand in for the two public datasets: ``ton-like`` attacks live
in features f00-f09 and ``edge-like`` attacks in f10-f19, so a model trained on
one misses the other entirely.  Within a scenario all attack classes share a
four-feature core shift plus two class-specific features.  Normal traffic is
the same in both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .flow_model import NORMAL, FeatureSchema, FlowRecord, load_schema

N_FEATURES = 20
NORMAL_MEAN = 0.3
ATTACK_MEAN = 0.7
NOISE_SD = 0.05

TON_CLASSES = ("Password", "Scanning", "XSS", "DDoS", "Ransomware", "Injection", "Backdoor")
EDGE_CLASSES = (
    "Password",
    "Port Scanning",
    "DDoS UDP",
    "XSS",
    "MITM",
    "Backdoor",
    "Fingerprinting",
    "SQL Injection",
    "Ransomware",
    "DDoS HTTP",
)


def _signatures(classes: Sequence[str], offset: int) -> Dict[str, Tuple[int, ...]]:
    core = tuple(offset + j for j in range(4))
    extra = [offset + 4 + j for j in range(6)]
    return {
        c: core + (extra[(2 * i) % 6], extra[(2 * i + 1) % 6])
        for i, c in enumerate(classes)
    }


SCENARIOS: Dict[str, Dict[str, Tuple[int, ...]]] = {
    "ton-like": _signatures(TON_CLASSES, 0),
    "edge-like": _signatures(EDGE_CLASSES, 10),
}


@dataclass
class SyntheticSource:
    scenario: str
    schema: FeatureSchema

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise KeyError(f"unknown synthetic scenario {self.scenario!r}; have {sorted(SCENARIOS)}")

    @classmethod
    def named(cls, scenario: str) -> "SyntheticSource":
        return cls(scenario, load_schema("synthetic-v1"))

    @property
    def attack_classes(self) -> List[str]:
        return list(SCENARIOS[self.scenario])

    def draw(self, label: str, n: int, rng: np.random.Generator) -> List[FlowRecord]:
        if label != NORMAL and label not in SCENARIOS[self.scenario]:
            raise KeyError(f"scenario {self.scenario!r} has no attack class {label!r}")
        mean = np.full(N_FEATURES, NORMAL_MEAN)
        if label != NORMAL:
            mean[list(SCENARIOS[self.scenario][label])] = ATTACK_MEAN
        X = np.clip(rng.normal(mean, NOISE_SD, size=(n, N_FEATURES)), 0.0, 1.0)
        fp = self.schema.fingerprint
        return [FlowRecord(X[i], fp, label=label) for i in range(n)]


def signal_noise_fixture(n: int = 1000, seed: int = 0) -> Tuple[List[FlowRecord], List[int]]:
    """Ten weakly informative signal features plus ten louder pure-noise ones.

    The label is the sign of the sum of the signal features, so no single
    feature decides it and accuracy grows with the number of signal features
    a model sees.  Signal indices are scattered through the 20 columns.
    """
    rng = np.random.default_rng(seed)
    signal = sorted(rng.choice(20, 10, replace=False).tolist())
    noise = [i for i in range(20) if i not in signal]
    X = np.empty((n, 20))
    X[:, signal] = rng.normal(0.0, 1.0, size=(n, 10))
    X[:, noise] = rng.normal(0.0, 3.0, size=(n, 10))
    y = X[:, signal].sum(axis=1) > 0
    recs = [FlowRecord(X[i], "signal-noise", label="DDoS" if y[i] else NORMAL) for i in range(n)]
    return recs, signal
