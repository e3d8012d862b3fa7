"""Acceptance criteria, one test each, with the stated runtime bounds.

Every test records a PASS/FAIL line that is echoed in the pytest terminal
summary under "acceptance criteria".
"""

import itertools
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

import edgetwin.online_selection as osel
from conftest import ACCEPTANCE_LINES
from edgetwin.classifiers import ClassifierKind, ConfusionCounts, Evaluation
from edgetwin.feature_selection import FsKind
from edgetwin.flow_model import NORMAL, FlowRecord, sample_baseline
from edgetwin.harness import ExperimentSpec, bundled_spec, replay
from edgetwin.mitigation import RiskLevel, Verdict, audit_isolations
from edgetwin.online_selection import SelectionConfig, run_selection, select_on_labeled, sigma
from edgetwin.reliability import ReliabilityState, observe
from edgetwin.synthetic import SyntheticSource, signal_noise_fixture
from edgetwin.twin_graph import EventKind, read_journal
from test_mitigation import EXPECTED, TIER_CLASS, _prepare, alert, independent_safety_check


@contextmanager
def criterion(number, title, bound_s):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        ok = elapsed < bound_s
        assert ok, f"took {elapsed:.2f}s, bound {bound_s}s"
    finally:
        elapsed = time.perf_counter() - start
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.2f}s, bound {bound_s}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)


# -- 1 ---------------------------------------------------------------------------------------


def test_criterion_1_reliability_identity():
    with criterion(1, "phi = 1 - fn/(tp+fn) over 10,000 random pairs", 1.0):
        rng = np.random.default_rng(1)
        pairs = rng.integers(0, 5000, size=(10_000, 2))
        pairs[:200] = 0  # the empty window case
        for tp, fn in pairs:
            phi = ReliabilityState(capacity=1, theta=0.95, tp=int(tp), fn=int(fn)).phi
            expected = 1.0 if tp + fn == 0 else 1.0 - fn / (tp + fn)
            assert abs(phi - expected) <= 1e-12
        # the same identity through the sliding window itself
        for tp, fn in pairs[200:300] % 60:
            s = ReliabilityState(capacity=200, theta=0.95)
            for _ in range(tp):
                s = observe(s, True, True)
            for _ in range(fn):
                s = observe(s, False, True)
            assert abs(s.phi - (1.0 if tp + fn == 0 else 1.0 - fn / (tp + fn))) <= 1e-12


# -- 2 ---------------------------------------------------------------------------------------


def brute_force_winner(cohort, alpha=0.9, beta=0.1):
    """Arg max of alpha*sigma - beta*normalized time, written from scratch."""
    times = [t for _, t in cohort]
    lo, hi = min(times), max(times)
    best = None
    for i, ((tp, fn, fp, _), t) in enumerate(cohort):
        rec = tp / (tp + fn) if tp + fn else 0.0
        prec = tp / (tp + fp) if tp + fp else 0.0
        norm = (t - lo) / (hi - lo) if hi > lo else 0.0
        key = (alpha * (0.6 * rec + 0.4 * prec) - beta * norm, -t, -i)
        if best is None or key > best[0]:
            best = (key, i)
    return best[1]


def random_cohort(rng):
    if rng.random() < 0.3:
        # tie-heavy cohorts: a handful of shared count rows and times
        rows = [tuple(int(v) for v in rng.integers(0, 6, size=4)) for _ in range(3)]
        times = [float(rng.integers(1, 4)) for _ in range(3)]
        return [(rows[rng.integers(3)], times[rng.integers(3)]) for _ in range(10)]
    return [
        (tuple(int(v) for v in rng.integers(0, 500, size=4)), float(rng.uniform(0.01, 50.0)))
        for _ in range(10)
    ]


def test_criterion_2_selection_oracle(monkeypatch):
    kinds = list(ClassifierKind)
    assert len(kinds) == 10
    labeled = [FlowRecord(np.array([float(i % 2)]), "x", label="DDoS" if i % 2 else NORMAL) for i in range(20)]
    current = {}
    # the tournament runs for real; only training and evaluation are replaced by the random cohort
    monkeypatch.setattr(osel, "fit", lambda kind, *a, **k: kind)
    monkeypatch.setattr(osel, "evaluate", lambda model, *a, **k: current[model])
    cfg = SelectionConfig(clock="cost")
    rng = np.random.default_rng(2)
    ties = 0
    with criterion(2, "select_classifier winner equals brute-force arg max on 1,000 cohorts", 5.0):
        for _ in range(1000):
            cohort = random_cohort(rng)
            for kind, ((tp, fn, fp, tn), t) in zip(kinds, cohort):
                current[kind] = Evaluation(ConfusionCounts(tp, fn, fp, tn), t)
            result = osel.select_classifier(labeled, cfg)
            assert result.winner is kinds[brute_force_winner(cohort)]
            combined = [s.combined for s in result.scores]
            ties += combined.count(max(combined)) > 1
        assert ties > 50  # the tie-break rules were actually exercised


# -- 3 ---------------------------------------------------------------------------------------


def test_criterion_3_sigma_arithmetic():
    with criterion(3, "sigma examples", 0.1):
        assert sigma(ConfusionCounts(tp=80, fn=20, fp=20, tn=0)) == 0.80
        assert sigma(ConfusionCounts(tp=0, fn=20, fp=20, tn=0)) == 0.0
        assert sigma(ConfusionCounts(tp=0, fn=0, fp=0, tn=9)) == 0.0


# -- 4 ---------------------------------------------------------------------------------------


def test_criterion_4_two_thousand_sample_protocol():
    with criterion(4, "1000 batch + 1000 baseline selection run", 60.0):
        rng = np.random.default_rng(4)
        src = SyntheticSource.named("edge-like")
        classes = src.attack_classes
        pool = src.draw(NORMAL, 500, rng)
        for cls in classes:
            pool += src.draw(cls, 150, rng)
        baseline = sample_baseline(pool, 1000, 0.65, seed=4)
        batch = src.draw(NORMAL, 650, rng)
        for i, cls in enumerate(classes):
            batch += src.draw(cls, 350 // len(classes) + (i < 350 % len(classes)), rng)
        batch = [batch[i].with_label(None) for i in rng.permutation(len(batch))]
        assert len(batch) == 1000 and len(baseline) == 1000
        assert baseline.attack_ratio == pytest.approx(0.65)

        report = run_selection(batch, baseline, SelectionConfig(seed=4))
        n_features = len(batch[0].values)
        assert len(report.classifier_scores) == 10
        assert {s.candidate for s in report.classifier_scores} == {k.value for k in ClassifierKind}
        assert len(report.fs_scores) == 5
        assert {s.candidate for s in report.fs_scores} == {k.value for k in FsKind}
        for s in report.fs_scores:
            assert len(s.features) == len(set(s.features)) == min(10, n_features)
        assert len(report.features) == min(10, n_features)


# -- 5 ---------------------------------------------------------------------------------------


def test_criterion_5_fs_signal_recovery():
    with criterion(5, "winning FS set holds >= 9 of 10 signal features", 30.0):
        recs, signal = signal_noise_fixture(1000, seed=5)
        # both tournaments, as the pipeline runs them: classifier first, then FS for that classifier
        report = select_on_labeled(recs, recs, SelectionConfig(seed=5, clock="cost"), trigger="fixture")
        hits = set(report.features) & set(signal)
        assert len(hits) >= 9, (report.classifier, report.fs_method, report.features, signal)


# -- 6 ---------------------------------------------------------------------------------------


def test_criterion_6_drift_adaptation(tmp_path):
    with criterion(6, "drift replay retrains, swaps and recovers >= 95% per class", 120.0):
        spec = ExperimentSpec.load(bundled_spec("drift"))
        report = replay(spec, tmp_path)
        events = read_journal(tmp_path / "journal.jsonl")
        checks = [e for e in events if e.kind is EventKind.RELIABILITY_CHECKED]
        low = [c for c in checks if c.payload["phi"] < c.payload["theta"]]
        assert low, "phi never fell below theta"
        for i, c in enumerate(checks):
            nxt = checks[i + 1].seq if i + 1 < len(checks) else float("inf")
            retrains = [e for e in events if c.seq < e.seq < nxt and e.kind is EventKind.RETRAIN_TRIGGERED]
            assert len(retrains) == (1 if c in low else 0)
        assert report.selections, "no completed selection run"
        assert any(e.kind is EventKind.MODEL_SWAPPED for e in events)

        first_phase = sum(n for _, n in spec.phases[0].attacks)
        first_phase_len = round(first_phase / spec.phases[0].attack_fraction)
        swap_index = report.selections[-1]["swap_index"]
        assert swap_index >= first_phase_len  # everything after the swap is new-distribution traffic
        new_classes = {c for c, _ in spec.phases[1].attacks}
        post = report.version_sensitivity(report.final_version)
        # attacks arrive class by class, so the leading new block is what trips the monitor
        # and is entirely pre-swap; every later new class is seen by the swapped model
        assert set(post) <= new_classes and len(post) >= len(new_classes) - 1
        assert min(post.values()) >= 95.0, post


# -- 7 ---------------------------------------------------------------------------------------


def test_criterion_7_mitigation_state_machine():
    with criterion(7, "exhaustive tier x verdict paths and approval audit", 1.0):
        covered = 0
        for tier, start in itertools.product(RiskLevel, ["Active", "PendingIsolation", "Isolated"]):
            probe_twin, probe = _prepare(start)
            probe.mitigate(alert(TIER_CLASS[tier]))
            verdicts = [None] + ([Verdict.APPROVE, Verdict.DENY] if probe.approvals.pending() else [])
            for verdict in verdicts:
                after_alert, after_verdict, _ = EXPECTED[(tier, start, verdict)]
                twin, m = _prepare(start)
                m.mitigate(alert(TIER_CLASS[tier]))
                assert twin.status("e1").value == after_alert
                if verdict is not None:
                    (req,) = m.approvals.pending()
                    m.resolve_approval(req.request_id, verdict)
                assert twin.status("e1").value == after_verdict
                events = twin.event_log()
                assert audit_isolations(events) == [] and independent_safety_check(events)
                covered += 1
        assert covered == len(EXPECTED)


# -- 8 ---------------------------------------------------------------------------------------


def test_criterion_8_determinism():
    with criterion(8, "two smoke runs with one seed agree exactly", 60.0):
        spec = bundled_spec("smoke")
        a = replay(ExperimentSpec.load(spec, seed=7))
        b = replay(ExperimentSpec.load(spec, seed=7))
        assert a.counts_view() == b.counts_view()
        assert a.counts_view()["winners"] == b.counts_view()["winners"]
        assert a.event_kinds == b.event_kinds


# -- 9 ---------------------------------------------------------------------------------------

DATASET_VARS = ("EDGETWIN_TON_IOT_CSV", "EDGETWIN_EDGE_IIOT_CSV")


def test_criterion_9_cross_dataset(tmp_path):
    if not all(os.environ.get(v) for v in DATASET_VARS):
        ACCEPTANCE_LINES.append("criterion 9: SKIP  dataset-backed check needs " + " and ".join(DATASET_VARS))
        pytest.skip("set EDGETWIN_TON_IOT_CSV and EDGETWIN_EDGE_IIOT_CSV to run the dataset-backed check")
    with criterion(9, "ToN-IoT -> Edge-IIoT: >= 90% for >= 8 of 10 classes", 900.0):
        report = replay(ExperimentSpec.load(bundled_spec("table2-ton-to-edge")), tmp_path)
        print(report.render())
        good = [c for c, v in report.sensitivity.items() if v >= 90.0]
        assert len(report.sensitivity) == 10
        assert len(good) >= 8, report.sensitivity
