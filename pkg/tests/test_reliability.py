import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgetwin.reliability import (
    Decision,
    ReliabilityMonitor,
    ReliabilityState,
    ThresholdConfig,
    adapt_threshold,
    check,
    observe,
    reliability,
)
from edgetwin.twin_graph import EventKind, TwinGraph

CFG = ThresholdConfig()
PAIRS = st.tuples(st.booleans(), st.booleans())


def feed(state, pairs):
    for p, t in pairs:
        state = observe(state, p, t)
    return state


def state_with(tp=0, fn=0, fp=0, tn=0, theta=0.95):
    pairs = [(True, True)] * tp + [(False, True)] * fn + [(True, False)] * fp + [(False, False)] * tn
    return feed(ReliabilityState(capacity=max(len(pairs), 1), theta=theta), pairs)


def test_ninety_nine_of_hundred():
    s = feed(ReliabilityState.initial(CFG), [("Attack", "Attack")] * 99 + [("Normal", "Attack")])
    assert (s.tp, s.fn) == (99, 1)
    assert s.phi == pytest.approx(0.99, abs=1e-15)


def test_no_positives_means_full_reliability():
    s = feed(ReliabilityState.initial(CFG), [("Normal", "Normal")] * 50)
    assert s.tp + s.fn == 0 and s.phi == 1.0
    assert reliability(0, 0) == 1.0


def test_window_eviction():
    s = feed(ReliabilityState(capacity=3, theta=0.95), [(False, True), (True, True), (True, False), (False, False)])
    assert (s.tp, s.fn, s.fp, s.tn) == (1, 0, 1, 1)
    assert len(s.window) == 3 and s.seen == 4


def test_threshold_tightens_on_false_alarms():
    s = state_with(tp=95, fn=5, fp=30, tn=70)  # FNR exactly at target, FPR above
    assert adapt_threshold(s, CFG) == pytest.approx(0.97)


def test_threshold_relaxes_on_misses():
    s = state_with(tp=80, fn=20, fp=5, tn=95)  # FPR exactly at target, FNR above
    assert adapt_threshold(s, CFG) == pytest.approx(0.93)


def test_threshold_fixed_point():
    assert adapt_threshold(state_with(tp=95, fn=5, fp=5, tn=95), CFG) == 0.95


def test_check_boundaries():
    assert check(state_with(tp=99, fn=1)) is Decision.KEEP_MODEL
    assert check(state_with(tp=90, fn=10)) is Decision.TRIGGER_RETRAINING
    assert check(state_with(tp=95, fn=5)) is Decision.KEEP_MODEL  # phi == theta keeps the model


@settings(max_examples=300)
@given(st.lists(PAIRS, max_size=200), st.integers(1, 50))
def test_phi_equals_brute_force_recall_over_window(pairs, capacity):
    s = feed(ReliabilityState(capacity=capacity, theta=0.95), pairs)
    window = pairs[-capacity:]
    pos = [p for p, t in window if t]
    expected = 1.0 if not pos else sum(pos) / len(pos)
    assert s.phi == pytest.approx(expected, abs=1e-12)
    assert s.window == tuple(window)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(PAIRS, min_size=1, max_size=30), max_size=40))
def test_theta_never_leaves_bounds(windows):
    cfg = ThresholdConfig(window=10)
    mon = ReliabilityMonitor(cfg)
    for block in windows:
        for p, t in block:
            mon.record(p, t)
            assert cfg.theta_min <= mon.state.theta <= cfg.theta_max


@settings(max_examples=300)
@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 50), st.floats(0.8, 0.995))
def test_trigger_is_monotone(tp, fn, d, theta):
    d = min(d, tp)
    if tp + fn == 0:
        return
    before = check(state_with(tp=tp, fn=fn, theta=theta))
    after = check(state_with(tp=tp - d, fn=fn + d, theta=theta))
    if before is Decision.TRIGGER_RETRAINING:
        assert after is Decision.TRIGGER_RETRAINING


def test_one_notification_per_low_evaluation():
    twin = TwinGraph()
    accepted = iter([True, False, False, True])
    calls = []

    def on_trigger(state):
        calls.append(state.seen)
        return next(accepted)

    mon = ReliabilityMonitor(ThresholdConfig(window=10), twin, on_trigger)
    decisions = []
    for _ in range(4):
        for _ in range(10):
            d = mon.record("Normal", "Attack")  # every attack missed
            if d is not None:
                decisions.append(d)
    assert decisions == [Decision.TRIGGER_RETRAINING] * 4
    assert calls == [10, 20, 30, 40]
    retrains = twin.event_log(EventKind.RETRAIN_TRIGGERED)
    assert [e.payload["coalesced"] for e in retrains] == [False, True, True, False]
    assert len(twin.event_log(EventKind.RELIABILITY_CHECKED)) == 4


def test_evaluation_happens_once_per_window_and_check_precedes_adapt():
    twin = TwinGraph()
    mon = ReliabilityMonitor(ThresholdConfig(window=5), twin)
    # per window: 3 hits and 2 false alarms -> FPR 1 above target, FNR 0 below it
    pattern = [(True, True)] * 3 + [(True, False)] * 2
    out = [mon.record(*pattern[i % 5]) for i in range(12)]
    assert [i for i, d in enumerate(out) if d is not None] == [4, 9]
    checks = [e.payload for e in twin.event_log(EventKind.RELIABILITY_CHECKED)]
    assert [c["theta"] for c in checks] == [0.95, 0.99]
    assert all(c["decision"] == "KeepModel" for c in checks)
    assert mon.state.theta == 0.995  # 0.99 + 0.04 clamped to the ceiling


def test_config_validation():
    with pytest.raises(ValueError):
        ThresholdConfig(theta0=0.99, theta_max=0.98)
    with pytest.raises(ValueError):
        ThresholdConfig(window=0)
