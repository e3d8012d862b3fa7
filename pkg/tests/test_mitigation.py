import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgetwin.mitigation import (
    ActionKind,
    ActionStatus,
    Alert,
    AlreadyResolved,
    ApprovalRegistry,
    Mitigator,
    RiskLevel,
    RiskPolicy,
    SuspendedIpList,
    UnknownRequest,
    Verdict,
    audit_isolations,
    classify_risk,
)
from edgetwin.twin_graph import EventKind, TwinEvent, TwinGraph, TwinStatus

# attack class per tier, always at low confidence so no promotion happens
TIER_CLASS = {RiskLevel.STANDARD: "Port Scanning", RiskLevel.MID_HIGH: "DDoS UDP", RiskLevel.HIGH: "Ransomware"}

_ids = itertools.count(1)


def alert(cls, node="e1", ip="10.0.0.9", conf=0.6):
    return Alert(next(_ids), f"flow-{cls}", ip, node, cls, conf)


def setup(*nodes, tmp=None):
    twin = TwinGraph()
    for n in nodes or ("e1",):
        twin.register(n)
    sus = SuspendedIpList(tmp / "sus.txt" if tmp else None)
    reg = ApprovalRegistry(tmp / "approvals.json" if tmp else None)
    return twin, Mitigator(twin, RiskPolicy(), sus, reg)


def independent_safety_check(events):
    """Every MidHigh isolation is preceded by an Approve verdict for the same node."""
    approved = set()
    for e in events:
        if e.kind is not EventKind.MITIGATION_APPLIED:
            continue
        p = e.payload
        if p.get("verdict") == "Approve":
            approved.add((e.node_id, p.get("request_id")))
        if p.get("new_status") == "Isolated" and p.get("risk") == "MidHigh":
            if (e.node_id, p.get("request_id")) not in approved:
                return False
    return True


# -- risk classification ---------------------------------------------------------------


def test_risk_examples():
    assert classify_risk("Ransomware", 0.95) is RiskLevel.HIGH
    assert classify_risk("Port Scanning", 0.5) is RiskLevel.STANDARD
    assert classify_risk("DDoS UDP", 0.92) is RiskLevel.HIGH
    assert classify_risk("DDoS UDP", 0.5) is RiskLevel.MID_HIGH
    assert classify_risk("Port Scanning", 0.95) is RiskLevel.MID_HIGH


def test_unmapped_class_is_standard_without_promotion():
    assert classify_risk("Wormhole", 0.99) is RiskLevel.STANDARD
    assert classify_risk(None, 0.99) is RiskLevel.STANDARD


def test_policy_file_overrides_tiers(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"High": ["Port Scanning"], "promote_at": None}))
    policy = RiskPolicy.from_file(path)
    assert classify_risk("Port Scanning", 0.1, policy) is RiskLevel.HIGH
    assert classify_risk("DDoS UDP", 1.0, policy) is RiskLevel.MID_HIGH


# -- mitigate -------------------------------------------------------------------------------


def test_high_risk_isolates_node():
    twin, m = setup("e1")
    acts = m.mitigate(alert("Ransomware", conf=0.95))
    assert [a.kind for a in acts] == [ActionKind.BLOCK_FLOW, ActionKind.SUSPEND_IP, ActionKind.ISOLATE_NODE]
    assert twin.status("e1") is TwinStatus.ISOLATED


def test_mid_high_waits_for_approval():
    twin, m = setup("e2")
    acts = m.mitigate(alert("DDoS UDP", node="e2"))
    assert [a.kind for a in acts] == [ActionKind.BLOCK_FLOW, ActionKind.SUSPEND_IP, ActionKind.REQUEST_APPROVAL]
    assert acts[-1].status is ActionStatus.PENDING
    assert twin.status("e2") is TwinStatus.PENDING_ISOLATION
    assert [r.request_id for r in m.approvals.pending()] == [acts[-1].request_id]


def test_repeat_ip_is_noop_on_suspended_list():
    twin, m = setup("e1")
    m.mitigate(alert("Port Scanning", ip="1.2.3.4"))
    size = len(m.suspended)
    acts = m.mitigate(alert("Port Scanning", ip="1.2.3.4"))
    assert len(m.suspended) == size == 1
    assert acts[1].noop


def test_second_mid_high_reuses_pending_request():
    twin, m = setup("e1")
    first = m.mitigate(alert("XSS"))[-1]
    second = m.mitigate(alert("Password"))[-1]
    assert second.noop and second.request_id == first.request_id
    assert len(m.approvals) == 1


def test_approve_deny_and_double_resolution():
    twin, m = setup("e1", "e2")
    r1 = m.mitigate(alert("XSS", node="e1"))[-1].request_id
    r2 = m.mitigate(alert("XSS", node="e2"))[-1].request_id
    assert m.resolve_approval(r1, Verdict.APPROVE).status is ActionStatus.APPLIED
    assert twin.status("e1") is TwinStatus.ISOLATED
    assert m.resolve_approval(r2, Verdict.DENY).status is ActionStatus.DENIED
    assert twin.status("e2") is TwinStatus.ACTIVE
    with pytest.raises(AlreadyResolved):
        m.resolve_approval(r1, Verdict.DENY)
    with pytest.raises(UnknownRequest):
        m.resolve_approval(42, Verdict.APPROVE)


def test_persistence_files(tmp_path):
    twin, m = setup("e1", tmp=tmp_path)
    m.mitigate(alert("XSS", ip="5.5.5.5"))
    m.mitigate(alert("Backdoor", ip="6.6.6.6"))
    lines = (tmp_path / "sus.txt").read_text().splitlines()
    assert [l.split(",")[0] for l in lines] == ["5.5.5.5", "6.6.6.6"]
    assert SuspendedIpList(tmp_path / "sus.txt").items().keys() == {"5.5.5.5", "6.6.6.6"}
    reloaded = ApprovalRegistry(tmp_path / "approvals.json")
    assert [r.attack_class for r in reloaded.pending()] == ["XSS"]


# -- exhaustive state machine ------------------------------------------------------------------

# (tier, starting status, verdict) -> (status after alert, status after verdict, request opened by this alert)
# verdict None means the request is left pending; a verdict only applies if some request is pending.
EXPECTED = {
    (RiskLevel.STANDARD, "Active", None): ("Active", "Active", False),
    (RiskLevel.STANDARD, "PendingIsolation", None): ("PendingIsolation", "PendingIsolation", False),
    (RiskLevel.STANDARD, "PendingIsolation", Verdict.APPROVE): ("PendingIsolation", "Isolated", False),
    (RiskLevel.STANDARD, "PendingIsolation", Verdict.DENY): ("PendingIsolation", "Active", False),
    (RiskLevel.STANDARD, "Isolated", None): ("Isolated", "Isolated", False),
    (RiskLevel.MID_HIGH, "Active", None): ("PendingIsolation", "PendingIsolation", True),
    (RiskLevel.MID_HIGH, "Active", Verdict.APPROVE): ("PendingIsolation", "Isolated", True),
    (RiskLevel.MID_HIGH, "Active", Verdict.DENY): ("PendingIsolation", "Active", True),
    (RiskLevel.MID_HIGH, "PendingIsolation", None): ("PendingIsolation", "PendingIsolation", False),
    (RiskLevel.MID_HIGH, "PendingIsolation", Verdict.APPROVE): ("PendingIsolation", "Isolated", False),
    (RiskLevel.MID_HIGH, "PendingIsolation", Verdict.DENY): ("PendingIsolation", "Active", False),
    (RiskLevel.MID_HIGH, "Isolated", None): ("Isolated", "Isolated", False),
    (RiskLevel.HIGH, "Active", None): ("Isolated", "Isolated", False),
    (RiskLevel.HIGH, "PendingIsolation", None): ("Isolated", "Isolated", False),
    (RiskLevel.HIGH, "PendingIsolation", Verdict.APPROVE): ("Isolated", "Isolated", False),
    (RiskLevel.HIGH, "PendingIsolation", Verdict.DENY): ("Isolated", "Isolated", False),
    (RiskLevel.HIGH, "Isolated", None): ("Isolated", "Isolated", False),
}


def _prepare(start):
    twin, m = setup("e1")
    if start == "PendingIsolation":
        m.mitigate(alert("XSS"))
    elif start == "Isolated":
        m.mitigate(alert("Backdoor"))
    assert twin.status("e1").value == start
    return twin, m


@pytest.mark.parametrize("key", sorted(EXPECTED, key=str))
def test_state_machine_paths(key):
    tier, start, verdict = key
    after_alert, after_verdict, opens = EXPECTED[key]
    twin, m = _prepare(start)
    n_before = len(m.approvals)
    acts = m.mitigate(alert(TIER_CLASS[tier]))
    assert acts[0].kind is ActionKind.BLOCK_FLOW and acts[1].kind is ActionKind.SUSPEND_IP
    assert twin.status("e1").value == after_alert
    assert (len(m.approvals) > n_before) == opens
    if verdict is not None:
        (req,) = m.approvals.pending()
        m.resolve_approval(req.request_id, verdict)
    assert twin.status("e1").value == after_verdict
    events = twin.event_log()
    assert audit_isolations(events) == []
    assert independent_safety_check(events)


def test_every_reachable_combination_is_declared():
    for tier, start in itertools.product(RiskLevel, ["Active", "PendingIsolation", "Isolated"]):
        twin, m = _prepare(start)
        m.mitigate(alert(TIER_CLASS[tier]))
        verdicts = [None] + ([Verdict.APPROVE, Verdict.DENY] if m.approvals.pending() else [])
        for v in verdicts:
            assert (tier, start, v) in EXPECTED


def test_audit_flags_forged_isolation():
    forged = [
        TwinEvent(1, "e1", EventKind.MITIGATION_APPLIED,
                  {"action": "IsolateNode", "risk": "MidHigh", "new_status": "Isolated", "old_status": "Active"}, 0.0),
    ]
    assert audit_isolations(forged)
    assert not independent_safety_check(forged)


ALERTS = st.lists(
    st.tuples(
        st.sampled_from(["e1", "e2"]),
        st.sampled_from(list(TIER_CLASS.values()) + ["Wormhole"]),
        st.floats(0, 1),
        st.sampled_from(["1.1.1.1", "2.2.2.2", "3.3.3.3", "4.4.4.4"]),
        st.sampled_from([None, Verdict.APPROVE, Verdict.DENY]),
    ),
    max_size=40,
)


@settings(max_examples=150, deadline=None)
@given(ALERTS)
def test_random_sequences_stay_safe_and_live(seq):
    twin, m = setup("e1", "e2")
    for node, cls, conf, ip, verdict in seq:
        acts = m.mitigate(alert(cls, node=node, ip=ip, conf=conf))
        kinds = [a.kind for a in acts]
        assert kinds[:2] == [ActionKind.BLOCK_FLOW, ActionKind.SUSPEND_IP]
        pending = m.approvals.pending()
        if verdict is not None and pending:
            m.resolve_approval(pending[0].request_id, verdict)
    events = twin.event_log()
    assert audit_isolations(events) == []
    assert independent_safety_check(events)
    assert len(m.suspended) == len({ip for _, _, _, ip, _ in seq})
