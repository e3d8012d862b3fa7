"""Risk-tiered response to detected attacks.

Every alert blocks the offending flow and suspends its source address.  High
risk alerts isolate the edge node at once; mid-high risk alerts put the node
into PendingIsolation and open an approval request that an administrator
resolves later.  All effects land on the twin graph and its journal.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Union

from .twin_graph import EventKind, TwinEvent, TwinGraph, TwinStatus

logger = logging.getLogger(__name__)


class RiskLevel(str, Enum):
    STANDARD = "Standard"
    MID_HIGH = "MidHigh"
    HIGH = "High"


_TIER_ORDER = [RiskLevel.STANDARD, RiskLevel.MID_HIGH, RiskLevel.HIGH]


class ActionKind(str, Enum):
    BLOCK_FLOW = "BlockFlow"
    SUSPEND_IP = "SuspendIp"
    ISOLATE_NODE = "IsolateNode"
    REQUEST_APPROVAL = "RequestApproval"


class ActionStatus(str, Enum):
    APPLIED = "Applied"
    PENDING = "Pending"
    DENIED = "Denied"


class Verdict(str, Enum):
    APPROVE = "Approve"
    DENY = "Deny"


class MitigationError(Exception):
    pass


class UnknownRequest(MitigationError):
    pass


class AlreadyResolved(MitigationError):
    pass


DEFAULT_RISK_MAP: Dict[str, RiskLevel] = {
    **{c: RiskLevel.HIGH for c in ("Ransomware", "Backdoor", "MITM", "SQL Injection", "Injection")},
    **{c: RiskLevel.MID_HIGH for c in ("DDoS HTTP", "DDoS UDP", "DDoS", "Password", "XSS")},
    **{c: RiskLevel.STANDARD for c in ("Port Scanning", "Scanning", "Fingerprinting")},
}


@dataclass(frozen=True)
class RiskPolicy:
    tiers: Mapping[str, RiskLevel] = field(default_factory=lambda: dict(DEFAULT_RISK_MAP))
    promote_at: Optional[float] = 0.9  # None disables promotion

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RiskPolicy":
        """Read ``{"High": [...], "MidHigh": [...], "Standard": [...], "promote_at": 0.9}``.

        Classes not listed keep their default tier.
        """
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        tiers = dict(DEFAULT_RISK_MAP)
        for level in RiskLevel:
            for name in doc.get(level.value, []):
                tiers[name] = level
        promote = doc.get("promote_at", 0.9)
        return cls(tiers, None if promote is None else float(promote))


def classify_risk(attack: Optional[str], confidence: float, policy: RiskPolicy = RiskPolicy()) -> RiskLevel:
    """Base tier from the policy map, promoted one tier at high confidence."""
    if attack not in policy.tiers:
        logger.warning("attack class %r has no risk tier; treating as Standard", attack)
        return RiskLevel.STANDARD
    base = policy.tiers[attack]
    if policy.promote_at is not None and confidence >= policy.promote_at:
        return _TIER_ORDER[min(_TIER_ORDER.index(base) + 1, len(_TIER_ORDER) - 1)]
    return base


@dataclass(frozen=True)
class Alert:
    alert_id: int
    flow_id: str
    src_ip: str
    node_id: str
    attack_class: Optional[str]
    confidence: float
    timestamp: Optional[float] = None


@dataclass(frozen=True)
class MitigationAction:
    kind: ActionKind
    target: str
    risk: RiskLevel
    alert_id: Optional[int]
    status: ActionStatus
    request_id: Optional[int] = None
    noop: bool = False


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class SuspendedIpList:
    """Set of suspended source addresses with the time each was first suspended."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self._entries: Dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    ip, _, ts = line.partition(",")
                    self._entries[ip] = ts

    def add(self, ip: str) -> bool:
        """Suspend ``ip``; returns False if it was already suspended."""
        with self._lock:
            if ip in self._entries:
                return False
            ts = _now_iso()
            self._entries[ip] = ts
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(f"{ip},{ts}\n")
            return True

    def __contains__(self, ip: str) -> bool:
        return ip in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Dict[str, str]:
        return dict(self._entries)


@dataclass
class ApprovalRequest:
    request_id: int
    node_id: str
    alert_id: Optional[int]
    attack_class: Optional[str]
    risk: str
    status: str = ActionStatus.PENDING.value
    verdict: Optional[str] = None
    created: str = field(default_factory=_now_iso)


class ApprovalRegistry:
    """Pending isolation requests, optionally mirrored to a JSON file."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self._requests: Dict[int, ApprovalRequest] = {}
        self._lock = threading.RLock()
        if self.path is not None and self.path.exists():
            for d in json.loads(self.path.read_text(encoding="utf-8")):
                req = ApprovalRequest(**d)
                self._requests[req.request_id] = req

    def _save(self) -> None:
        if self.path is not None:
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text(json.dumps([asdict(r) for r in self._requests.values()], indent=1), encoding="utf-8")
            tmp.replace(self.path)

    def open_request(self, node_id: str, alert: Alert, risk: RiskLevel) -> ApprovalRequest:
        with self._lock:
            rid = max(self._requests, default=0) + 1
            req = ApprovalRequest(rid, node_id, alert.alert_id, alert.attack_class, risk.value)
            self._requests[rid] = req
            self._save()
            return req

    def pending_for(self, node_id: str) -> Optional[ApprovalRequest]:
        with self._lock:
            for req in self._requests.values():
                if req.node_id == node_id and req.status == ActionStatus.PENDING.value:
                    return req
        return None

    def get(self, request_id: int) -> ApprovalRequest:
        with self._lock:
            if request_id not in self._requests:
                raise UnknownRequest(f"no approval request {request_id}")
            return self._requests[request_id]

    def close(self, request_id: int, status: ActionStatus, verdict: Verdict) -> ApprovalRequest:
        with self._lock:
            req = self.get(request_id)
            if req.status != ActionStatus.PENDING.value:
                raise AlreadyResolved(f"approval request {request_id} is already {req.status}")
            req.status = status.value
            req.verdict = verdict.value
            self._save()
            return req

    def pending(self) -> List[ApprovalRequest]:
        with self._lock:
            return [r for r in self._requests.values() if r.status == ActionStatus.PENDING.value]

    def __len__(self) -> int:
        return len(self._requests)


class Mitigator:
    def __init__(
        self,
        twin: TwinGraph,
        policy: RiskPolicy = RiskPolicy(),
        suspended: Optional[SuspendedIpList] = None,
        approvals: Optional[ApprovalRegistry] = None,
    ):
        self.twin = twin
        self.policy = policy
        self.suspended = suspended if suspended is not None else SuspendedIpList()
        self.approvals = approvals if approvals is not None else ApprovalRegistry()
        self._node_locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, node_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._node_locks.setdefault(node_id, threading.Lock())

    def mitigate(self, alert: Alert) -> List[MitigationAction]:
        """Apply the response for one alert and return the actions taken.

        A mid-high alert on a node that is already isolated needs no approval
        and yields only the block and suspend actions.
        """
        risk = classify_risk(alert.attack_class, alert.confidence, self.policy)
        node, ts = alert.node_id, alert.timestamp
        base = {"alert_id": alert.alert_id, "risk": risk.value, "attack_class": alert.attack_class}
        actions: List[MitigationAction] = []
        with self._lock_for(node):
            self.twin.record_mitigation(node, {**base, "action": ActionKind.BLOCK_FLOW.value, "flow": alert.flow_id}, ts)
            actions.append(MitigationAction(ActionKind.BLOCK_FLOW, alert.flow_id, risk, alert.alert_id, ActionStatus.APPLIED))

            fresh = self.suspended.add(alert.src_ip)
            self.twin.record_mitigation(
                node, {**base, "action": ActionKind.SUSPEND_IP.value, "ip": alert.src_ip, "noop": not fresh}, ts
            )
            actions.append(
                MitigationAction(ActionKind.SUSPEND_IP, alert.src_ip, risk, alert.alert_id, ActionStatus.APPLIED, noop=not fresh)
            )

            status = self.twin.status(node)
            if risk is RiskLevel.HIGH:
                already = status is TwinStatus.ISOLATED
                if not already:
                    self.twin.apply_status(node, TwinStatus.ISOLATED, {**base, "action": ActionKind.ISOLATE_NODE.value}, ts)
                actions.append(
                    MitigationAction(ActionKind.ISOLATE_NODE, node, risk, alert.alert_id, ActionStatus.APPLIED, noop=already)
                )
            elif risk is RiskLevel.MID_HIGH and status is not TwinStatus.ISOLATED:
                existing = self.approvals.pending_for(node)
                if existing is None:
                    req = self.approvals.open_request(node, alert, risk)
                    self.twin.apply_status(
                        node,
                        TwinStatus.PENDING_ISOLATION,
                        {**base, "action": ActionKind.REQUEST_APPROVAL.value, "request_id": req.request_id},
                        ts,
                    )
                    actions.append(
                        MitigationAction(ActionKind.REQUEST_APPROVAL, node, risk, alert.alert_id, ActionStatus.PENDING, req.request_id)
                    )
                else:
                    actions.append(
                        MitigationAction(
                            ActionKind.REQUEST_APPROVAL, node, risk, alert.alert_id, ActionStatus.PENDING,
                            existing.request_id, noop=True,
                        )
                    )
        return actions

    def resolve_approval(self, request_id: int, verdict: Verdict, timestamp: Optional[float] = None) -> MitigationAction:
        verdict = Verdict(verdict)
        req = self.approvals.get(request_id)
        node = req.node_id
        risk = RiskLevel(req.risk)
        with self._lock_for(node):
            outcome = ActionStatus.APPLIED if verdict is Verdict.APPROVE else ActionStatus.DENIED
            req = self.approvals.close(request_id, outcome, verdict)
            detail = {
                "alert_id": req.alert_id,
                "risk": req.risk,
                "request_id": request_id,
                "verdict": verdict.value,
                "attack_class": req.attack_class,
            }
            status = self.twin.status(node)
            if verdict is Verdict.APPROVE:
                detail["action"] = ActionKind.ISOLATE_NODE.value
                if status is TwinStatus.PENDING_ISOLATION:
                    self.twin.apply_status(node, TwinStatus.ISOLATED, detail, timestamp)
                else:
                    # isolated meanwhile by a high-risk alert
                    self.twin.record_mitigation(node, {**detail, "noop": True}, timestamp)
                return MitigationAction(ActionKind.ISOLATE_NODE, node, risk, req.alert_id, ActionStatus.APPLIED, request_id)
            detail["action"] = ActionKind.REQUEST_APPROVAL.value
            if status is TwinStatus.PENDING_ISOLATION:
                self.twin.apply_status(node, TwinStatus.ACTIVE, detail, timestamp)
            else:
                self.twin.record_mitigation(node, {**detail, "noop": True}, timestamp)
            return MitigationAction(ActionKind.REQUEST_APPROVAL, node, risk, req.alert_id, ActionStatus.DENIED, request_id)


def audit_isolations(events: Iterable[TwinEvent]) -> List[str]:
    """Journal check: every isolation caused by a mid-high alert carries an approval.

    Returns human-readable violations; an empty list means the journal is clean.
    """
    opened: Dict[int, str] = {}
    problems: List[str] = []
    for e in events:
        if e.kind is not EventKind.MITIGATION_APPLIED:
            continue
        p = e.payload
        if p.get("action") == ActionKind.REQUEST_APPROVAL.value and "verdict" not in p:
            opened[p["request_id"]] = e.node_id
        if p.get("new_status") != TwinStatus.ISOLATED.value:
            continue
        if p.get("risk") == RiskLevel.MID_HIGH.value:
            rid = p.get("request_id")
            if p.get("verdict") != Verdict.APPROVE.value or opened.get(rid) != e.node_id:
                problems.append(f"seq {e.seq}: node {e.node_id} isolated for MidHigh risk without approval")
    return problems
