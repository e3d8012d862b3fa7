"""In-process twin store for edge nodes, backed by an append-only event journal.

Every state change of a twin is an event; the twin's state is the fold of its
events.  The same fold is used live and when rebuilding a graph from a journal
file, so a persisted run can be resumed by another process (the CLI's
approve/deny commands rely on this).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Deque, Dict, FrozenSet, List, Optional, Set, Union

from .flow_model import FlowRecord

logger = logging.getLogger(__name__)


class TwinStatus(str, Enum):
    ACTIVE = "Active"
    PENDING_ISOLATION = "PendingIsolation"
    ISOLATED = "Isolated"


class EventKind(str, Enum):
    TELEMETRY = "Telemetry"
    ALERT_RAISED = "AlertRaised"
    MITIGATION_APPLIED = "MitigationApplied"
    MODEL_SWAPPED = "ModelSwapped"
    RETRAIN_TRIGGERED = "RetrainTriggered"
    RELIABILITY_CHECKED = "ReliabilityChecked"


LEGAL_TRANSITIONS = {
    (TwinStatus.ACTIVE, TwinStatus.PENDING_ISOLATION),
    (TwinStatus.ACTIVE, TwinStatus.ISOLATED),
    (TwinStatus.PENDING_ISOLATION, TwinStatus.ACTIVE),
    (TwinStatus.PENDING_ISOLATION, TwinStatus.ISOLATED),
}


class TwinError(Exception):
    pass


class UnknownNode(TwinError):
    pass


class IllegalTransition(TwinError):
    def __init__(self, node_id: str, old: TwinStatus, new: TwinStatus):
        super().__init__(f"{node_id}: illegal transition {old.value} -> {new.value}")
        self.node_id = node_id
        self.old = old
        self.new = new


@dataclass(frozen=True)
class TwinEvent:
    seq: int
    node_id: Optional[str]
    kind: EventKind
    payload: Dict[str, Any]
    timestamp: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "node_id": self.node_id,
                "kind": self.kind.value,
                "payload": self.payload,
                "timestamp": self.timestamp,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "TwinEvent":
        d = json.loads(line)
        return cls(d["seq"], d["node_id"], EventKind(d["kind"]), d["payload"], d["timestamp"])


@dataclass
class TelemetrySummary:
    window: int = 1000
    record_count: int = 0
    last_timestamp: Optional[float] = None
    flagged_count: int = 0
    # one entry per record in the window: the alert class raised for it, if any
    recent: Deque[Optional[str]] = field(default_factory=deque)
    alert_counts: Counter = field(default_factory=Counter)

    def push(self, entry: Optional[str]) -> None:
        self.recent.append(entry)
        if entry is not None:
            self.alert_counts[entry] += 1
        while len(self.recent) > self.window:
            old = self.recent.popleft()
            if old is not None:
                self.alert_counts[old] -= 1
                if not self.alert_counts[old]:
                    del self.alert_counts[old]

    def mark_alert(self, attack_class: str) -> None:
        if self.recent and self.recent[-1] is None:
            self.recent[-1] = attack_class
            self.alert_counts[attack_class] += 1
        else:
            self.push(attack_class)


@dataclass
class TwinNode:
    node_id: str
    status: TwinStatus = TwinStatus.ACTIVE
    version: int = 1
    telemetry: TelemetrySummary = field(default_factory=TelemetrySummary)
    suspended_ips: Set[str] = field(default_factory=set)

    def view(self) -> "TwinView":
        t = self.telemetry
        return TwinView(
            self.node_id,
            self.status,
            self.version,
            t.record_count,
            t.last_timestamp,
            t.flagged_count,
            dict(t.alert_counts),
            frozenset(self.suspended_ips),
        )


@dataclass(frozen=True)
class TwinView:
    """Immutable snapshot handed to readers."""

    node_id: str
    status: TwinStatus
    version: int
    record_count: int
    last_timestamp: Optional[float]
    flagged_count: int
    alert_counts: Dict[str, int]
    suspended_ips: FrozenSet[str]


def apply_event(node: TwinNode, event: TwinEvent) -> None:
    """Fold one node event into the twin; shared by live updates and journal replay."""
    p = event.payload
    if event.kind is EventKind.TELEMETRY:
        node.telemetry.record_count += 1
        node.telemetry.last_timestamp = p.get("record_timestamp")
        if p.get("flagged"):
            node.telemetry.flagged_count += 1
        node.telemetry.push(None)
    elif event.kind is EventKind.ALERT_RAISED:
        node.telemetry.mark_alert(p["attack_class"])
    elif event.kind is EventKind.MITIGATION_APPLIED:
        if "new_status" in p:
            node.status = TwinStatus(p["new_status"])
        if p.get("action") == "SuspendIp" and p.get("ip"):
            node.suspended_ips.add(p["ip"])
    node.version += 1


class TwinGraph:
    """Digital replicas of the edge layer.

    One writer per node is expected; updates for different nodes may run on
    different threads.  Sequence numbers are assigned under a global lock at
    append time, so the journal is totally ordered.
    """

    def __init__(self, journal_path: Optional[Union[str, Path]] = None, window: int = 1000):
        self.window = window
        self._nodes: Dict[str, TwinNode] = {}
        self._node_locks: Dict[str, threading.Lock] = {}
        self._log: List[TwinEvent] = []
        self._log_lock = threading.Lock()
        self._journal = None
        if journal_path is not None:
            self._journal = open(journal_path, "a", encoding="utf-8")

    # -- registration and reads -------------------------------------------------

    def register(self, node_id: str) -> TwinView:
        if node_id not in self._nodes:
            self._nodes[node_id] = TwinNode(node_id, telemetry=TelemetrySummary(window=self.window))
            self._node_locks[node_id] = threading.Lock()
        return self.node(node_id)

    @property
    def node_ids(self) -> List[str]:
        return sorted(self._nodes)

    def node(self, node_id: str) -> TwinView:
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        with self._node_locks[node_id]:
            return self._nodes[node_id].view()

    def status(self, node_id: str) -> TwinStatus:
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        return self._nodes[node_id].status

    def event_log(self, kind: Optional[EventKind] = None, node_id: Optional[str] = None) -> List[TwinEvent]:
        with self._log_lock:
            events = list(self._log)
        if kind is not None:
            events = [e for e in events if e.kind is EventKind(kind)]
        if node_id is not None:
            events = [e for e in events if e.node_id == node_id]
        return events

    def __len__(self) -> int:
        return len(self._log)

    # -- writes -------------------------------------------------------------------

    def _append(self, node_id: Optional[str], kind: EventKind, payload: Dict[str, Any], timestamp: Optional[float]) -> TwinEvent:
        with self._log_lock:
            event = TwinEvent(len(self._log) + 1, node_id, kind, payload, time.time() if timestamp is None else timestamp)
            self._log.append(event)
            if self._journal is not None:
                self._journal.write(event.to_json() + "\n")
                self._journal.flush()
        return event

    def _node_event(self, node_id: str, kind: EventKind, payload: Dict[str, Any], timestamp: Optional[float]) -> TwinView:
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        with self._node_locks[node_id]:
            node = self._nodes[node_id]
            event = self._append(node_id, kind, payload, timestamp)
            apply_event(node, event)
            return node.view()

    def sync_update(self, node_id: str, record: FlowRecord, timestamp: Optional[float] = None) -> TwinView:
        """Mirror one telemetry record into the node's twin.

        Records arriving for an isolated node are still journaled, with
        ``flagged`` set, so the forensic trail stays complete.
        """
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        flagged = self._nodes[node_id].status is TwinStatus.ISOLATED
        if flagged:
            logger.debug("telemetry for isolated node %s at t=%s", node_id, record.timestamp)
        payload = {"record_timestamp": record.timestamp, "src_ip": record.src_ip, "flagged": flagged}
        return self._node_event(node_id, EventKind.TELEMETRY, payload, timestamp if timestamp is not None else record.timestamp)

    def raise_alert(self, node_id: str, payload: Dict[str, Any], timestamp: Optional[float] = None) -> TwinView:
        if "attack_class" not in payload:
            raise ValueError("alert payload needs an attack_class")
        return self._node_event(node_id, EventKind.ALERT_RAISED, dict(payload), timestamp)

    def apply_status(
        self,
        node_id: str,
        new_status: TwinStatus,
        detail: Optional[Dict[str, Any]] = None,
        timestamp: Optional[float] = None,
    ) -> TwinView:
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        new_status = TwinStatus(new_status)
        old = self._nodes[node_id].status
        if (old, new_status) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(node_id, old, new_status)
        payload = dict(detail or {})
        payload.update(old_status=old.value, new_status=new_status.value)
        return self._node_event(node_id, EventKind.MITIGATION_APPLIED, payload, timestamp)

    def record_mitigation(self, node_id: str, detail: Dict[str, Any], timestamp: Optional[float] = None) -> TwinView:
        """Journal a mitigation that does not change the node's status."""
        if "new_status" in detail:
            raise ValueError("status changes go through apply_status")
        return self._node_event(node_id, EventKind.MITIGATION_APPLIED, dict(detail), timestamp)

    def emit(self, kind: EventKind, payload: Dict[str, Any], timestamp: Optional[float] = None) -> TwinEvent:
        """Journal a graph-wide event (model swaps, retraining, reliability checks)."""
        return self._append(None, EventKind(kind), dict(payload), timestamp)

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    # -- persistence ----------------------------------------------------------------

    @classmethod
    def from_journal(
        cls,
        path: Union[str, Path],
        nodes: Optional[List[str]] = None,
        window: int = 1000,
        reopen: bool = True,
    ) -> "TwinGraph":
        """Rebuild a graph by folding a journal file; optionally keep appending to it."""
        events = read_journal(path)
        graph = cls(window=window)
        for node_id in nodes or []:
            graph.register(node_id)
        for event in events:
            if event.node_id is not None:
                graph.register(event.node_id)
                apply_event(graph._nodes[event.node_id], event)
            graph._log.append(event)
        if reopen:
            graph._journal = open(path, "a", encoding="utf-8")
        return graph


def read_journal(path: Union[str, Path]) -> List[TwinEvent]:
    with open(path, encoding="utf-8") as fh:
        return [TwinEvent.from_json(line) for line in fh if line.strip()]
