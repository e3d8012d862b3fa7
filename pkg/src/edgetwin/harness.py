"""Replay engine and experiment runner.

A replay streams labeled flows through the full detection path for each
record: twin sync, classification, alert and mitigation, reliability
observation.  Retraining runs in a background worker while detection keeps
serving the old pair; the swap is applied a fixed number of records after the
trigger so that runs are reproducible regardless of machine speed.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .classifiers import ConfusionCounts, TrainedModel, save_model
from .flow_model import (
    NORMAL,
    BaselineDataset,
    FeatureProjection,
    FeatureSchema,
    FlowRecord,
    load_dataset,
    load_schema,
    round_half_up,
    sample_baseline,
    shared_projection,
)
from .mitigation import Alert, ApprovalRegistry, Mitigator, RiskPolicy, SuspendedIpList
from .online_selection import (
    Detector,
    ProductionPair,
    SelectionConfig,
    SelectionReport,
    SelectionScheduler,
    select_on_labeled,
)
from .reliability import ReliabilityMonitor, ReliabilityState, ThresholdConfig
from .synthetic import SyntheticSource
from .twin_graph import EventKind, TwinGraph

logger = logging.getLogger(__name__)


class HarnessError(Exception):
    pass


class DataShortfall(HarnessError):
    pass


class ProfileMismatch(HarnessError):
    pass


# -- topology ---------------------------------------------------------------------


@dataclass(frozen=True)
class Topology:
    devices: int = 12
    nodes: int = 2

    def __post_init__(self):
        if self.devices < 1 or self.nodes < 1:
            raise ValueError("topology needs at least one device and one node")

    @property
    def node_ids(self) -> List[str]:
        return [f"edge-{i + 1}" for i in range(self.nodes)]

    def node_of(self, device: int) -> str:
        return self.node_ids[device % self.nodes]

    def device_ip(self, device: int) -> str:
        return f"10.0.{device % self.nodes}.{device + 1}"


# -- data sources -----------------------------------------------------------------


class CsvSource:
    """Labeled records of one dataset file, drawn without replacement."""

    def __init__(self, path: Union[str, Path], schema: FeatureSchema):
        self.path = str(path)
        self.schema = schema
        self._by_label: Dict[str, List[FlowRecord]] = defaultdict(list)
        for rec in load_dataset(path, schema, drop_unknown_labels=True):
            self._by_label[rec.label].append(rec)
        self._used: Dict[str, set] = defaultdict(set)

    @property
    def attack_classes(self) -> List[str]:
        return [c for c in self.schema.attack_classes if self._by_label.get(c)]

    def available(self, label: str) -> int:
        return len(self._by_label.get(label, ())) - len(self._used[label])

    def draw(self, label: str, n: int, rng: np.random.Generator) -> List[FlowRecord]:
        pool = self._by_label.get(label, [])
        free = [i for i in range(len(pool)) if i not in self._used[label]]
        if len(free) < n:
            raise DataShortfall(f"{self.path}: need {n} {label!r} records, {len(free)} left")
        picked = [free[i] for i in rng.choice(len(free), n, replace=False)]
        self._used[label].update(picked)
        return [pool[i] for i in picked]


def open_source(ref: str, profile: str, base_dir: Path):
    kind, _, arg = ref.partition(":")
    if kind == "synthetic":
        if profile != "synthetic-v1":
            raise ProfileMismatch(f"synthetic sources use the synthetic-v1 profile, not {profile!r}")
        return SyntheticSource.named(arg)
    if kind == "csv":
        expanded = os.path.expandvars(arg)
        if "$" in expanded:
            raise HarnessError(f"data source {ref!r} names an environment variable that is not set")
        path = Path(expanded)
        if not path.is_absolute():
            path = base_dir / path
        return CsvSource(path, load_schema(profile))
    raise HarnessError(f"unknown data source {ref!r}")


# -- experiment spec -----------------------------------------------------------------


@dataclass
class Phase:
    source: str
    attacks: List[Tuple[str, int]]
    attack_fraction: float = 1 / 3
    profile: Optional[str] = None
    normal: Optional[int] = None


@dataclass
class ExperimentSpec:
    name: str
    seed: int
    profile: str
    train_source: str
    phases: List[Phase]
    train_size: int = 2000
    train_attack_ratio: float = 0.5
    baseline_sources: List[str] = field(default_factory=lambda: ["train"])
    shared_features: Optional[List[Tuple[str, str]]] = None
    train_profile: Optional[str] = None
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    topology: Topology = field(default_factory=Topology)
    swap_delay: int = 50
    policy: Optional[str] = None
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d: Dict[str, Any], base_dir: Union[str, Path] = ".") -> "ExperimentSpec":
        phases = [
            Phase(
                p["source"],
                [(c, int(n)) for c, n in p["attacks"]],
                float(p.get("attack_fraction", 1 / 3)),
                p.get("profile"),
                p.get("normal"),
            )
            for p in d["phases"]
        ]
        seed = int(d.get("seed", 0))
        sel = dict(d.get("selection", {}))
        sel.setdefault("seed", seed)
        train = d["train"]
        return cls(
            name=d["name"],
            seed=seed,
            profile=d.get("profile", "synthetic-v1"),
            train_source=train["source"],
            train_profile=train.get("profile"),
            train_size=int(train.get("size", 2000)),
            train_attack_ratio=float(train.get("attack_ratio", 0.5)),
            phases=phases,
            baseline_sources=list(d.get("baseline", {}).get("sources", ["train"])),
            shared_features=[tuple(p) for p in d["shared_features"]] if d.get("shared_features") else None,
            selection=SelectionConfig(**sel),
            threshold=ThresholdConfig(**d.get("threshold", {})),
            topology=Topology(**d.get("topology", {})),
            swap_delay=int(d.get("swap_delay", 50)),
            policy=d.get("policy"),
            base_dir=Path(base_dir),
        )

    @classmethod
    def load(cls, path: Union[str, Path], **overrides) -> "ExperimentSpec":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if overrides.get("seed") is not None:
            doc["seed"] = overrides["seed"]
            doc.setdefault("selection", {})["seed"] = overrides["seed"]
        if overrides.get("workers") is not None:
            doc.setdefault("selection", {})["workers"] = overrides["workers"]
        if overrides.get("clock") is not None:
            doc.setdefault("selection", {})["clock"] = overrides["clock"]
        return cls.from_dict(doc, path.parent)


def bundled_spec(name: str) -> Path:
    from importlib import resources

    res = resources.files("edgetwin") / "specs" / f"{name}.json"
    if not res.is_file():
        raise HarnessError(f"no bundled experiment spec {name!r}")
    return Path(str(res))


# -- report -------------------------------------------------------------------------------


def compute_sensitivity(per_class: Dict[str, ConfusionCounts]) -> Dict[str, float]:
    """100 * tp / (tp + fn) per class; classes with no attack records are omitted."""
    out = {}
    for cls, c in per_class.items():
        if c.tp + c.fn:
            out[cls] = 100.0 * c.tp / (c.tp + c.fn)
    return out


@dataclass
class ExperimentReport:
    name: str
    seed: int
    records: int
    normal_count: int
    overall: ConfusionCounts
    per_class: Dict[str, ConfusionCounts]
    per_version: Dict[int, Dict[str, ConfusionCounts]]
    retrain_events: int
    selections: List[Dict[str, Any]]
    event_kinds: List[str]
    runtime_s: float
    initial: Dict[str, Any] = field(default_factory=dict)

    @property
    def sensitivity(self) -> Dict[str, float]:
        return compute_sensitivity(self.per_class)

    def version_sensitivity(self, version: int) -> Dict[str, float]:
        return compute_sensitivity(self.per_version.get(version, {}))

    @property
    def final_version(self) -> int:
        return max(self.per_version) if self.per_version else 1

    def counts_view(self) -> Dict[str, Any]:
        """Everything that must repeat exactly for a fixed seed."""
        return {
            "records": self.records,
            "normal_count": self.normal_count,
            "overall": self.overall.as_dict(),
            "per_class": {k: v.as_dict() for k, v in sorted(self.per_class.items())},
            "per_version": {
                str(ver): {k: v.as_dict() for k, v in sorted(d.items())} for ver, d in sorted(self.per_version.items())
            },
            "retrain_events": self.retrain_events,
            "winners": [(s["classifier"], s["fs_method"], s["features"]) for s in self.selections],
            "initial": self.initial,
        }

    def to_dict(self) -> Dict[str, Any]:
        d = {"name": self.name, "seed": self.seed}
        d.update(self.counts_view())
        d["sensitivity"] = self.sensitivity
        d["selections"] = self.selections
        d["event_kind_counts"] = {k: self.event_kinds.count(k) for k in sorted(set(self.event_kinds))}
        d["runtime_s"] = self.runtime_s
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentReport":
        return cls(
            name=d["name"],
            seed=d["seed"],
            records=d["records"],
            normal_count=d["normal_count"],
            overall=ConfusionCounts(**d["overall"]),
            per_class={k: ConfusionCounts(**v) for k, v in d["per_class"].items()},
            per_version={int(ver): {k: ConfusionCounts(**v) for k, v in m.items()} for ver, m in d["per_version"].items()},
            retrain_events=d["retrain_events"],
            selections=d["selections"],
            event_kinds=[k for k, n in d.get("event_kind_counts", {}).items() for _ in range(n)],
            runtime_s=d["runtime_s"],
            initial=d.get("initial", {}),
        )

    def render(self) -> str:
        lines = [f"Experiment {self.name} (seed {self.seed})", ""]
        lines.append(f"{'Attack class':<18}{'TP':>8}{'FN':>8}{'Sensitivity %':>16}")
        lines.append("-" * 50)
        sens = self.sensitivity
        for cls in sorted(self.per_class):
            c = self.per_class[cls]
            if cls in sens:
                lines.append(f"{cls:<18}{c.tp:>8}{c.fn:>8}{sens[cls]:>16.2f}")
        o = self.overall
        lines += [
            "-" * 50,
            f"records {self.records}  normal {self.normal_count}  "
            f"tp {o.tp}  fn {o.fn}  fp {o.fp}  tn {o.tn}",
            f"retraining events {self.retrain_events}  model swaps {len(self.selections)}  "
            f"runtime {self.runtime_s:.1f}s",
        ]
        for s in self.selections:
            lines.append(
                f"  swap at record {s['swap_index']} (triggered at {s['trigger_index']}): "
                f"{s['classifier']} + {s['fs_method']} on {s['features']}"
            )
        return "\n".join(lines)


# -- pipeline -------------------------------------------------------------------------------


@dataclass
class StreamItem:
    record: FlowRecord
    truth: str


class Pipeline:
    """One detection system instance: twin graph, detector, monitor, mitigation."""

    def __init__(
        self,
        model: TrainedModel,
        baseline: BaselineDataset,
        *,
        topology: Topology = Topology(),
        selection: SelectionConfig = SelectionConfig(),
        threshold: ThresholdConfig = ThresholdConfig(),
        policy: RiskPolicy = RiskPolicy(),
        swap_delay: int = 50,
        out_dir: Optional[Union[str, Path]] = None,
        fs_method=None,
    ):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        journal = suspended = approvals = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "selections").mkdir(exist_ok=True)
            journal = self.out_dir / "journal.jsonl"
            suspended = self.out_dir / "suspended_ips.txt"
            approvals = self.out_dir / "approvals.json"
            for p in (journal, suspended, approvals):
                if p.exists():
                    p.unlink()
        self.twin = TwinGraph(journal)
        for node in topology.node_ids:
            self.twin.register(node)
        self.detector = Detector(ProductionPair(model, fs_method), self.twin)
        self.mitigator = Mitigator(self.twin, policy, SuspendedIpList(suspended), ApprovalRegistry(approvals))
        self.scheduler = SelectionScheduler(baseline, selection)
        self.monitor = ReliabilityMonitor(threshold, self.twin, self._on_trigger)
        self.swap_delay = swap_delay
        self.batch_size = selection.batch_size
        self._recent: Deque[FlowRecord] = deque(maxlen=selection.batch_size)
        self._swap_at: Optional[int] = None
        self._trigger_at: Optional[int] = None
        self._index = -1
        self._alerts = 0
        self.selections: List[Dict[str, Any]] = []
        self.outcomes: List[Tuple[str, bool, int]] = []

    def _on_trigger(self, state: ReliabilityState) -> bool:
        if len(self._recent) < self.batch_size:
            logger.warning("retraining requested with only %d buffered records", len(self._recent))
            return False
        if self.scheduler.request(list(self._recent)) is None:
            return False
        self._trigger_at = self._index
        self._swap_at = self._index + self.swap_delay
        return True

    def process(self, record: FlowRecord, truth: Optional[str] = None) -> Tuple[int, bool]:
        """Run one record through the detection path; returns (model version, attack verdict)."""
        self._index += 1
        ts = record.timestamp
        node = record.node_id
        self.twin.sync_update(node, record, ts)
        version, pred = self.detector.classify(record)
        if pred.is_attack:
            self._alerts += 1
            alert = Alert(self._alerts, f"flow-{ts}", record.src_ip, node, pred.attack_class, pred.confidence, ts)
            self.twin.raise_alert(
                node,
                {
                    "alert_id": alert.alert_id,
                    "attack_class": pred.attack_class,
                    "confidence": pred.confidence,
                    "src_ip": record.src_ip,
                    "record_timestamp": ts,
                    "model_version": version,
                },
                ts,
            )
            self.mitigator.mitigate(alert)
        self._recent.append(record)
        estimated = truth if truth is not None else record.label
        if estimated is not None:
            self.monitor.record(pred.is_attack, estimated != NORMAL, ts)
            self.outcomes.append((estimated, pred.is_attack, version))
        if self._swap_at is not None and self._index >= self._swap_at:
            self._apply_swap(ts)
        return version, pred.is_attack

    def _apply_swap(self, ts) -> None:
        report = self.scheduler.collect()
        self._swap_at = None
        ack = self.detector.swap_model(ProductionPair(report.model, report.fs_method), ts, report.trigger)
        entry = {
            "trigger_index": self._trigger_at,
            "swap_index": self._index,
            "version": ack.version,
            "classifier": report.classifier.value,
            "fs_method": report.fs_method.value,
            "features": list(report.features),
            "classifier_scores": [s.to_dict() for s in report.classifier_scores],
            "fs_scores": [s.to_dict() for s in report.fs_scores],
        }
        self.selections.append(entry)
        if self.out_dir is not None:
            report.save(self.out_dir / "selections" / f"selection-{len(self.selections):03d}.json")

    def finish(self) -> None:
        if self._swap_at is not None:
            # run still in flight at end of stream: apply it so its result is recorded
            self._apply_swap(self._index)
        self.scheduler.shutdown()
        self.twin.close()


# -- experiment assembly ----------------------------------------------------------------------


class _Workspace:
    """Resolves sources and projects every record onto the working schema."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        train_profile = spec.train_profile or spec.profile
        profiles = {train_profile} | {p.profile or spec.profile for p in spec.phases}
        self.schemas = {name: load_schema(name) for name in profiles}
        self.projections: Dict[str, Optional[FeatureProjection]] = {}
        if len(profiles) == 1:
            self.schema = self.schemas[train_profile]
            self.projections[train_profile] = None
        else:
            if len(profiles) > 2 or not spec.shared_features:
                raise ProfileMismatch(
                    f"profiles {sorted(profiles)} differ; declare shared_features for cross-profile runs"
                )
            (other,) = profiles - {train_profile}
            self.schema, p_train, p_test = shared_projection(
                self.schemas[train_profile], self.schemas[other], spec.shared_features
            )
            self.projections = {train_profile: p_train, other: p_test}
        self.train_profile = train_profile
        self._sources: Dict[Tuple[str, str], Any] = {}

    def source(self, ref: str, profile: str):
        key = (ref, profile)
        if key not in self._sources:
            self._sources[key] = open_source(ref, profile, self.spec.base_dir)
        return self._sources[key]

    def draw(self, ref: str, profile: str, label: str, n: int, rng) -> List[FlowRecord]:
        recs = self.source(ref, profile).draw(label, n, rng)
        proj = self.projections.get(profile)
        return [proj.apply(r) for r in recs] if proj is not None else recs

    def labeled_mix(self, ref: str, profile: str, n: int, attack_ratio: float, rng) -> List[FlowRecord]:
        src = self.source(ref, profile)
        classes = src.attack_classes
        n_attack = round_half_up(n * attack_ratio)
        per = [n_attack // len(classes) + (i < n_attack % len(classes)) for i in range(len(classes))]
        out = self.draw(ref, profile, NORMAL, n - n_attack, rng)
        for cls, k in zip(classes, per):
            out += self.draw(ref, profile, cls, k, rng)
        return [out[i] for i in rng.permutation(len(out))]


def _place(records: List[FlowRecord], topology: Topology, rng, start: int) -> List[FlowRecord]:
    out = []
    devices = rng.integers(0, topology.devices, len(records))
    for i, (rec, dev) in enumerate(zip(records, devices)):
        ip = rec.src_ip if rec.src_ip not in ("", "0.0.0.0") else topology.device_ip(int(dev))
        out.append(FlowRecord(rec.values, rec.schema_id, ip, topology.node_of(int(dev)), start + i, rec.label))
    return out


def build_stream(spec: ExperimentSpec, ws: _Workspace, rng) -> List[FlowRecord]:
    stream: List[FlowRecord] = []
    for phase in spec.phases:
        profile = phase.profile or spec.profile
        attacks: List[FlowRecord] = []
        for cls, n in phase.attacks:
            attacks += ws.draw(phase.source, profile, cls, n, rng)
        n_attack = len(attacks)
        if phase.normal is not None:
            n_normal = phase.normal
        else:
            n_normal = round_half_up(n_attack / phase.attack_fraction) - n_attack if phase.attack_fraction > 0 else 0
        total = n_attack + n_normal
        normals = ws.draw(phase.source, profile, NORMAL, n_normal, rng)
        slots = np.zeros(total, dtype=bool)
        slots[rng.choice(total, n_attack, replace=False)] = True
        a = iter(attacks)
        nrm = iter(normals)
        merged = [next(a) if is_attack else next(nrm) for is_attack in slots]
        stream += _place(merged, spec.topology, rng, len(stream))
    return stream


def prepare(spec: ExperimentSpec, out_dir: Optional[Path] = None):
    """Train the initial production pair; returns (workspace, stream, baseline, report)."""
    rng = np.random.default_rng(spec.seed)
    ws = _Workspace(spec)
    train = ws.labeled_mix(spec.train_source, ws.train_profile, spec.train_size, spec.train_attack_ratio, rng)
    cfg = spec.selection
    pool: List[FlowRecord] = []
    for ref in spec.baseline_sources:
        if ref == "train":
            pool += train
        else:
            size = cfg.baseline_size
            pool += ws.labeled_mix(ref, spec.profile, size, cfg.baseline_attack_ratio, rng)
    baseline = sample_baseline(pool, cfg.baseline_size, cfg.baseline_attack_ratio, spec.seed)
    # the training mix is already shuffled; its first batch plays the role of the
    # unlabeled batch that feeds feature selection during online runs
    fs_input = train[: cfg.batch_size]
    initial = select_on_labeled(train, fs_input, cfg, trigger="initial")
    stream = build_stream(spec, ws, rng)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "selections").mkdir(exist_ok=True)
        initial.save(out_dir / "selections" / "selection-000.json")
        save_model(initial.model, out_dir / "model-initial.json")
    return ws, stream, baseline, initial


def replay(spec: ExperimentSpec, out_dir: Optional[Union[str, Path]] = None) -> ExperimentReport:
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    ws, stream, baseline, initial = prepare(spec, out)
    policy = RiskPolicy.from_file(spec.base_dir / spec.policy) if spec.policy else RiskPolicy()
    pipe = Pipeline(
        initial.model,
        baseline,
        topology=spec.topology,
        selection=spec.selection,
        threshold=spec.threshold,
        policy=policy,
        swap_delay=spec.swap_delay,
        out_dir=out,
        fs_method=initial.fs_method,
    )
    try:
        for rec in stream:
            pipe.process(rec, rec.label)
    finally:
        pipe.finish()

    per_class: Dict[str, ConfusionCounts] = {}
    per_version: Dict[int, Dict[str, ConfusionCounts]] = defaultdict(dict)
    overall = ConfusionCounts()
    normal = 0
    for truth, flagged, version in pipe.outcomes:
        is_attack = truth != NORMAL
        normal += not is_attack
        c = ConfusionCounts.from_arrays([is_attack], [flagged])
        overall = overall + c
        if is_attack:
            per_class[truth] = per_class.get(truth, ConfusionCounts()) + c
            per_version[version][truth] = per_version[version].get(truth, ConfusionCounts()) + c
    events = pipe.twin.event_log()
    report = ExperimentReport(
        name=spec.name,
        seed=spec.seed,
        records=len(stream),
        normal_count=normal,
        overall=overall,
        per_class=per_class,
        per_version=dict(per_version),
        retrain_events=sum(e.kind is EventKind.RETRAIN_TRIGGERED for e in events),
        selections=pipe.selections,
        event_kinds=[e.kind.value for e in events],
        runtime_s=time.perf_counter() - started,
        initial={
            "classifier": initial.classifier.value,
            "fs_method": initial.fs_method.value,
            "features": list(initial.features),
        },
    )
    report.pipeline = pipe  # handy for callers that inspect the run afterwards
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
        (out / "report.txt").write_text(report.render() + "\n", encoding="utf-8")
        save_model(pipe.detector.pair.model, out / "model-final.json")
    return report
