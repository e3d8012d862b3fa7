"""Normalized flow records: schema profiles, CSV ingestion and baseline sampling.

A profile is a JSON document declaring the feature columns a dataset exposes,
how each is encoded, and which attack classes the label column may carry.
Every record entering the pipeline goes through :func:`normalize_record`, so
downstream modules only ever see fixed-length numeric vectors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

NORMAL = "Normal"
OTHER_CODE = 0
OTHER_TOKEN = "__other__"

# Canonical attack-class spellings.
ATTACK_CLASSES = (
    "Backdoor",
    "DDoS HTTP",
    "DDoS UDP",
    "Fingerprinting",
    "MITM",
    "Password",
    "Port Scanning",
    "Ransomware",
    "SQL Injection",
    "XSS",
    "Scanning",
    "Injection",
    "DDoS",
)


class FlowModelError(Exception):
    """Base class for schema and ingestion failures."""


class UnknownProfile(FlowModelError):
    pass


class SchemaError(FlowModelError):
    pass


class MissingFeature(FlowModelError):
    def __init__(self, name: str):
        super().__init__(f"missing feature column: {name!r}")
        self.name = name


class UnparseableNumeric(FlowModelError):
    def __init__(self, name: str, raw: str):
        super().__init__(f"cannot parse numeric feature {name!r} from {raw!r}")
        self.name = name
        self.raw = raw


class UnknownLabel(FlowModelError):
    def __init__(self, raw: str):
        super().__init__(f"label {raw!r} is neither Normal nor a declared attack class")
        self.raw = raw


class DatasetError(FlowModelError):
    def __init__(self, path: str, row: int, cause: Exception):
        super().__init__(f"{path}: row {row}: {cause}")
        self.path = path
        self.row = row
        self.cause = cause


class InsufficientRecords(FlowModelError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "numeric" | "categorical"
    low: Optional[float] = None
    high: Optional[float] = None
    categories: Mapping[str, int] = field(default_factory=dict)

    @property
    def scaled(self) -> bool:
        return self.kind == "numeric" and self.low is not None and self.high is not None


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    features: Tuple[FeatureSpec, ...]
    attack_classes: Tuple[str, ...]
    label_column: str = "label"
    ip_column: Optional[str] = None
    node_column: Optional[str] = None
    timestamp_column: Optional[str] = None
    label_aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [f.name for f in self.features]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"{self.name}: duplicate feature names {dupes}")
        for spec in self.features:
            if spec.kind not in ("numeric", "categorical"):
                raise SchemaError(f"{self.name}: feature {spec.name!r} has unknown kind {spec.kind!r}")
            if spec.kind == "categorical":
                codes = list(spec.categories.values())
                if len(set(codes)) != len(codes):
                    raise SchemaError(f"{self.name}: categorical dictionary collision in {spec.name!r}")
                if OTHER_CODE in codes:
                    raise SchemaError(
                        f"{self.name}: code {OTHER_CODE} is reserved for unseen values ({spec.name!r})"
                    )
            if spec.scaled and not spec.high > spec.low:
                raise SchemaError(f"{self.name}: feature {spec.name!r} needs max > min")
        if len(set(self.attack_classes)) != len(self.attack_classes) or NORMAL in self.attack_classes:
            raise SchemaError(f"{self.name}: attack class list must be distinct and exclude {NORMAL}")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for spec in self.features:
            h.update(f"{spec.name}\x1f{spec.kind}\x1e".encode())
        return h.hexdigest()[:16]

    def index_of(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise SchemaError(f"{self.name}: no feature named {name!r}") from None

    def canonical_label(self, raw: str) -> str:
        raw = raw.strip()
        label = self.label_aliases.get(raw, raw)
        if label != NORMAL and label not in self.attack_classes:
            raise UnknownLabel(raw)
        return label


@dataclass(frozen=True, eq=False)
class FlowRecord:
    values: np.ndarray
    schema_id: str
    src_ip: str = "0.0.0.0"
    node_id: str = ""
    timestamp: int = 0
    label: Optional[str] = None

    @property
    def is_attack(self) -> bool:
        if self.label is None:
            raise ValueError("record is unlabeled")
        return self.label != NORMAL

    def with_label(self, label: Optional[str]) -> "FlowRecord":
        return FlowRecord(self.values, self.schema_id, self.src_ip, self.node_id, self.timestamp, label)

    def with_values(self, values: np.ndarray, schema_id: str) -> "FlowRecord":
        return FlowRecord(values, schema_id, self.src_ip, self.node_id, self.timestamp, self.label)


@dataclass
class BaselineDataset:
    records: List[FlowRecord]

    @property
    def attack_ratio(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.is_attack for r in self.records) / len(self.records)

    def __len__(self) -> int:
        return len(self.records)


def _spec_from_json(entry: dict) -> FeatureSpec:
    kind = entry.get("kind", "numeric")
    if kind == "categorical":
        return FeatureSpec(entry["name"], kind, categories=dict(entry.get("values", {})))
    low, high = entry.get("min"), entry.get("max")
    return FeatureSpec(
        entry["name"],
        kind,
        None if low is None else float(low),
        None if high is None else float(high),
    )


def schema_from_dict(doc: dict) -> FeatureSchema:
    try:
        return FeatureSchema(
            name=doc["name"],
            features=tuple(_spec_from_json(e) for e in doc["features"]),
            attack_classes=tuple(doc["attack_classes"]),
            label_column=doc.get("label_column", "label"),
            ip_column=doc.get("ip_column"),
            node_column=doc.get("node_column"),
            timestamp_column=doc.get("timestamp_column"),
            label_aliases=dict(doc.get("label_aliases", {})),
        )
    except KeyError as exc:
        raise SchemaError(f"profile is missing field {exc}") from None


def available_profiles() -> List[str]:
    root = resources.files("edgetwin") / "profiles"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_schema(profile: Union[str, Path]) -> FeatureSchema:
    """Load a profile by bundled name (``"synthetic-v1"``) or by file path."""
    path = Path(profile)
    if path.suffix == ".json" and path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("edgetwin") / "profiles" / f"{profile}.json"
        if not res.is_file():
            raise UnknownProfile(f"unknown dataset profile {str(profile)!r}")
        text = res.read_text(encoding="utf-8")
    return schema_from_dict(json.loads(text))


def _scale(x: float, spec: FeatureSpec) -> float:
    v = (x - spec.low) / (spec.high - spec.low)
    return min(1.0, max(0.0, v))


def _unscale(v: float, spec: FeatureSpec) -> float:
    x = v * (spec.high - spec.low) + spec.low
    if _scale(x, spec) == v:
        return x
    # Inverse can land a few ulps off; walk outwards until scaling reproduces v.
    lo = hi = x
    for _ in range(64):
        lo = math.nextafter(lo, -math.inf)
        hi = math.nextafter(hi, math.inf)
        if _scale(lo, spec) == v:
            return lo
        if _scale(hi, spec) == v:
            return hi
    return x


def _parse_float(name: str, raw) -> float:
    try:
        x = float(raw)
    except (TypeError, ValueError):
        raise UnparseableNumeric(name, str(raw)) from None
    if not math.isfinite(x):
        raise UnparseableNumeric(name, str(raw))
    return x


def normalize_record(raw: Mapping[str, object], schema: FeatureSchema, timestamp: int = 0) -> FlowRecord:
    values = np.empty(schema.n_features, dtype=float)
    for i, spec in enumerate(schema.features):
        if spec.name not in raw:
            raise MissingFeature(spec.name)
        cell = raw[spec.name]
        if spec.kind == "categorical":
            values[i] = spec.categories.get(str(cell).strip(), OTHER_CODE)
        else:
            x = _parse_float(spec.name, cell)
            values[i] = _scale(x, spec) if spec.scaled else x

    label = None
    cell = raw.get(schema.label_column)
    if cell is not None and str(cell).strip() != "":
        label = schema.canonical_label(str(cell))

    src_ip = str(raw.get(schema.ip_column, "0.0.0.0")) if schema.ip_column else "0.0.0.0"
    node_id = str(raw.get(schema.node_column, "")) if schema.node_column else ""
    ts = timestamp
    if schema.timestamp_column and raw.get(schema.timestamp_column) not in (None, ""):
        ts = int(_parse_float(schema.timestamp_column, raw[schema.timestamp_column]))
    return FlowRecord(values, schema.fingerprint, src_ip, node_id, ts, label)


def denormalize_record(record: FlowRecord, schema: FeatureSchema) -> Dict[str, str]:
    """Serialize a record back into a raw row that normalizes to the same vector."""
    row: Dict[str, str] = {}
    for v, spec in zip(record.values, schema.features):
        if spec.kind == "categorical":
            inverse = {code: name for name, code in spec.categories.items()}
            row[spec.name] = inverse.get(int(v), OTHER_TOKEN)
        else:
            x = _unscale(float(v), spec) if spec.scaled else float(v)
            row[spec.name] = repr(x)
    if record.label is not None:
        row[schema.label_column] = record.label
    if schema.ip_column:
        row[schema.ip_column] = record.src_ip
    if schema.node_column:
        row[schema.node_column] = record.node_id
    if schema.timestamp_column:
        row[schema.timestamp_column] = str(record.timestamp)
    return row


def load_dataset(path: Union[str, Path], schema: FeatureSchema, drop_unknown_labels: bool = False) -> List[FlowRecord]:
    """Read a CSV file into normalized records, preserving row order.

    Row numbers in errors count data rows from 1 (the header is not counted).
    With ``drop_unknown_labels`` rows carrying labels outside the profile are
    skipped instead of failing the whole file.
    """
    path = str(path)
    records: List[FlowRecord] = []
    dropped = 0
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row_no, row in enumerate(reader, start=1):
                try:
                    records.append(normalize_record(row, schema, timestamp=row_no - 1))
                except UnknownLabel as exc:
                    if not drop_unknown_labels:
                        raise DatasetError(path, row_no, exc) from exc
                    dropped += 1
                except FlowModelError as exc:
                    raise DatasetError(path, row_no, exc) from exc
    except OSError as exc:
        raise FlowModelError(f"cannot read {path}: {exc}") from exc
    logger.info("loaded %d records from %s (%d dropped)", len(records), path, dropped)
    return records


def write_dataset(path: Union[str, Path], records: Sequence[FlowRecord], schema: FeatureSchema) -> None:
    columns = schema.feature_names + [schema.label_column]
    columns += [c for c in (schema.ip_column, schema.node_column, schema.timestamp_column) if c]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for rec in records:
            writer.writerow(denormalize_record(rec, schema))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_baseline(pool: Sequence[FlowRecord], n: int, attack_ratio: float, seed: int) -> BaselineDataset:
    """Draw ``n`` labeled records without replacement with a fixed attack share."""
    if not 0.0 <= attack_ratio <= 1.0:
        raise ValueError(f"attack_ratio must lie in [0, 1], got {attack_ratio}")
    if n == 0:
        return BaselineDataset([])
    attacks = [r for r in pool if r.is_attack]
    normals = [r for r in pool if not r.is_attack]
    n_attack = round_half_up(n * attack_ratio)
    n_normal = n - n_attack
    if len(attacks) < n_attack or len(normals) < n_normal:
        raise InsufficientRecords(
            f"baseline needs {n_attack} attack / {n_normal} normal records, "
            f"pool has {len(attacks)} / {len(normals)}"
        )
    rng = np.random.default_rng(seed)
    picked = [attacks[i] for i in rng.choice(len(attacks), n_attack, replace=False)]
    picked += [normals[i] for i in rng.choice(len(normals), n_normal, replace=False)]
    order = rng.permutation(len(picked))
    return BaselineDataset([picked[i] for i in order])


def as_matrix(records: Sequence[FlowRecord], features: Optional[Sequence[int]] = None) -> np.ndarray:
    if not records:
        width = 0 if features is None else len(features)
        return np.empty((0, width))
    X = np.vstack([r.values for r in records])
    return X if features is None else X[:, list(features)]


def binary_labels(records: Iterable[FlowRecord]) -> np.ndarray:
    return np.array([r.is_attack for r in records], dtype=int)


@dataclass(frozen=True)
class FeatureProjection:
    """Maps records of one profile onto a shared feature space."""

    source: FeatureSchema
    target: FeatureSchema
    indices: Tuple[int, ...]

    def apply(self, record: FlowRecord) -> FlowRecord:
        if record.schema_id != self.source.fingerprint:
            raise SchemaError(f"record does not belong to profile {self.source.name!r}")
        return record.with_values(record.values[list(self.indices)], self.target.fingerprint)


def shared_projection(
    train: FeatureSchema, test: FeatureSchema, pairs: Sequence[Tuple[str, str]]
) -> Tuple[FeatureSchema, FeatureProjection, FeatureProjection]:
    """Build the common schema for cross-profile runs.

    ``pairs`` lists ``(train_feature, test_feature)`` names; shared features
    are named after the training profile's columns.
    """
    if not pairs:
        raise SchemaError("cross-profile runs need at least one shared feature pair")
    train_idx = tuple(train.index_of(a) for a, _ in pairs)
    test_idx = tuple(test.index_of(b) for _, b in pairs)
    classes = list(train.attack_classes) + [c for c in test.attack_classes if c not in train.attack_classes]
    shared = FeatureSchema(
        name=f"{train.name}+{test.name}",
        features=tuple(train.features[i] for i in train_idx),
        attack_classes=tuple(classes),
    )
    return shared, FeatureProjection(train, shared, train_idx), FeatureProjection(test, shared, test_idx)
