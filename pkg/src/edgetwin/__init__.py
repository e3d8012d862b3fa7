"""Twin-backed attack detection for edge networks.

Flows are normalized against a dataset profile, mirrored into a digital twin
of the edge nodes, classified by the current production model, and answered
with risk-tiered mitigation.  A reliability monitor watches recall over a
sliding window and, when it sags, an online selection run picks a fresh
classifier and feature subset that is swapped in without pausing detection.
"""

from .flow_model import FeatureSchema, FlowRecord, load_schema, normalize_record
from .twin_graph import EventKind, TwinGraph, TwinStatus

__all__ = ["FeatureSchema", "FlowRecord", "load_schema", "normalize_record", "EventKind", "TwinGraph", "TwinStatus"]
__version__ = "0.1.0"
