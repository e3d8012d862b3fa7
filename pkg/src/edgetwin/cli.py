"""Command-line entry point: ``edgetwin <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import harness
from .classifiers import save_model
from .flow_model import (
    FlowModelError,
    load_dataset,
    load_schema,
    sample_baseline,
    write_dataset,
)
from .mitigation import ApprovalRegistry, MitigationError, Mitigator, SuspendedIpList, Verdict
from .online_selection import SelectionConfig, SelectionError, run_selection, select_on_labeled
from .twin_graph import TwinGraph

logger = logging.getLogger("edgetwin")

LAST = "LAST"


class CliError(Exception):
    pass


def _resolve_spec(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    return harness.bundled_spec(ref)


def _records(ref: str, profile: str, seed: int, size: int, attack_ratio: float):
    """Labeled records from ``synthetic:<scenario>`` or a CSV path."""
    rng = np.random.default_rng(seed)
    if ref.startswith("synthetic:"):
        src = harness.open_source(ref, "synthetic-v1", Path.cwd())
        n_attack = round(size * attack_ratio)
        classes = src.attack_classes
        recs = src.draw("Normal", size - n_attack, rng)
        for i, cls in enumerate(classes):
            recs += src.draw(cls, n_attack // len(classes) + (i < n_attack % len(classes)), rng)
        return [recs[i] for i in rng.permutation(len(recs))]
    recs = load_dataset(ref, load_schema(profile), drop_unknown_labels=True)
    if size and len(recs) > size:
        recs = sample_baseline(recs, size, attack_ratio, seed).records
    return recs


# -- subcommands ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    schema = load_schema(args.profile)
    records = load_dataset(args.input, schema, drop_unknown_labels=args.drop_unknown)
    if args.normalized:
        # profile-normalized form: the model-space values in [0, 1]
        import csv

        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(schema.feature_names + ["label", "src_ip", "node_id", "ts"])
            for r in records:
                w.writerow([repr(float(v)) for v in r.values] + [r.label, r.src_ip, r.node_id, r.timestamp])
    else:
        write_dataset(args.output, records, schema)
    print(f"ingested {len(records)} records with profile {schema.name} -> {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = SelectionConfig(seed=args.seed, clock=args.clock, workers=args.workers)
    recs = _records(args.data, args.profile, args.seed, args.size, 0.5)
    report = select_on_labeled(recs, recs[: cfg.batch_size], cfg, trigger="initial")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(report.model, out)
    if args.report:
        report.save(args.report)
    print(f"trained {report.classifier.value} with {report.fs_method.value} features {list(report.features)} -> {out}")
    return 0


def cmd_select(args) -> int:
    cfg = SelectionConfig(seed=args.seed, clock=args.clock, workers=args.workers)
    batch = [r.with_label(None) for r in _records(args.batch, args.profile, args.seed, cfg.batch_size, args.batch_attack_ratio)]
    pool = _records(args.baseline, args.profile, args.seed + 1, 0 if not args.baseline.startswith("synthetic:") else 2 * cfg.baseline_size, cfg.baseline_attack_ratio)
    baseline = sample_baseline(pool, cfg.baseline_size, cfg.baseline_attack_ratio, args.seed)
    report = run_selection(batch, baseline, cfg, trigger="manual")
    if args.out:
        report.save(args.out)
    print(f"winner: {report.classifier.value} + {report.fs_method.value} on features {list(report.features)}")
    for s in report.classifier_scores:
        print(f"  {s.candidate:<22} sigma {s.sigma:.4f}  time {s.theta_ms:.3f} ms  combined {s.combined:.4f}")
    return 0


def cmd_replay(args) -> int:
    spec = harness.ExperimentSpec.load(_resolve_spec(args.spec), seed=args.seed, workers=args.workers, clock=args.clock)
    root = Path(args.out)
    run_dir = root / f"{spec.name}-seed{spec.seed}"
    report = harness.replay(spec, run_dir)
    (root / LAST).write_text(str(run_dir.resolve()) + "\n", encoding="utf-8")
    print(report.render())
    print(f"\nrun directory: {run_dir}")
    return 0


def _run_dir(args) -> Path:
    if getattr(args, "path", None):
        p = Path(args.path)
        return p.parent if p.is_file() else p
    pointer = Path(args.runs) / LAST
    if not pointer.exists():
        raise CliError(f"no previous replay under {args.runs}")
    return Path(pointer.read_text(encoding="utf-8").strip())


def cmd_report(args) -> int:
    run = _run_dir(args)
    path = run / "report.json"
    if not path.exists():
        raise CliError(f"no report at {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if args.json:
        print(json.dumps(doc, indent=1))
    else:
        print(harness.ExperimentReport.from_dict(doc).render())
    return 0


def _resolve(args, verdict: Verdict) -> int:
    run = Path(args.state_dir) if args.state_dir else _run_dir(args)
    journal = run / "journal.jsonl"
    if not journal.exists():
        raise CliError(f"no journal in {run}")
    twin = TwinGraph.from_journal(journal)
    try:
        mitigator = Mitigator(twin, suspended=SuspendedIpList(run / "suspended_ips.txt"),
                              approvals=ApprovalRegistry(run / "approvals.json"))
        action = mitigator.resolve_approval(args.request_id, verdict)
    finally:
        twin.close()
    done = "approved" if verdict is Verdict.APPROVE else "denied"
    print(f"request {args.request_id} {done}: node {action.target} now {twin.status(action.target).value}")
    return 0


def cmd_approve(args) -> int:
    return _resolve(args, Verdict.APPROVE)


def cmd_deny(args) -> int:
    return _resolve(args, Verdict.DENY)


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgetwin", description="Twin-backed attack detection pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def selection_flags(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--clock", choices=["wall", "cost"], default="cost")
        sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("ingest", help="normalize a raw dataset CSV through a profile")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--drop-unknown", action="store_true", help="skip rows whose label is not in the profile")
    sp.add_argument("--normalized", action="store_true", help="write scaled model-space values instead of raw units")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="fit the initial production model")
    sp.add_argument("--data", required=True, help="CSV path or synthetic:<scenario>")
    sp.add_argument("--profile", default="synthetic-v1")
    sp.add_argument("--size", type=int, default=2000)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    selection_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("select", help="force one online-selection run")
    sp.add_argument("--batch", required=True, help="CSV path or synthetic:<scenario>; labels are stripped")
    sp.add_argument("--baseline", required=True, help="labeled CSV path or synthetic:<scenario>")
    sp.add_argument("--profile", default="synthetic-v1")
    sp.add_argument("--batch-attack-ratio", type=float, default=0.35)
    sp.add_argument("--out")
    selection_flags(sp)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("replay", help="run an experiment spec")
    sp.add_argument("--spec", required=True, help="spec file or bundled name (smoke, drift, ...)")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", default="runs")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--clock", choices=["wall", "cost"])
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("report", help="render an experiment report")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--last", action="store_true")
    g.add_argument("--path")
    sp.add_argument("--runs", default="runs")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_report)

    for name, func in (("approve", cmd_approve), ("deny", cmd_deny)):
        sp = sub.add_parser(name, help=f"{name} a pending isolation request")
        sp.add_argument("request_id", type=int)
        sp.add_argument("--state-dir", help="run directory; defaults to the last replay")
        sp.add_argument("--runs", default="runs")
        sp.set_defaults(func=func)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, harness.HarnessError, FlowModelError, MitigationError, SelectionError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
