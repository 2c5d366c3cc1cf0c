"""Per-run feedback bundles, metric extraction, gate policies, run comparison.

A feedback bundle gathers, for every executed step task, the log, the
rendered command, the input parameters, the output references, telemetry
(wall time and exit code), and the captured environment snapshot, plus a
run-level metrics map. Bundles are stored as result artifacts and referenced
from the run record, so two runs with aligned tuples can be compared
metric-by-metric alongside their tuple diff.
"""

from __future__ import annotations

import json
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__ as ENGINE_VERSION
from .errors import (
    GatePolicyError,
    MalformedMetricsError,
    MissingFeedbackError,
    NotAlignedError,
)
from .store import ArtifactId, ArtifactKind, ArtifactStore
from .tuples import (
    RunRecord,
    RunStore,
    StepOutcome,
    TupleDiffEntry,
    aligned,
    diff_tuples,
)
from .util import canonical_json, load_json

_COMPARATORS = {
    "<=": operator.le,
    "<": operator.lt,
    ">=": operator.ge,
    ">": operator.gt,
    "=": operator.eq,
}


@dataclass(frozen=True)
class BundleEntry:
    step: str
    partition_index: int | None
    log_id: str
    command_rendered: str
    input_parameters: dict[str, str]
    output_ids: dict[str, str]
    wall_time_ms: int
    exit_code: int
    env_snapshot_id: str

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "partition_index": self.partition_index,
            "log_id": self.log_id,
            "command_rendered": self.command_rendered,
            "input_parameters": dict(sorted(self.input_parameters.items())),
            "output_ids": dict(sorted(self.output_ids.items())),
            "telemetry": {"wall_time_ms": self.wall_time_ms, "exit_code": self.exit_code},
            "env_snapshot_id": self.env_snapshot_id,
        }


@dataclass
class FeedbackBundle:
    run_id: str
    engine_version: str
    entries: list[BundleEntry]
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "engine_version": self.engine_version,
            "entries": [e.to_dict() for e in self.entries],
            "metrics": dict(sorted(self.metrics.items())),
        }

    def to_bytes(self) -> bytes:
        return (canonical_json(self.to_dict()) + "\n").encode("utf-8")


def build_bundle(run: RunRecord, outcomes: Sequence[StepOutcome]) -> FeedbackBundle:
    """Assemble a bundle from step outcomes; a pure function of its inputs."""
    entries = [
        BundleEntry(
            step=o.step,
            partition_index=o.partition_index,
            log_id=str(o.log_id),
            command_rendered=o.command_rendered,
            input_parameters=dict(o.input_sources),
            output_ids={slot: str(a) for slot, a in o.output_ids.items()},
            wall_time_ms=o.wall_time_ms,
            exit_code=o.exit_code,
            env_snapshot_id=str(o.env_snapshot_id),
        )
        for o in outcomes
    ]
    return FeedbackBundle(run.run_id, ENGINE_VERSION, entries)


def extract_metrics(bundle: FeedbackBundle, metrics_artifact: ArtifactId, *, store: ArtifactStore) -> dict[str, float]:
    """Parse a flat string→number document and merge it into bundle.metrics."""
    raw = store.get(metrics_artifact)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMetricsError(f"metrics artifact {metrics_artifact} is not JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedMetricsError(f"metrics artifact {metrics_artifact} must be a JSON object")
    parsed: dict[str, float] = {}
    for key, value in doc.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedMetricsError(f"metric {key!r} has non-numeric value {value!r}")
        parsed[key] = float(value)
    bundle.metrics.update(parsed)
    return parsed


def find_metrics_artifact(run: RunRecord, metrics_output) -> ArtifactId | None:
    """Artifact produced at the manifest's designated metrics (step, slot), if any."""
    if metrics_output is None:
        return None
    for outcome in run.step_outcomes:
        if outcome.step == metrics_output.step and metrics_output.slot in outcome.output_ids:
            # Partitioned steps expose metrics through the merge task only.
            if outcome.partition_index is None:
                return outcome.output_ids[metrics_output.slot]
    return None


def collect(
    run: RunRecord,
    outcomes: Sequence[StepOutcome] | None = None,
    *,
    store: ArtifactStore,
    run_store: RunStore,
    metrics_artifact: ArtifactId | None = None,
) -> tuple[FeedbackBundle, ArtifactId]:
    """Build, store, and attach the run's feedback bundle.

    Content addressing makes this idempotent: collecting the same outcomes
    twice yields the same bundle artifact.
    """
    if outcomes is None:
        outcomes = run.step_outcomes
    bundle = build_bundle(run, outcomes)
    if metrics_artifact is not None:
        extract_metrics(bundle, metrics_artifact, store=store)
    bundle_id = store.put(
        ArtifactKind.RESULT,
        bundle.to_bytes(),
        "application/json",
        labels={"run": run.run_id, "role": "feedback"},
    )
    run_store.attach_feedback(run.run_id, bundle_id)
    run.feedback_id = bundle_id
    return bundle, bundle_id


def load_bundle(run: RunRecord, *, store: ArtifactStore) -> FeedbackBundle:
    if run.feedback_id is None:
        raise MissingFeedbackError(f"run {run.run_id} has no feedback bundle")
    doc = json.loads(store.get(run.feedback_id).decode("utf-8"))
    entries = [
        BundleEntry(
            step=e["step"],
            partition_index=e["partition_index"],
            log_id=e["log_id"],
            command_rendered=e["command_rendered"],
            input_parameters=dict(e["input_parameters"]),
            output_ids=dict(e["output_ids"]),
            wall_time_ms=e["telemetry"]["wall_time_ms"],
            exit_code=e["telemetry"]["exit_code"],
            env_snapshot_id=e["env_snapshot_id"],
        )
        for e in doc["entries"]
    ]
    return FeedbackBundle(doc["run_id"], doc["engine_version"], entries, dict(doc["metrics"]))


@dataclass(frozen=True)
class GateConstraint:
    metric: str
    op: str
    threshold: float

    def __post_init__(self) -> None:
        if self.op not in _COMPARATORS:
            raise GatePolicyError(f"unknown comparator {self.op!r}")


@dataclass(frozen=True)
class GatePolicy:
    constraints: tuple[GateConstraint, ...] = ()

    def __post_init__(self) -> None:
        names = [c.metric for c in self.constraints]
        if len(set(names)) != len(names):
            raise GatePolicyError("metric names must be unique per policy")


@dataclass(frozen=True)
class GateCheck:
    metric: str
    op: str
    threshold: float
    observed: float | None
    satisfied: bool

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "op": self.op,
            "threshold": self.threshold,
            "observed": self.observed,
            "satisfied": self.satisfied,
        }


@dataclass(frozen=True)
class GateReport:
    passed: bool
    results: tuple[GateCheck, ...]

    def to_dict(self) -> dict:
        return {"pass": self.passed, "results": [r.to_dict() for r in self.results]}


def load_gate_policy(path: Path) -> GatePolicy:
    """Load ``gates.json``; a missing file means an empty (vacuously passing) policy."""
    doc = load_json(Path(path), None)
    if doc is None:
        return GatePolicy()
    if not isinstance(doc, dict) or not isinstance(doc.get("constraints"), list):
        raise GatePolicyError(f"{path}: expected {{\"constraints\": [...]}}")
    constraints = []
    for i, row in enumerate(doc["constraints"]):
        if not isinstance(row, dict) or set(row) != {"metric", "op", "threshold"}:
            raise GatePolicyError(f"{path}: constraints[{i}] must have metric, op, threshold")
        op = "=" if row["op"] == "==" else row["op"]
        value = row["threshold"]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise GatePolicyError(f"{path}: constraints[{i}] threshold must be a number")
        constraints.append(GateConstraint(str(row["metric"]), op, float(value)))
    return GatePolicy(tuple(constraints))


def evaluate_gate(metrics: Mapping[str, float], policy: GatePolicy) -> GateReport:
    """Check each constraint exactly (no tolerance); missing metrics fail theirs."""
    results = []
    for constraint in policy.constraints:
        observed = metrics.get(constraint.metric)
        if observed is None:
            satisfied = False
        else:
            satisfied = bool(_COMPARATORS[constraint.op](observed, constraint.threshold))
        results.append(GateCheck(constraint.metric, constraint.op, constraint.threshold, observed, satisfied))
    return GateReport(all(r.satisfied for r in results), tuple(results))


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    value_a: float
    value_b: float
    delta: float

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value_a": self.value_a, "value_b": self.value_b, "delta": self.delta}


@dataclass(frozen=True)
class RunComparison:
    run_a: str
    run_b: str
    metrics: tuple[MetricDelta, ...]
    only_a: dict[str, float]
    only_b: dict[str, float]
    tuple_diff: tuple[TupleDiffEntry, ...]

    def to_dict(self) -> dict:
        return {
            "run_a": self.run_a,
            "run_b": self.run_b,
            "metrics": [m.to_dict() for m in self.metrics],
            "only_a": dict(sorted(self.only_a.items())),
            "only_b": dict(sorted(self.only_b.items())),
            "tuple_diff": [d.to_dict() for d in self.tuple_diff],
        }


def compare_runs(run_a: str, run_b: str, *, run_store: RunStore, store: ArtifactStore) -> RunComparison:
    """Per-metric deltas (b − a) between two aligned runs, plus their tuple diff."""
    rec_a = run_store.load(run_a)
    rec_b = run_store.load(run_b)
    if not aligned(rec_a.tuple, rec_b.tuple):
        raise NotAlignedError(
            f"runs {run_a} and {run_b} have different tuple component sets and are not comparable"
        )
    bundle_a = load_bundle(rec_a, store=store)
    bundle_b = load_bundle(rec_b, store=store)
    common = sorted(set(bundle_a.metrics) & set(bundle_b.metrics))
    deltas = tuple(
        MetricDelta(name, bundle_a.metrics[name], bundle_b.metrics[name], bundle_b.metrics[name] - bundle_a.metrics[name])
        for name in common
    )
    only_a = {k: v for k, v in bundle_a.metrics.items() if k not in bundle_b.metrics}
    only_b = {k: v for k, v in bundle_b.metrics.items() if k not in bundle_a.metrics}
    return RunComparison(run_a, run_b, deltas, only_a, only_b, tuple(diff_tuples(rec_a.tuple, rec_b.tuple)))
