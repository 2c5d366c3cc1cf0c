"""Provenance graph over artifacts and runs, plus reproducibility replay.

Edges live in an append-only ``lineage.jsonl``: consumed edges point from an
input artifact to the run that used it, pinned edges from a tuple component's
content artifact to the run, and produced edges from the run to each artifact
it emitted. The graph is acyclic by construction (a run consumes only
artifacts created before it started), so upstream closures terminate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import MissingInputError, RunNotFoundError
from .feedback import collect, find_metrics_artifact
from .flow.graph import FlowGraph
from .flow.runner import DataScope, execute
from .repo import Repository
from .store import ArtifactId, ArtifactStore
from .tuples import RunRecord, RunStore, StepOutcome
from .util import append_line, canonical_json, read_jsonl

ROLE_CONSUMED = "consumed"
ROLE_PRODUCED = "produced"
ROLE_PINNED = "pinned"


def artifact_ref(artifact_id: ArtifactId) -> str:
    return f"artifact:{artifact_id}"


def run_ref(run_id: str) -> str:
    return f"run:{run_id}"


@dataclass(frozen=True)
class LineageEdge:
    src: str
    dst: str
    role: str

    def to_dict(self) -> dict:
        return {"from": self.src, "to": self.dst, "role": self.role}

    @classmethod
    def from_dict(cls, row: dict) -> "LineageEdge":
        return cls(row["from"], row["to"], row["role"])


class LineageLog:
    """Append-only edge log with an in-memory adjacency cache."""

    def __init__(self, repo: Repository):
        repo.require()
        self._repo = repo
        self._edges: list[LineageEdge] = []
        self._edge_set: set[LineageEdge] = set()
        self._size = -1
        self._refresh()

    def _refresh(self) -> None:
        path = self._repo.lineage_path
        size = path.stat().st_size if path.exists() else 0
        if size == self._size:
            return
        self._edges = [LineageEdge.from_dict(row) for row in read_jsonl(path)]
        self._edge_set = set(self._edges)
        self._size = size

    def edges(self) -> list[LineageEdge]:
        self._refresh()
        return list(self._edges)

    def append_edges(self, edges: Iterable[LineageEdge]) -> int:
        """Append edges not already present; returns how many were added."""
        new = []
        with self._repo.write_lock():
            self._refresh()
            for edge in edges:
                if edge not in self._edge_set and edge not in new:
                    new.append(edge)
            for edge in new:
                append_line(self._repo.lineage_path, canonical_json(edge.to_dict()))
                self._edges.append(edge)
                self._edge_set.add(edge)
            self._size = self._repo.lineage_path.stat().st_size
        return len(new)

    # -- recording -----------------------------------------------------------

    def record_edges(
        self,
        run: RunRecord,
        outcomes: Sequence[StepOutcome] | None = None,
        *,
        store: ArtifactStore,
    ) -> int:
        """Append the run's consumed/pinned/produced edges; idempotent per run."""
        if outcomes is None:
            outcomes = run.step_outcomes
        node = run_ref(run.run_id)
        desired: list[LineageEdge] = []
        seen: set[LineageEdge] = set()

        def add(edge: LineageEdge) -> None:
            if edge not in seen:
                desired.append(edge)
                seen.add(edge)

        for outcome in outcomes:
            for source in outcome.input_sources.values():
                if source.startswith("artifact:"):
                    add(LineageEdge(source, node, ROLE_CONSUMED))
        for pin in run.tuple:
            if pin.content is None:
                continue
            records = store.find_by_hash(pin.content)
            if records:
                add(LineageEdge(artifact_ref(records[0].id), node, ROLE_PINNED))
        for outcome in outcomes:
            for artifact_id in outcome.output_ids.values():
                add(LineageEdge(node, artifact_ref(artifact_id), ROLE_PRODUCED))
        for artifact_id in run.result_ids:
            add(LineageEdge(node, artifact_ref(artifact_id), ROLE_PRODUCED))
        return self.append_edges(desired)

    # -- queries ---------------------------------------------------------------

    def runs_using(self, artifact_id: ArtifactId, *, run_store: RunStore) -> list[str]:
        """Runs with a consumed or pinned edge from the artifact, by start time."""
        node = artifact_ref(artifact_id)
        tokens = {
            edge.dst.removeprefix("run:")
            for edge in self.edges()
            if edge.src == node and edge.role in (ROLE_CONSUMED, ROLE_PINNED)
        }

        def sort_key(token: str):
            try:
                return (run_store.load(token).started_at, token)
            except RunNotFoundError:
                return ("", token)

        return sorted(tokens, key=sort_key)

    def provenance_of(self, artifact_id: ArtifactId) -> set[str]:
        """Upstream closure: the artifact, its producing runs, their inputs, and so on."""
        producers: dict[str, set[str]] = {}
        inputs: dict[str, set[str]] = {}
        for edge in self.edges():
            if edge.role == ROLE_PRODUCED:
                producers.setdefault(edge.dst, set()).add(edge.src)
            else:
                inputs.setdefault(edge.dst, set()).add(edge.src)
        start = artifact_ref(artifact_id)
        closure: set[str] = set()
        frontier = [start]
        while frontier:
            node = frontier.pop()
            if node in closure:
                continue
            closure.add(node)
            if node.startswith("artifact:"):
                frontier.extend(producers.get(node, ()))
            else:
                frontier.extend(inputs.get(node, ()))
        return closure


@dataclass(frozen=True)
class Divergence:
    step: str
    partition_index: int | None
    slot: str
    old_hash: str | None
    new_hash: str | None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "partition_index": self.partition_index,
            "slot": self.slot,
            "old_hash": self.old_hash,
            "new_hash": self.new_hash,
        }


@dataclass(frozen=True)
class ReplayResult:
    identical: bool
    divergences: tuple[Divergence, ...]
    replay_run_id: str

    def to_dict(self) -> dict:
        return {
            "identical": self.identical,
            "divergences": [d.to_dict() for d in self.divergences],
            "replay_run_id": self.replay_run_id,
        }


def _output_map(record: RunRecord) -> dict[tuple[str, int | None, str], str]:
    out = {}
    for outcome in record.step_outcomes:
        for slot, artifact_id in outcome.output_ids.items():
            out[(outcome.step, outcome.partition_index, slot)] = artifact_id.hash
    return out


def replay_check(
    run_id: str,
    graph: FlowGraph,
    executor,
    *,
    store: ArtifactStore,
    run_store: RunStore,
    lineage_log: LineageLog | None = None,
    metrics_output=None,
    parallelism: int = 4,
) -> ReplayResult:
    """Re-execute a recorded run and compare every output hash slot by slot.

    The replay is itself recorded as a validation run labeled with the run it
    reproduces.
    """
    original = run_store.load(run_id)

    for pin in original.tuple:
        if pin.content is None:
            continue
        records = store.find_by_hash(pin.content)
        if not records:
            raise MissingInputError(f"pinned input {pin.component} ({pin.content}) is gone from the store")
        if not store.verify(records[0].id):
            raise MissingInputError(f"pinned input {pin.component} ({pin.content}) fails verification")
    for step in graph.steps:
        for ref in step.inputs.values():
            if hasattr(ref, "id"):
                if not store.has(ref.id) or not store.verify(ref.id):
                    raise MissingInputError(f"input artifact {ref.id} is missing or corrupt")

    scope_info = original.data_scope or {"kind": "full", "manifest": None}
    manifest_ids = None
    if scope_info.get("manifest"):
        manifest_ids = tuple(json.loads(store.get_by_hash(scope_info["manifest"]).decode("utf-8")))
    scope = DataScope(scope_info.get("kind", "full"), manifest_ids)

    replay = execute(
        graph,
        original.tuple,
        executor,
        kind="validation",
        store=store,
        run_store=run_store,
        data_scope=scope,
        branch=original.branch,
        labels={"replay-of": run_id},
        parallelism=parallelism,
    )
    metrics_artifact = find_metrics_artifact(replay, metrics_output)
    collect(replay, store=store, run_store=run_store, metrics_artifact=metrics_artifact)
    if lineage_log is not None:
        lineage_log.record_edges(replay, store=store)

    old_outputs = _output_map(original)
    new_outputs = _output_map(replay)
    divergences = []
    for key in sorted(set(old_outputs) | set(new_outputs), key=lambda k: (k[0], k[1] is not None, k[1] or 0, k[2])):
        old_hash = old_outputs.get(key)
        new_hash = new_outputs.get(key)
        if old_hash != new_hash:
            divergences.append(Divergence(key[0], key[1], key[2], old_hash, new_hash))
    return ReplayResult(not divergences, tuple(divergences), replay.run_id)
