"""The ``ca`` command line interface.

Exit codes: 0 success, 1 domain error (validation failure, gate fail,
not-aligned, ...), 2 usage error, 3 storage/integrity error. Every subcommand
accepts ``--json`` to emit a single machine-readable JSON document on stdout;
human mode prints tables. All error text goes to stderr.

Configuration precedence: flags > environment (``CA_REPO``,
``CA_PARALLELISM``) > ``config.json`` in the repository > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import EngineError, StorageError
from .feedback import compare_runs
from .flow.executors import ProcessExecutor
from .flow.graph import parse_manifest, to_dot, validate
from .lineage import LineageLog, replay_check
from .pipeline import MAIN_BRANCH, Pipeline, make_event
from .repo import Repository
from .store import ArtifactId, ArtifactKind, ArtifactStore
from .tuples import RunStore, VersionPin

DEFAULT_REPO = ".ca"


@dataclass
class CliConfig:
    repo_path: Path
    parallelism: int = 4
    subset_fraction: float = 0.1
    subset_seed: int = 0
    flow_manifest: str | None = None


def _resolve_config(args) -> CliConfig:
    repo_path = Path(args.repo or os.environ.get("CA_REPO") or DEFAULT_REPO)
    cfg = CliConfig(repo_path)
    repo = Repository(repo_path)
    if repo.config_path.exists():
        stored = repo.config()
        cfg.parallelism = int(stored.get("parallelism", cfg.parallelism))
        cfg.subset_fraction = float(stored.get("subset_fraction", cfg.subset_fraction))
        cfg.subset_seed = int(stored.get("subset_seed", cfg.subset_seed))
        cfg.flow_manifest = stored.get("flow_manifest")
    if os.environ.get("CA_PARALLELISM"):
        cfg.parallelism = int(os.environ["CA_PARALLELISM"])
    if getattr(args, "parallelism", None):
        cfg.parallelism = args.parallelism
    if cfg.parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if not (0 < cfg.subset_fraction <= 1):
        raise ValueError("subset_fraction must be in (0, 1]")
    return cfg


class _Context:
    """Lazily opened handles over one repository."""

    def __init__(self, args):
        self.args = args
        self.config = _resolve_config(args)
        self.repo = Repository(self.config.repo_path)
        self._store = None
        self._runs = None
        self._lineage = None
        self._pipeline = None

    @property
    def store(self) -> ArtifactStore:
        if self._store is None:
            self._store = ArtifactStore(self.repo)
        return self._store

    @property
    def runs(self) -> RunStore:
        if self._runs is None:
            self._runs = RunStore(self.repo, self.store)
        return self._runs

    @property
    def lineage(self) -> LineageLog:
        if self._lineage is None:
            self._lineage = LineageLog(self.repo)
        return self._lineage

    @property
    def pipeline(self) -> Pipeline:
        if self._pipeline is None:
            self._pipeline = Pipeline(
                self.repo,
                self.store,
                self.runs,
                self.lineage,
                subset_fraction=self.config.subset_fraction,
                subset_seed=self.config.subset_seed,
                parallelism=self.config.parallelism,
            )
        return self._pipeline

    def load_graph(self, manifest_arg: str | None):
        path = manifest_arg or self.config.flow_manifest
        if not path:
            raise EngineError("no flow manifest given (pass --flow or set flow_manifest in config.json)")
        graph = parse_manifest(Path(path).read_text(encoding="utf-8"))
        violations = validate(graph)
        if violations:
            raise EngineError("invalid flow: " + "; ".join(str(v) for v in violations))
        return graph


def _emit(args, doc: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(doc, indent=2, sort_keys=True))
    elif human:
        print(human)


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(headers))).rstrip(),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines)


def _parse_labels(pairs: list[str]) -> dict[str, str]:
    labels = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"label must look like key=value, got {pair!r}")
        labels[key] = value
    return labels


def _parse_pin_flag(text: str) -> VersionPin:
    component, sep, rest = text.partition("=")
    if not sep or not rest:
        raise ValueError(f"pin must look like component=version[@hash], got {text!r}")
    version, at, content = rest.partition("@")
    return VersionPin(component, version, content if at else None)


def _run_summary(record) -> dict:
    return {
        "run_id": record.run_id,
        "kind": record.kind,
        "branch": record.branch,
        "status": record.status,
        "started_at": record.started_at,
        "finished_at": record.finished_at,
        "result_ids": [str(r) for r in record.result_ids],
        "labels": dict(record.labels),
        "data_scope": dict(record.data_scope),
    }


# -- subcommand handlers -------------------------------------------------------


def cmd_init(args) -> int:
    ctx = _Context(args)
    created = ctx.repo.init()
    if args.pin:
        pins = [_parse_pin_flag(p) for p in args.pin]
        ctx.pipeline.set_branch_pins(MAIN_BRANCH, pins)
    _emit(
        args,
        {"repo": str(ctx.repo.root), "created": created},
        f"{'initialized' if created else 'already initialized'} {ctx.repo.root}",
    )
    return 0


def cmd_artifact_put(args) -> int:
    ctx = _Context(args)
    data = sys.stdin.buffer.read() if args.file == "-" else Path(args.file).read_bytes()
    artifact_id = ctx.store.put(
        ArtifactKind(args.kind), data, args.media_type, _parse_labels(args.label)
    )
    _emit(
        args,
        {"id": str(artifact_id), "kind": artifact_id.kind.value, "hash": artifact_id.hash, "size": len(data)},
        f"{artifact_id}",
    )
    return 0


def cmd_artifact_get(args) -> int:
    ctx = _Context(args)
    data = ctx.store.get(ArtifactId.parse(args.id))
    if args.output:
        Path(args.output).write_bytes(data)
    if getattr(args, "json", False):
        doc = {"id": args.id, "size": len(data), "output": args.output}
        if not args.output:
            import base64

            doc["base64"] = base64.b64encode(data).decode("ascii")
        print(json.dumps(doc, indent=2, sort_keys=True))
    elif not args.output:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return 0


def cmd_artifact_verify(args) -> int:
    ctx = _Context(args)
    ok = ctx.store.verify(ArtifactId.parse(args.id))
    _emit(args, {"id": args.id, "ok": ok}, "true" if ok else "false")
    if not ok:
        print(f"error[integrity-violation]: {args.id} failed verification", file=sys.stderr)
        return 3
    return 0


def cmd_artifact_ls(args) -> int:
    ctx = _Context(args)
    kind = ArtifactKind(args.kind) if args.kind else None
    records = ctx.store.list(kind, _parse_labels(args.label))
    doc = {"artifacts": [r.to_dict() for r in records]}
    rows = [
        [r.id.kind.value, r.id.hash[:12], str(r.size), r.media_type, r.created_at]
        for r in records
    ]
    _emit(args, doc, _table(["kind", "hash", "size", "media_type", "created_at"], rows))
    return 0


def cmd_flow_validate(args) -> int:
    graph = parse_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    violations = validate(graph)
    if violations:
        for violation in violations:
            print(str(violation), file=sys.stderr)
        _emit(args, {"ok": False, "violations": [str(v) for v in violations]}, "")
        return 1
    _emit(args, {"ok": True, "violations": []}, "ok")
    return 0


def cmd_flow_graph(args) -> int:
    graph = parse_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    dot = to_dot(graph)
    if getattr(args, "json", False):
        print(json.dumps({"dot": dot}, indent=2, sort_keys=True))
    else:
        print(dot)
    return 0


def cmd_flow_run(args) -> int:
    ctx = _Context(args)
    graph = ctx.load_graph(args.manifest)
    executor = ProcessExecutor()
    if args.event:
        plan = ctx.pipeline.find_plan(args.event)
        if plan is None:
            raise EngineError(f"no planned run for event {args.event!r} (emit it first)")
        record = ctx.pipeline.run_validation(plan, graph, executor)
    else:
        record = ctx.pipeline.run_direct(graph, executor, branch=args.branch)
    _emit(
        args,
        _run_summary(record),
        f"run {record.run_id} [{record.kind}] {record.status}",
    )
    return 0 if record.status == "succeeded" else 1


def cmd_event_emit(args) -> int:
    ctx = _Context(args)
    event = make_event(args.source, args.ref, args.version, args.content, args.id)
    plan = ctx.pipeline.ingest_event(event)
    _emit(
        args,
        {"event_id": plan.event_id, "branch": plan.branch, "kind": plan.kind, "tuple": plan.tuple.to_dict()},
        f"planned {plan.kind} run for event {plan.event_id} on {plan.branch}",
    )
    return 0


def cmd_run_ls(args) -> int:
    ctx = _Context(args)
    records = ctx.runs.list()
    doc = {"runs": [_run_summary(r) for r in records]}
    rows = [[r.run_id, r.kind, r.branch, r.status, r.started_at] for r in records]
    _emit(args, doc, _table(["run_id", "kind", "branch", "status", "started_at"], rows))
    return 0


def cmd_run_show(args) -> int:
    ctx = _Context(args)
    record = ctx.runs.load(args.run_id)
    doc = record.to_dict()
    lines = [f"{k}: {v}" for k, v in _run_summary(record).items()]
    lines.append(f"steps: {len(record.step_outcomes)} outcome(s)")
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_run_diff(args) -> int:
    ctx = _Context(args)
    comparison = compare_runs(args.run_a, args.run_b, run_store=ctx.runs, store=ctx.store)
    rows = [[m.metric, f"{m.value_a}", f"{m.value_b}", f"{m.delta:+g}"] for m in comparison.metrics]
    human = _table(["metric", "a", "b", "delta"], rows)
    if comparison.tuple_diff:
        human += "\ntuple diff:\n" + "\n".join(
            f"  {d.component}: {d.a.version if d.a else '-'} -> {d.b.version if d.b else '-'}"
            for d in comparison.tuple_diff
        )
    _emit(args, comparison.to_dict(), human)
    return 0


def cmd_gate_eval(args) -> int:
    ctx = _Context(args)
    report = ctx.pipeline.gate_report(args.run_id)
    rows = [
        [r.metric, r.op, f"{r.threshold}", "-" if r.observed is None else f"{r.observed}", "yes" if r.satisfied else "no"]
        for r in report.results
    ]
    human = _table(["metric", "op", "threshold", "observed", "ok"], rows)
    human += f"\ngate: {'pass' if report.passed else 'fail'}"
    _emit(args, {"run_id": args.run_id, **report.to_dict()}, human)
    return 0 if report.passed else 1


def cmd_approve(args) -> int:
    ctx = _Context(args)
    request = ctx.pipeline.approve(args.run_id, args.by)
    doc = request.to_dict()
    human = f"approved {args.run_id} (by {args.by})"
    if args.auto_release:
        graph = ctx.load_graph(args.flow)
        release = ctx.pipeline.run_release(args.run_id, graph, ProcessExecutor())
        doc = {"approval": doc, "release": _run_summary(release)}
        human += f"\nrelease {release.run_id} {release.status}"
        _emit(args, doc, human)
        return 0 if release.status == "succeeded" else 1
    _emit(args, doc, human)
    return 0


def cmd_reject(args) -> int:
    ctx = _Context(args)
    request = ctx.pipeline.reject(args.run_id, args.by, args.reason)
    _emit(args, request.to_dict(), f"rejected {args.run_id} (by {args.by}): {args.reason}")
    return 0


def cmd_release(args) -> int:
    ctx = _Context(args)
    graph = ctx.load_graph(args.flow)
    release = ctx.pipeline.run_release(args.run_id, graph, ProcessExecutor())
    _emit(args, _run_summary(release), f"release {release.run_id} {release.status}")
    return 0 if release.status == "succeeded" else 1


def cmd_lineage_who_uses(args) -> int:
    ctx = _Context(args)
    artifact_id = ArtifactId.parse(args.artifact)
    runs = ctx.lineage.runs_using(artifact_id, run_store=ctx.runs)
    _emit(args, {"artifact": args.artifact, "runs": runs}, "\n".join(runs))
    return 0


def cmd_lineage_provenance(args) -> int:
    ctx = _Context(args)
    artifact_id = ArtifactId.parse(args.artifact)
    closure = sorted(ctx.lineage.provenance_of(artifact_id))
    _emit(args, {"artifact": args.artifact, "closure": closure}, "\n".join(closure))
    return 0


def cmd_replay(args) -> int:
    ctx = _Context(args)
    graph = ctx.load_graph(args.flow)
    result = replay_check(
        args.run_id,
        graph,
        ProcessExecutor(),
        store=ctx.store,
        run_store=ctx.runs,
        lineage_log=ctx.lineage,
        metrics_output=graph.metrics_output,
        parallelism=ctx.config.parallelism,
    )
    if result.identical:
        _emit(args, result.to_dict(), f"identical (replayed as {result.replay_run_id})")
        return 0
    human = "\n".join(
        f"diverged: {d.step}"
        + (f"[p{d.partition_index}]" if d.partition_index is not None else "")
        + f".{d.slot}: {d.old_hash} -> {d.new_hash}"
        for d in result.divergences
    )
    _emit(args, result.to_dict(), human + f"\n(replayed as {result.replay_run_id})")
    return 1


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--repo", help="repository directory (default ./.ca or $CA_REPO)")
    common.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
    common.add_argument("--parallelism", type=int, help="max concurrent flow steps")

    parser = argparse.ArgumentParser(prog="ca", description="Continuous analysis engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create the repository skeleton")
    p.add_argument("--pin", action="append", metavar="COMPONENT=VERSION[@HASH]", help="seed a main branch pin")
    p.set_defaults(func=cmd_init)

    artifact = sub.add_parser("artifact", help="content-addressed artifact store").add_subparsers(
        dest="artifact_command", required=True
    )
    p = artifact.add_parser("put", parents=[common], help="store a blob")
    p.add_argument("file", help="path to the blob, or - for stdin")
    p.add_argument("--kind", required=True, choices=[k.value for k in ArtifactKind])
    p.add_argument("--media-type", default="application/octet-stream")
    p.add_argument("--label", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_artifact_put)
    p = artifact.add_parser("get", parents=[common], help="print a blob")
    p.add_argument("id")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_artifact_get)
    p = artifact.add_parser("verify", parents=[common], help="check a blob against its digest")
    p.add_argument("id")
    p.set_defaults(func=cmd_artifact_verify)
    p = artifact.add_parser("ls", parents=[common], help="list artifact records")
    p.add_argument("--kind", choices=[k.value for k in ArtifactKind])
    p.add_argument("--label", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_artifact_ls)

    flow = sub.add_parser("flow", help="experiment flow graphs").add_subparsers(
        dest="flow_command", required=True
    )
    p = flow.add_parser("validate", parents=[common], help="check a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_flow_validate)
    p = flow.add_parser("graph", parents=[common], help="render a manifest as DOT")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_flow_graph)
    p = flow.add_parser("run", parents=[common], help="execute a flow")
    p.add_argument("manifest", nargs="?", help="flow manifest (defaults to config flow_manifest)")
    p.add_argument("--branch", default=MAIN_BRANCH)
    p.add_argument("--event", help="execute the validation run planned for this event id")
    p.set_defaults(func=cmd_flow_run)

    event = sub.add_parser("event", help="change events").add_subparsers(dest="event_command", required=True)
    p = event.add_parser("emit", parents=[common], help="ingest a change event")
    p.add_argument("--source", required=True, choices=["code", "data", "dependencies", "deployment"])
    p.add_argument("--ref", required=True, help="branch or tag the change landed on")
    p.add_argument("--version", required=True)
    p.add_argument("--content", help="content hash backing the new version")
    p.add_argument("--id", help="caller-supplied event id (defaults to a fresh one)")
    p.set_defaults(func=cmd_event_emit)

    run = sub.add_parser("run", help="experiment runs").add_subparsers(dest="run_command", required=True)
    p = run.add_parser("ls", parents=[common], help="list runs")
    p.set_defaults(func=cmd_run_ls)
    p = run.add_parser("show", parents=[common], help="show one run")
    p.add_argument("run_id")
    p.set_defaults(func=cmd_run_show)
    p = run.add_parser("diff", parents=[common], help="compare two aligned runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_run_diff)

    gate = sub.add_parser("gate", help="promotion gate").add_subparsers(dest="gate_command", required=True)
    p = gate.add_parser("eval", parents=[common], help="evaluate the gate policy for a run")
    p.add_argument("run_id")
    p.set_defaults(func=cmd_gate_eval)

    p = sub.add_parser("approve", parents=[common], help="approve a validation run")
    p.add_argument("run_id")
    p.add_argument("--by", required=True, help="approver identity")
    p.add_argument("--auto-release", action="store_true", help="run the release immediately")
    p.add_argument("--flow", help="flow manifest for --auto-release")
    p.set_defaults(func=cmd_approve)

    p = sub.add_parser("reject", parents=[common], help="reject a validation run")
    p.add_argument("run_id")
    p.add_argument("--by", required=True)
    p.add_argument("--reason", required=True)
    p.set_defaults(func=cmd_reject)

    p = sub.add_parser("release", parents=[common], help="run the release for an approved run")
    p.add_argument("run_id")
    p.add_argument("--flow", help="flow manifest (defaults to config flow_manifest)")
    p.set_defaults(func=cmd_release)

    lineage = sub.add_parser("lineage", help="provenance queries").add_subparsers(
        dest="lineage_command", required=True
    )
    p = lineage.add_parser("who-uses", parents=[common], help="runs consuming or pinning an artifact")
    p.add_argument("artifact")
    p.set_defaults(func=cmd_lineage_who_uses)
    p = lineage.add_parser("provenance", parents=[common], help="upstream closure of an artifact")
    p.add_argument("artifact")
    p.set_defaults(func=cmd_lineage_provenance)

    p = sub.add_parser("replay", parents=[common], help="re-execute a run and compare outputs")
    p.add_argument("run_id")
    p.add_argument("--flow", help="flow manifest (defaults to config flow_manifest)")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except StorageError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 3
    except EngineError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
