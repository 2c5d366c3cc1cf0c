"""Experiment flow graphs: manifest parsing, validation, analysis, execution."""

from .executors import (
    ExecResult,
    ProcessExecutor,
    RecordingExecutor,
    StepExecutor,
    concat_merge,
    scripted,
)
from .graph import (
    DATA_MANIFEST_SLOT,
    ArtifactInput,
    FlowGraph,
    InputRef,
    Outcome,
    PartitionSpec,
    PinInput,
    StepInput,
    StepSpec,
    Violation,
    critical_artifacts,
    parse_manifest,
    to_dot,
    topo_order,
    validate,
)
from .runner import DataScope, execute

__all__ = [
    "ArtifactInput",
    "DATA_MANIFEST_SLOT",
    "DataScope",
    "ExecResult",
    "FlowGraph",
    "InputRef",
    "Outcome",
    "PartitionSpec",
    "PinInput",
    "ProcessExecutor",
    "RecordingExecutor",
    "StepExecutor",
    "StepInput",
    "StepSpec",
    "Violation",
    "concat_merge",
    "critical_artifacts",
    "execute",
    "parse_manifest",
    "scripted",
    "to_dot",
    "topo_order",
    "validate",
]
