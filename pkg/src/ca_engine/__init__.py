"""Local-first continuous analysis engine.

Binds every experiment run to an immutable artifact version tuple, executes
experiment flows as DAGs with partitioned steps, routes change events into
validation and release pipelines, collects per-step feedback, and answers
lineage and replay queries.
"""

__version__ = "0.1.0"
