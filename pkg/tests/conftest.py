from __future__ import annotations

import pytest

from ca_engine.lineage import LineageLog
from ca_engine.pipeline import Pipeline
from ca_engine.repo import Repository
from ca_engine.store import ArtifactStore
from ca_engine.tuples import RunStore


@pytest.fixture
def repo(tmp_path):
    repo = Repository(tmp_path / ".ca")
    repo.init()
    return repo


@pytest.fixture
def store(repo):
    return ArtifactStore(repo)


@pytest.fixture
def run_store(repo, store):
    return RunStore(repo, store)


@pytest.fixture
def lineage_log(repo):
    return LineageLog(repo)


@pytest.fixture
def pipeline(repo, store, run_store, lineage_log):
    return Pipeline(repo, store, run_store, lineage_log)
