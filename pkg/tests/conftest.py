"""Shared fixtures: the mock gateway and a session-scoped built workdir.

The full offline build over tests/fixtures/corpus.jsonl takes a few seconds,
so it runs once per session; tests that mutate artifacts copy it first.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from stratarag.config import RunConfig
from stratarag.gateway import MockGateway
from stratarag.pipeline import BuildPipeline

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "corpus.jsonl"
QA_FILE = FIXTURES / "qa.jsonl"


def make_config(**overrides) -> RunConfig:
    base = dict(
        corpus_path=str(CORPUS),
        gateway_mode="mock",
        seed=0,
        workers=1,
        max_layers=3,
        min_nodes=10,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


@pytest.fixture()
def mock_gateway() -> MockGateway:
    return MockGateway(seed=0)


@pytest.fixture(scope="session")
def built_workdir(tmp_path_factory) -> Path:
    """One completed mock-mode build, shared read-only across the session."""
    workdir = tmp_path_factory.mktemp("built") / "workdir"
    pipeline = BuildPipeline(make_config(), workdir)
    pipeline.run()
    return workdir


@pytest.fixture()
def workdir_copy(built_workdir, tmp_path) -> Path:
    """Private mutable copy of the built workdir."""
    dest = tmp_path / "workdir"
    shutil.copytree(built_workdir, dest)
    return dest


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay acceptance verdict lines; capture would otherwise swallow them."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", []) if module else []
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
