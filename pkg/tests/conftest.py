from __future__ import annotations

import json
import sys
from datetime import datetime
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaptmem.llm import Gateway, ScriptedBackend
from adaptmem.pipeline import MemoryEngine, PipelineConfig
from adaptmem.store import MemoryStore, StoreConfig

DIM = 16
NOW = datetime(2024, 1, 1, 12, 0, 0)


@pytest.fixture
def store(tmp_path):
    s = MemoryStore(StoreConfig(tmp_path / "store", DIM, fsync=False))
    yield s
    s.close()


def make_engine(path, backend: ScriptedBackend, *, dim: int = DIM, retention=None, **cfg) -> MemoryEngine:
    store = MemoryStore(StoreConfig(path, dim, retention, cfg.get("k_min", 5), fsync=False))
    gw = Gateway(backend, dim=dim)
    return MemoryEngine(store, gw, PipelineConfig(**cfg), clock=lambda: NOW, timer=lambda: 0.0)


def js(obj) -> str:
    return json.dumps(obj)


# --- acceptance reporting ------------------------------------------------------------
# Tests marked ``@pytest.mark.acceptance(name, budget_s)`` get one summary line each.

ACCEPTANCE_RESULTS: list[tuple[str, str, float, float]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        name, budget = mark.args
        ACCEPTANCE_RESULTS.append(("PASS" if rep.passed else "FAIL", name, rep.duration, budget))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, took, budget in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status}  {name}  ({took:.2f}s, budget {budget:g}s)")
    passed = sum(s == "PASS" for s, *_ in ACCEPTANCE_RESULTS)
    terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE_RESULTS)} acceptance criteria passed")
