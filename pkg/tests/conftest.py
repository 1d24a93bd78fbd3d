from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from foam.data import build_corpus
from foam.world import EnvironmentGraph, WorldConfig

settings.register_profile("repo", deadline=None, derandomize=True, print_blob=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[int, str] = {}
_criterion_titles: dict[int, str] = {}
_criterion_notes: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _criterion_titles[n] = title
    if rep.when == "call":
        _criterion_notes[n] = [v for k, v in item.user_properties if k == "measured"]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        if rep.failed:
            _criteria[n] = "FAIL"
        elif rep.skipped:
            _criteria.setdefault(n, "SKIP")
        else:
            _criteria.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {_criteria[n]}  {_criterion_titles[n]}")
        for note in _criterion_notes.get(n, []):
            terminalreporter.write_line(f"    {note}")


# ---------------------------------------------------------------- small worlds

def line_env(n: int = 2, tags=None, feature_dim: int = 4, seed: int = 0,
             env_id: str = "line", split: str = "train") -> EnvironmentGraph:
    """``n`` nodes in a west-to-east row."""
    rng = np.random.default_rng(seed)
    tags = tuple(tags) if tags is not None else ("red",) * n
    return EnvironmentGraph(
        env_id=env_id, split=split, grid=n,
        positions=tuple((0, i) for i in range(n)), tags=tags,
        features=rng.normal(size=(n, feature_dim)).astype(np.float32),
        edges=tuple((i, i + 1) for i in range(n - 1)))


def grid_env(n: int = 3, feature_dim: int = 4, seed: int = 0, env_id: str = "grid",
             tags=None) -> EnvironmentGraph:
    """Fully connected ``n`` x ``n`` lattice."""
    rng = np.random.default_rng(seed)
    edges = []
    for r in range(n):
        for c in range(n):
            if c + 1 < n:
                edges.append((r * n + c, r * n + c + 1))
            if r + 1 < n:
                edges.append((r * n + c, (r + 1) * n + c))
    tags = tuple(tags) if tags is not None else tuple(
        ("red", "blue", None)[i % 3] for i in range(n * n))
    return EnvironmentGraph(
        env_id=env_id, split="train", grid=n,
        positions=tuple((i // n, i % n) for i in range(n * n)), tags=tags,
        features=rng.normal(size=(n * n, feature_dim)).astype(np.float32),
        edges=tuple(edges))


@pytest.fixture(scope="session")
def small_corpus():
    """A few 3x3 environments with short routes; cheap enough for unit tests."""
    return build_corpus(0, (2, 1, 1), 8, WorldConfig(grid=3, feature_dim=6), bounds=(2, 5))
