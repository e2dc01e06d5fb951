import numpy as np
import pytest

from vgcn.graph import GraphSpec
from vgcn.rng import RandomStream

_ACCEPTANCE: dict = {}
_DETAILS: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome = _ACCEPTANCE[name]
        detail = _DETAILS.get(name, "")
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {detail}".rstrip())


@pytest.fixture
def measured(request):
    """Record the measured quantity of an acceptance check for the summary line."""
    name = request.node.name

    def note(text: str):
        _DETAILS[name] = (_DETAILS.get(name, "") + " " + text).strip()

    return note


@pytest.fixture
def rng():
    return RandomStream(1234)


def random_tree(n: int, seed: int) -> GraphSpec:
    g = np.random.default_rng(seed)
    edges = [(int(g.integers(0, j)), j) for j in range(1, n)]
    perm = g.permutation(n)
    return GraphSpec.from_edges(n, [(int(perm[u]), int(perm[v])) for u, v in edges])


def random_graph(n: int, p: float, seed: int) -> GraphSpec:
    g = np.random.default_rng(seed)
    upper = np.triu((g.random((n, n)) < p).astype(float), 1)
    return GraphSpec(upper + upper.T)
