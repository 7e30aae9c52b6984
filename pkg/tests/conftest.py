import math
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True, scope="session")
def _fixed_clock():
    # manifests carry timestamps; pin them so repeated runs compare equal
    mp = pytest.MonkeyPatch()
    mp.setenv("SOURCE_DATE_EPOCH", "1700000000")
    yield
    mp.undo()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def binom_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def brute_dominates(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def brute_fronts(points) -> list[list[int]]:
    """Peel fronts by pairwise dominance, O(n^3)."""
    pts = [tuple(p) for p in points]
    left = set(range(len(pts)))
    fronts = []
    while left:
        front = sorted(i for i in left if not any(brute_dominates(pts[j], pts[i]) for j in left))
        fronts.append(front)
        left -= set(front)
    return fronts


_EXHAUSTIVE = {}


def exhaustive_reduced():
    """Objectives of every reduced-space phenotype and the indices of its Pareto set."""
    if not _EXHAUSTIVE:
        from ofa2.genotype import SearchSpace, enumerate_phenotypes
        from ofa2.pareto import pareto_filter
        from ofa2.surrogate import SyntheticEvaluator

        genes = enumerate_phenotypes(SearchSpace.reduced())
        objs = SyntheticEvaluator().evaluate_genes(genes)
        _EXHAUSTIVE.update(genes=genes, objs=objs, front=pareto_filter(objs))
    return _EXHAUSTIVE


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
