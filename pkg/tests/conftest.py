from pathlib import Path

import numpy as np
import pytest

from colnet.relgraph import generate_synthetic, load_graph, load_splits, standardize

DATA = Path(__file__).parent / "data"
CHAIN4 = DATA / "chain4"

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def chain4():
    return load_graph(CHAIN4 / "nodes.tsv", CHAIN4 / "edges.tsv", CHAIN4 / "labels.tsv")


@pytest.fixture
def chain4_split(chain4):
    return load_splits(chain4, CHAIN4 / "splits.tsv")


@pytest.fixture(scope="session")
def small_synth():
    g, split = generate_synthetic(n=240, r_types=2, homophily=0.9, feature_noise=2.0,
                                  classes=3, seed=3)
    return standardize(g)[0], split


def random_graph(rng, n, r_types, m, p=0.3, labels=3, head_kind="multiclass"):
    """Dense-ish random multi-relational graph for property tests."""
    from colnet.relgraph import RelGraph

    edges = [(s, d, r) for r in range(r_types) for d in range(n) for s in range(n)
             if s != d and rng.random() < p]
    Y = np.zeros((n, labels))
    if head_kind == "multiclass":
        Y[np.arange(n), rng.integers(labels, size=n)] = 1.0
    else:
        Y = (rng.random((n, labels)) < 0.4).astype(float)
    return RelGraph([f"v{k}" for k in range(n)], rng.normal(size=(n, m)),
                    [f"r{r}" for r in range(r_types)],
                    np.array(edges, dtype=np.int64).reshape(-1, 3),
                    [f"l{k}" for k in range(labels)], Y, np.ones(n, dtype=bool), head_kind)
