import numpy as np
import pytest
from hypothesis import settings

from stainpool.graph import PatientGraph, build_feature_knn, build_region_adjacency, merge_graphs

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_graph(rng, n=10, d=4, stains=("A", "B"), k=2, grid=5):
    """A small multistain graph with both edge families."""
    x = rng.normal(size=(n, d))
    st = np.array([stains[i % len(stains)] for i in range(n)])
    stack = np.array([stains.index(s) for s in st], dtype=np.int64)
    slides = np.array([f"s-{s}" for s in st])
    coords = rng.integers(0, grid, size=(n, 2)).astype(float)
    fs = build_feature_knn(x, k)
    ra = build_region_adjacency(coords, slides, stack, k)
    return merge_graphs(fs, ra, x, st, slides, stack, coords, patient_id="p")


def path_graph(n, d=1):
    edges = np.array([(i, i + 1) for i in range(n - 1)], dtype=np.int64).reshape(-1, 2)
    return PatientGraph(
        features=np.ones((n, d)),
        stains=np.array(["A"] * n),
        slide_ids=np.array(["s"] * n),
        stack_index=np.zeros(n, dtype=np.int64),
        coords=np.zeros((n, 2)),
        edges=edges,
        edge_types=np.full(len(edges), 2, dtype=np.int8),
    )


def cycle_edges(n, length):
    return np.array(
        [sorted((s + j, s + (j + 1) % length)) for s in range(0, n, length) for j in range(length)],
        dtype=np.int64,
    )


def cycle_graph(n, length, d=1):
    e = cycle_edges(n, length)
    return PatientGraph(
        features=np.ones((n, d)),
        stains=np.array(["A"] * n),
        slide_ids=np.array(["s"] * n),
        stack_index=np.zeros(n, dtype=np.int64),
        coords=np.zeros((n, 2)),
        edges=e[np.lexsort((e[:, 1], e[:, 0]))],
        edge_types=np.full(len(e), 2, dtype=np.int8),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, echoed once more at the end of the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
