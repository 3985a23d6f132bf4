import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import el, random_document
from dualvcr.document import BBox, HtmlDocument
from dualvcr.spatial import (
    NeighborError,
    NeighborSource,
    center,
    neighbors,
    random_neighbors,
    tree_neighbors,
    visual_neighbors,
)
from oracles import bfs_order, brute_neighbors


@pytest.mark.parametrize(
    "box, c",
    [((10, 20, 4, 6), (12, 23)), ((0, 0, 0, 0), (0, 0)), ((-5, 2, 10, 2), (0, 3))],
)
def test_center(box, c):
    assert center(BBox(*map(float, box))) == c


def test_single_nearest():
    doc = HtmlDocument((el("a", x=0), el("b", x=10), el("c", x=100)))
    nl = visual_neighbors(doc, "a", 1)
    assert nl.neighbors == (("b", 10.0),)


def test_ties_keep_document_order():
    doc = HtmlDocument((el("A", x=0, y=0), el("B", x=1, y=0), el("C", x=0, y=1), el("D", x=1, y=1)))
    assert visual_neighbors(doc, "A", 2).ids == ["B", "C"]


def test_m_zero_and_errors():
    doc = HtmlDocument((el("a"), el("b"), el("h", visible=False)))
    assert len(visual_neighbors(doc, "a", 0)) == 0
    with pytest.raises(NeighborError):
        visual_neighbors(doc, "a", -1)
    with pytest.raises(NeighborError):
        visual_neighbors(doc, "zz", 1)
    with pytest.raises(NeighborError, match="not visible"):
        visual_neighbors(doc, "h", 1)


def test_invisible_elements_excluded():
    doc = HtmlDocument((el("a"), el("h", x=1, visible=False), el("b", x=5)))
    assert visual_neighbors(doc, "a", 5).ids == ["b"]


def test_tree_parent_before_sibling():
    doc = HtmlDocument((el("P"), el("A", parent="P"), el("B", parent="P")))
    assert tree_neighbors(doc, "A", 1).ids == ["P"]
    assert tree_neighbors(doc, "A", 2).neighbors == (("P", 1.0), ("B", 2.0))


def test_tree_root_only():
    assert len(tree_neighbors(HtmlDocument((el("R"),)), "R", 3)) == 0


def test_tree_chain():
    doc = HtmlDocument((el("R"), el("X", parent="R"), el("Y", parent="X")))
    assert tree_neighbors(doc, "Y", 2).ids == ["X", "R"]


def test_tree_rejects_parentless():
    doc = HtmlDocument((el("a"), el("b")))
    with pytest.raises(NeighborError, match="parent links"):
        tree_neighbors(doc, "a", 1)


@pytest.mark.parametrize("n", [1, 2, 7, 50])
def test_tree_path_graph_matches_bfs(n):
    rng = np.random.default_rng(n)
    parents = {"v0": None}
    for i in range(1, n):
        parents[f"v{i}"] = f"v{i - 1}"
    doc = HtmlDocument(tuple(el(k, parent=p) for k, p in parents.items()))
    for start in rng.choice(n, size=min(n, 5), replace=False):
        cid = f"v{start}"
        assert tree_neighbors(doc, cid, n).ids == bfs_order(parents, cid, n)


def test_tree_random_forest_matches_bfs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        parents = {"v0": None}
        for i in range(1, n):
            parents[f"v{i}"] = f"v{int(rng.integers(0, i))}"
        doc = HtmlDocument(tuple(el(k, parent=p) for k, p in parents.items()))
        cid = f"v{int(rng.integers(0, n))}"
        M = int(rng.integers(0, n + 1))
        assert tree_neighbors(doc, cid, M).ids == bfs_order(parents, cid, M)


def test_random_deterministic_and_exhaustive():
    doc = HtmlDocument(tuple(el(f"e{i}", visible=i != 3) for i in range(8)))
    a = random_neighbors(doc, "e0", 3, seed=11)
    assert a == random_neighbors(doc, "e0", 3, seed=11)
    assert all(d == 0.0 for _, d in a.neighbors)
    full = random_neighbors(doc, "e0", 20, seed=5)
    assert sorted(full.ids) == sorted(f"e{i}" for i in (1, 2, 4, 5, 6, 7))


def test_dispatch_per_candidate_seed():
    doc = HtmlDocument(tuple(el(f"e{i}") for i in range(10)))
    assert neighbors(doc, "e1", 3, "random", 4) == neighbors(doc, "e1", 3, NeighborSource.RANDOM, 4)
    assert neighbors(doc, "e1", 3, "visual").source is NeighborSource.VISUAL


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(0, 12), st.booleans())
def test_visual_matches_brute_force(seed, n, M, snapped):
    rng = np.random.default_rng(seed)
    doc = random_document(rng, n, grid=4 if snapped else None)
    visible = [e.id for e in doc.elements if e.visible]
    cid = visible[int(rng.integers(len(visible)))]
    nl = visual_neighbors(doc, cid, M)
    ids, dists = brute_neighbors(doc, cid, M)
    assert nl.ids == ids
    assert [d for _, d in nl.neighbors] == dists
    # structural invariants
    assert cid not in nl.ids and len(set(nl.ids)) == len(nl.ids) and len(nl) <= M
    ds = [d for _, d in nl.neighbors]
    assert ds == sorted(ds)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_distance_symmetry(seed, n):
    rng = np.random.default_rng(seed)
    doc = HtmlDocument(tuple(el(f"e{i}", x=rng.uniform(-1e3, 1e3), y=rng.uniform(-1e3, 1e3), w=rng.uniform(0, 9), h=1) for i in range(n)))
    d = {}
    for e in doc.elements:
        for nid, dist in visual_neighbors(doc, e.id, n).neighbors:
            d[(e.id, nid)] = dist
    for (a, b), v in d.items():
        assert d[(b, a)] == v


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(0, 40))
def test_random_source_invariants(seed, n, M):
    rng = np.random.default_rng(seed)
    doc = random_document(rng, n)
    cid = next(e.id for e in doc.elements if e.visible)
    nl = random_neighbors(doc, cid, M, seed)
    pool = {e.id for e in doc.elements if e.visible} - {cid}
    assert cid not in nl.ids and len(set(nl.ids)) == len(nl.ids)
    assert set(nl.ids) <= pool and len(nl) == min(M, len(pool))
