"""Element centers and the three neighbor sources: visual, DOM tree, random."""

from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .document import BBox, HtmlDocument


class NeighborSource(str, Enum):
    VISUAL = "visual"
    TREE = "tree"
    RANDOM = "random"


class NeighborError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborList:
    candidate_id: str
    neighbors: tuple[tuple[str, float], ...]
    source: NeighborSource

    @property
    def ids(self) -> list[str]:
        return [n for n, _ in self.neighbors]

    def __len__(self) -> int:
        return len(self.neighbors)


def center(b: BBox) -> tuple[float, float]:
    return b.x + b.w / 2, b.y + b.h / 2


def _visible_candidate(doc: HtmlDocument, candidate_id: str) -> int:
    if candidate_id not in doc:
        raise NeighborError(f"unknown candidate id {candidate_id!r}")
    idx = doc.index[candidate_id]
    if not doc.elements[idx].visible:
        raise NeighborError(f"candidate {candidate_id!r} is not visible")
    return idx


def visual_neighbors(doc: HtmlDocument, candidate_id: str, M: int) -> NeighborList:
    """The ``M`` visible elements whose centers are closest to the candidate's.

    Ties keep document order.
    """
    if M < 0:
        raise NeighborError("M must be >= 0")
    idx = _visible_candidate(doc, candidate_id)
    if M == 0:
        return NeighborList(candidate_id, (), NeighborSource.VISUAL)
    c = doc.centers
    # |a - b| per axis, so d(a, b) == d(b, a) bit for bit
    d = np.hypot(np.abs(c[:, 0] - c[idx, 0]), np.abs(c[:, 1] - c[idx, 1]))
    pool = np.array(
        [i for i, e in enumerate(doc.elements) if e.visible and i != idx], dtype=np.intp
    )
    if pool.size == 0:
        return NeighborList(candidate_id, (), NeighborSource.VISUAL)
    order = pool[np.argsort(d[pool], kind="stable")][:M]
    return NeighborList(
        candidate_id,
        tuple((doc.elements[i].id, float(d[i])) for i in order),
        NeighborSource.VISUAL,
    )


def has_tree_links(doc: HtmlDocument) -> bool:
    roots = sum(1 for e in doc.elements if e.parent is None)
    return roots == 1


def tree_neighbors(doc: HtmlDocument, candidate_id: str, M: int) -> NeighborList:
    """The ``M`` elements nearest in undirected DOM-tree hops (BFS)."""
    if M < 0:
        raise NeighborError("M must be >= 0")
    if candidate_id not in doc:
        raise NeighborError(f"unknown candidate id {candidate_id!r}")
    if not has_tree_links(doc):
        raise NeighborError("document lacks parent links (expected a single-rooted tree)")
    adj: list[list[int]] = [[] for _ in doc.elements]
    for i, e in enumerate(doc.elements):
        if e.parent is not None:
            p = doc.index[e.parent]
            adj[i].append(p)
            adj[p].append(i)
    start = doc.index[candidate_id]
    hops = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in hops:
                hops[v] = hops[u] + 1
                queue.append(v)
    found = sorted((h, i) for i, h in hops.items() if i != start)[:M]
    return NeighborList(
        candidate_id,
        tuple((doc.elements[i].id, float(h)) for h, i in found),
        NeighborSource.TREE,
    )


def random_neighbors(doc: HtmlDocument, candidate_id: str, M: int, seed: int) -> NeighborList:
    """``M`` distinct visible elements other than the candidate, seeded draw without replacement."""
    if M < 0:
        raise NeighborError("M must be >= 0")
    idx = _visible_candidate(doc, candidate_id)
    pool = [i for i, e in enumerate(doc.elements) if e.visible and i != idx]
    rng = np.random.default_rng(seed)
    picked = rng.permutation(len(pool))[: min(M, len(pool))]
    return NeighborList(
        candidate_id,
        tuple((doc.elements[pool[j]].id, 0.0) for j in picked),
        NeighborSource.RANDOM,
    )


def candidate_seed(seed: int, candidate_id: str) -> int:
    """Stable per-candidate seed for the random neighbor source."""
    return (seed * 1_000_003 + zlib.crc32(candidate_id.encode())) % (2**63)


def neighbors(
    doc: HtmlDocument,
    candidate_id: str,
    M: int,
    source: NeighborSource | str = NeighborSource.VISUAL,
    seed: int = 0,
) -> NeighborList:
    source = NeighborSource(source)
    if source is NeighborSource.VISUAL:
        return visual_neighbors(doc, candidate_id, M)
    if source is NeighborSource.TREE:
        return tree_neighbors(doc, candidate_id, M)
    return random_neighbors(doc, candidate_id, M, candidate_seed(seed, candidate_id))
