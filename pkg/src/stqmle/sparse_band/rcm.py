"""Reverse Cuthill-McKee ordering."""

from collections import deque

import numpy as np

from .matrices import Permutation, SymSparseMatrix


def _adjacency(w: SymSparseMatrix):
    csr = w.csr
    n = w.dim
    nbrs = []
    for i in range(n):
        cols = csr.indices[csr.indptr[i] : csr.indptr[i + 1]]
        nbrs.append(cols[cols != i])
    degree = np.array([c.size for c in nbrs], dtype=np.int64)
    return nbrs, degree


def _levels(start, nbrs, allowed):
    """BFS level structure from ``start`` restricted to ``allowed`` vertices."""
    seen = {start}
    levels = [[start]]
    while True:
        nxt = []
        for v in levels[-1]:
            for u in nbrs[v]:
                u = int(u)
                if u not in seen and allowed[u]:
                    seen.add(u)
                    nxt.append(u)
        if not nxt:
            return levels
        levels.append(nxt)


def _pseudo_peripheral(comp, nbrs, degree, allowed):
    """George-Liu search; ties go to the lowest vertex index."""
    start = min(comp, key=lambda v: (degree[v], v))
    levels = _levels(start, nbrs, allowed)
    while True:
        cand = min(levels[-1], key=lambda v: (degree[v], v))
        cand_levels = _levels(cand, nbrs, allowed)
        if len(cand_levels) <= len(levels):
            return start
        start, levels = cand, cand_levels


def _cuthill_mckee(start, nbrs, degree, visited):
    order = [start]
    visited[start] = True
    queue = deque([start])
    while queue:
        v = queue.popleft()
        fresh = [int(u) for u in nbrs[v] if not visited[u]]
        fresh.sort(key=lambda u: (degree[u], u))
        for u in fresh:
            visited[u] = True
            order.append(u)
            queue.append(u)
    return order


def rcm_order(w: SymSparseMatrix) -> Permutation:
    """Deterministic RCM permutation.

    Connected components are laid out in ascending order of their smallest
    vertex; each component is reversed on its own.
    """
    n = w.dim
    if n == 0:
        return Permutation(np.zeros(0, dtype=np.int64))
    nbrs, degree = _adjacency(w)
    visited = np.zeros(n, dtype=bool)
    out = []
    for root in range(n):
        if visited[root]:
            continue
        in_comp = np.zeros(n, dtype=bool)
        comp = [v for level in _levels(root, nbrs, ~visited) for v in level]
        in_comp[comp] = True
        start = _pseudo_peripheral(comp, nbrs, degree, in_comp)
        order = _cuthill_mckee(start, nbrs, degree, visited)
        out.extend(reversed(order))
    return Permutation(np.asarray(out, dtype=np.int64))


def bandwidth_of(w: SymSparseMatrix, p: Permutation | None = None) -> int:
    """Bandwidth of ``w`` after relabelling by ``p``."""
    coo = w.csr.tocoo()
    if coo.nnz == 0:
        return 0
    if p is None:
        return int(np.max(np.abs(coo.row - coo.col)))
    pos = p.inverse
    return int(np.max(np.abs(pos[coo.row] - pos[coo.col])))
