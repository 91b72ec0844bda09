"""Graph pooling by greedy aggregation, plus the eigenvector polarity split.

Each level groups fine vertices into aggregates.  ``R`` averages a fine
signal over each aggregate (rows sum to one) and ``P`` copies a coarse value
back to every member of its aggregate, so ``R @ P`` is the identity.  The
gradient of pooling is the exact adjoint ``R.T``, which is ``P`` with its
columns rescaled to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from gcnn.errors import CoarseningStall, InvalidArgument
from gcnn.graph import Graph
from gcnn.spectral import SpectralBasis


@dataclass(frozen=True, eq=False)
class CoarseningLevel:
    fine_graph: Graph
    coarse_graph: Graph
    R: np.ndarray
    P: np.ndarray
    aggregate_map: np.ndarray

    @property
    def aggregate_sizes(self) -> np.ndarray:
        return np.bincount(self.aggregate_map, minlength=self.coarse_graph.n)


@dataclass(frozen=True, eq=False)
class CoarseningHierarchy:
    levels: list[CoarseningLevel]
    composed_R: np.ndarray = field(init=False)
    composed_P: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.levels:
            raise InvalidArgument("a hierarchy needs at least one level")
        for prev, nxt in zip(self.levels, self.levels[1:]):
            if prev.coarse_graph.n != nxt.fine_graph.n:
                raise InvalidArgument("hierarchy levels do not chain")
        R = reduce(lambda acc, lvl: lvl.R @ acc, self.levels[1:], self.levels[0].R)
        P = reduce(lambda acc, lvl: acc @ lvl.P, self.levels[1:], self.levels[0].P)
        R.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "composed_R", R)
        object.__setattr__(self, "composed_P", P)

    @property
    def fine_graph(self) -> Graph:
        return self.levels[0].fine_graph

    @property
    def coarse_graph(self) -> Graph:
        return self.levels[-1].coarse_graph

    @property
    def fine_n(self) -> int:
        return self.fine_graph.n

    @property
    def coarse_n(self) -> int:
        return self.coarse_graph.n

    def aggregate_of(self) -> np.ndarray:
        """Final-level aggregate id of every fine vertex."""
        out = self.levels[0].aggregate_map
        for lvl in self.levels[1:]:
            out = lvl.aggregate_map[out]
        return out


def _visit_order(degrees: np.ndarray, rng=None) -> np.ndarray:
    n = degrees.size
    tiebreak = np.arange(n) if rng is None else rng.permutation(n)
    return np.lexsort((tiebreak, -degrees))


def aggregate(g: Graph, beta: float, rng=None) -> np.ndarray:
    """Greedy strength-of-connection aggregation; returns vertex -> aggregate id.

    Vertices are visited by descending weighted degree (index breaks ties,
    or a random permutation when ``rng`` is given).  An unassigned vertex
    opens a new aggregate and pulls in every unassigned neighbour j with
    ``w_ij >= beta * max_k w_ik``.
    """
    w = g.adjacency
    rowmax = w.max(axis=1)
    agg = np.full(g.n, -1, dtype=np.int64)
    next_id = 0
    for v in _visit_order(g.degrees, rng):
        if agg[v] >= 0:
            continue
        agg[v] = next_id
        if rowmax[v] > 0:
            strong = (w[v] >= beta * rowmax[v]) & (w[v] > 0) & (agg < 0)
            agg[strong] = next_id
        next_id += 1
    return agg


def coarsen_once(g: Graph, beta: float, rng=None) -> CoarseningLevel:
    agg = aggregate(g, beta, rng)
    n_coarse = int(agg.max()) + 1
    if n_coarse >= g.n:
        raise CoarseningStall(f"aggregation left {g.n} vertices unreduced (no strong edges?)")

    sizes = np.bincount(agg, minlength=n_coarse).astype(np.float64)
    P = np.zeros((g.n, n_coarse))
    P[np.arange(g.n), agg] = 1.0
    R = P.T / sizes[:, None]

    wc = R @ g.adjacency @ R.T
    wc = 0.5 * (wc + wc.T)
    np.fill_diagonal(wc, 0.0)
    coords = None if g.coords is None else R @ g.coords
    coarse = Graph(wc, coords=coords)
    return CoarseningLevel(g, coarse, R, P, agg)


def amg_coarsen(g: Graph, beta: float = 0.05, levels: int = 2, seed=None, random_ties: bool = False) -> CoarseningHierarchy:
    """Build ``levels`` successive aggregation levels starting from ``g``.

    The visit order is deterministic; ``seed`` is only used when
    ``random_ties`` is set.
    """
    if g.n < 2:
        raise InvalidArgument(f"cannot coarsen a graph with {g.n} vertex")
    if not 0.0 < beta < 1.0:
        raise InvalidArgument(f"beta must lie in (0, 1), got {beta}")
    if levels < 1:
        raise InvalidArgument(f"levels must be positive, got {levels}")
    rng = np.random.default_rng(seed) if random_ties else None
    out = []
    current = g
    for depth in range(levels):
        if current.n < 2:
            raise CoarseningStall(f"level {depth} has a single vertex; cannot coarsen further")
        lvl = coarsen_once(current, beta, rng)
        out.append(lvl)
        current = lvl.coarse_graph
    return CoarseningHierarchy(out)


def _check(h: CoarseningHierarchy, x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n:
        raise InvalidArgument(f"{what} has {x.shape[-1]} vertices, expected {n}")
    return x


def pool_forward(h: CoarseningHierarchy, f) -> np.ndarray:
    """Restrict every signal (last axis) to the coarsest graph."""
    return _check(h, f, h.fine_n, "signal") @ h.composed_R.T


def pool_backward(h: CoarseningHierarchy, dcoarse) -> np.ndarray:
    """Gradient of ``pool_forward``: apply ``R.T`` to the coarse gradient."""
    return _check(h, dcoarse, h.coarse_n, "gradient") @ h.composed_R


def unpool(h: CoarseningHierarchy, coarse) -> np.ndarray:
    """Copy coarse values back to the fine vertices with ``P``."""
    return _check(h, coarse, h.coarse_n, "signal") @ h.composed_P.T


def polarity_split(basis: SpectralBasis) -> tuple[np.ndarray, np.ndarray]:
    """Split vertices by the sign of the top eigenvector.

    Returns ``(kept, complement)`` where kept holds the vertices with a
    non-negative entry.  If the top eigenvalue is 0 (edgeless graph) the
    split is whatever the sign convention produces, typically everything
    kept.
    """
    if basis.n < 2:
        raise InvalidArgument("polarity split needs at least two vertices")
    top = basis.U[:, -1]
    return np.flatnonzero(top >= 0), np.flatnonzero(top < 0)
