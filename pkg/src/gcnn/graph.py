"""Weighted undirected graphs, grid construction, subsampling and Laplacians.

Adjacency is stored dense; every graph in this package has at most a few
thousand vertices.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph

from gcnn.errors import FormatError, InvalidArgument

WEIGHT_MODES = ("binary", "euclidean")


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, non-negative, self-loop-free weighted graph.

    ``vertex_labels`` maps each vertex to its id in the graph it was cut
    from (identity for freshly built graphs).  ``coords`` holds optional
    planar positions, used only for reporting.
    """

    adjacency: np.ndarray
    vertex_labels: np.ndarray | None = None
    coords: np.ndarray | None = None

    def __post_init__(self):
        w = np.array(self.adjacency, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise InvalidArgument(f"adjacency must be a non-empty square matrix, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgument("adjacency has non-finite entries")
        if np.any(w < 0):
            raise InvalidArgument("negative edge weights are not supported")
        if np.any(np.diag(w) != 0):
            raise InvalidArgument("self-loops are not allowed")
        if not np.array_equal(w, w.T):
            raise InvalidArgument("adjacency must be symmetric")
        w.setflags(write=False)
        object.__setattr__(self, "adjacency", w)

        n = w.shape[0]
        labels = np.arange(n) if self.vertex_labels is None else np.asarray(self.vertex_labels, dtype=np.int64)
        if labels.shape != (n,):
            raise InvalidArgument("vertex_labels length must equal vertex count")
        labels.setflags(write=False)
        object.__setattr__(self, "vertex_labels", labels)

        if self.coords is not None:
            c = np.array(self.coords, dtype=np.float64)
            if c.shape[0] != n:
                raise InvalidArgument("coords must have one row per vertex")
            c.setflags(write=False)
            object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self):
        """Yield ``(i, j, w)`` once per unordered pair, ``i < j``."""
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        for i, j in zip(rows, cols):
            yield int(i), int(j), float(self.adjacency[i, j])

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, k=1)))

    def num_components(self) -> int:
        return int(csgraph.connected_components(self.adjacency, directed=False)[0])

    def hop_distances(self, source: int) -> np.ndarray:
        """Unweighted shortest-path lengths from ``source`` (inf if unreachable)."""
        return csgraph.shortest_path(self.adjacency > 0, unweighted=True, indices=source, directed=False)


def build_grid_graph(rows: int, cols: int, weight_mode: str = "binary", spacing: float = 1.0) -> Graph:
    """4-neighbour (Von Neumann) grid graph with vertices in row-major order.

    ``weight_mode="binary"`` puts weight 1 on every edge; ``"euclidean"``
    uses the distance between neighbouring cells, which equals ``spacing``.
    """
    if rows < 1 or cols < 1:
        raise InvalidArgument(f"grid dimensions must be positive, got {rows}x{cols}")
    if weight_mode not in WEIGHT_MODES:
        raise InvalidArgument(f"unknown weight mode {weight_mode!r}")
    w_edge = 1.0 if weight_mode == "binary" else float(spacing)

    n = rows * cols
    w = np.zeros((n, n))
    idx = np.arange(n).reshape(rows, cols)
    right = (idx[:, :-1].ravel(), idx[:, 1:].ravel())
    down = (idx[:-1, :].ravel(), idx[1:, :].ravel())
    for a, b in (right, down):
        w[a, b] = w_edge
        w[b, a] = w_edge
    rr, cc = np.divmod(np.arange(n), cols)
    coords = np.column_stack([rr, cc]).astype(np.float64) * spacing
    return Graph(w, coords=coords)


def subsample_graph(g: Graph, exclude_count: int, seed=None) -> tuple[Graph, np.ndarray]:
    """Remove ``exclude_count`` uniformly chosen vertices and their edges.

    Returns the reduced graph and ``kept_indices`` (new id -> old id,
    ascending).  The result may be disconnected.
    """
    if not 0 <= exclude_count < g.n:
        raise InvalidArgument(f"exclude_count must lie in [0, {g.n}), got {exclude_count}")
    rng = np.random.default_rng(seed)
    excluded = rng.choice(g.n, size=exclude_count, replace=False)
    keep = np.ones(g.n, dtype=bool)
    keep[excluded] = False
    kept = np.flatnonzero(keep)
    return restrict_graph(g, kept), kept


def restrict_graph(g: Graph, kept: np.ndarray) -> Graph:
    """Induced subgraph on ``kept`` vertex ids."""
    kept = np.asarray(kept, dtype=np.int64)
    if kept.size == 0 or kept.min() < 0 or kept.max() >= g.n:
        raise InvalidArgument("kept indices out of range")
    coords = None if g.coords is None else g.coords[kept]
    return Graph(g.adjacency[np.ix_(kept, kept)], vertex_labels=g.vertex_labels[kept], coords=coords)


def laplacian(g: Graph) -> np.ndarray:
    """Unnormalized Laplacian ``D - W``."""
    w = g.adjacency
    lap = np.diag(w.sum(axis=1)) - w
    lap.setflags(write=False)
    return lap


def write_edge_list(g: Graph, path) -> None:
    """Plain-text edge list: ``N`` on the first line, then ``i j w`` per edge."""
    lines = [str(g.n)]
    lines += [f"{i} {j} {w!r}" for i, j, w in g.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    text = Path(path).read_text().split("\n")
    try:
        n = int(text[0].strip())
    except (ValueError, IndexError):
        raise FormatError(f"{path}: first line must hold the vertex count") from None
    if n < 1:
        raise FormatError(f"{path}: vertex count must be positive")
    w = np.zeros((n, n))
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            i, j, wt = int(parts[0]), int(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise FormatError(f"{path}:{lineno}: expected 'i j w'") from None
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise FormatError(f"{path}:{lineno}: bad vertex pair {i} {j}")
        w[i, j] = w[j, i] = wt
    try:
        return Graph(w)
    except InvalidArgument as exc:
        raise FormatError(f"{path}: {exc}") from None
