"""Triangular mesh over the patch and the grid<->mesh assignment maps.

The mesh is a regular triangular lattice: rows spaced r*sqrt(3)/2 cells
apart with alternate rows offset by r/2, keeping every node inside the
patch bounding box.  Cells are assigned to their nearest node (ties to the
lowest node index); the same nearest-node assignment serves the encoder
(aggregation sets) and the decoder (per-cell source node + distance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ValidationError

_EDGE_TOL = 1e-6


@dataclass(frozen=True)
class Mesh:
    """Node positions in patch (row, col) coordinates plus connectivity.

    ``edges`` is undirected (a < b).  The directed arrays are derived views
    used by message passing: ``dir_src``/``dir_dst`` list each edge in both
    orientations sorted by destination, with segment starts per node;
    ``src_perm``/``src_starts``/``src_ids`` give the same directed edges
    grouped by source.
    """

    spacing: float
    positions: np.ndarray  # (N, 2) float, (row, col)
    edges: np.ndarray      # (E, 2) int, a < b
    dir_src: np.ndarray
    dir_dst: np.ndarray
    dst_starts: np.ndarray
    indegree: np.ndarray
    src_perm: np.ndarray
    src_starts: np.ndarray
    src_ids: np.ndarray

    def __post_init__(self):
        for name in ("positions", "edges", "dir_src", "dir_dst", "dst_starts",
                     "indegree", "src_perm", "src_starts", "src_ids"):
            a = np.ascontiguousarray(getattr(self, name))
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_directed(self) -> int:
        return self.dir_src.size

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def interior_nodes(self) -> np.ndarray:
        """Nodes at least one spacing away from the bounding box sides."""
        lo = self.spacing - _EDGE_TOL
        hi_r = self.positions[:, 0].max() - self.spacing + _EDGE_TOL
        hi_c = self.positions[:, 1].max() - self.spacing + _EDGE_TOL
        p = self.positions
        return np.nonzero((p[:, 0] >= lo) & (p[:, 0] <= hi_r)
                          & (p[:, 1] >= lo) & (p[:, 1] <= hi_c))[0]


def lattice_positions(side: int, r: float) -> np.ndarray:
    """Node positions of the triangular lattice inside [0, side-1]^2.

    Row k sits at row-coordinate k*r*sqrt(3)/2; odd rows are offset by r/2.
    Nodes are ordered row-major (by k, then column), which fixes node ids.
    """
    dy = r * np.sqrt(3.0) / 2.0
    rows = []
    k = 0
    while k * dy <= side - 1 + _EDGE_TOL:
        x0 = (r / 2.0) if (k % 2) else 0.0
        m = 0
        while x0 + m * r <= side - 1 + _EDGE_TOL:
            rows.append((k * dy, x0 + m * r))
            m += 1
        k += 1
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def build_mesh(side: int, r: float = 4.0) -> Mesh:
    """Construct the lattice mesh for a side x side patch.

    Nodes at lattice distance r (within 1e-6) are connected; the result is
    validated to be symmetric, self-loop free, connected, and of maximum
    degree 6.
    """
    if r < 1:
        raise ValidationError(f"mesh spacing must be >= 1 cell, got {r}")
    if r > side:
        raise ValidationError(f"mesh spacing {r} exceeds patch side {side}")
    pos = lattice_positions(side, r)
    n = pos.shape[0]

    d2 = np.sum((pos[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    close = np.abs(np.sqrt(d2) - r) <= _EDGE_TOL
    a, b = np.nonzero(np.triu(close, k=1))
    edges = np.stack([a, b], axis=1).astype(np.int64)

    deg = np.bincount(edges.ravel(), minlength=n)
    if n > 0 and deg.max(initial=0) > 6:
        raise ValidationError(f"lattice produced a node of degree {deg.max()}")

    # connectivity (BFS over the undirected edges)
    if n > 0:
        adj: list[list[int]] = [[] for _ in range(n)]
        for i, j in edges:
            adj[i].append(int(j))
            adj[j].append(int(i))
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            cur = stack.pop()
            for nxt in adj[cur]:
                if not seen[nxt]:
                    seen[nxt] = True
                    stack.append(nxt)
        if not seen.all():
            raise ValidationError("mesh graph is not connected")

    src = np.concatenate([edges[:, 0], edges[:, 1]]) if edges.size else np.zeros(0, np.int64)
    dst = np.concatenate([edges[:, 1], edges[:, 0]]) if edges.size else np.zeros(0, np.int64)
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    indeg = np.bincount(dst, minlength=n) if n else np.zeros(0, np.int64)
    dst_starts = np.concatenate([[0], np.cumsum(indeg)[:-1]]) if n else np.zeros(0, np.int64)

    src_perm = np.lexsort((dst, src))
    outdeg = np.bincount(src, minlength=n) if n else np.zeros(0, np.int64)
    src_starts_all = np.concatenate([[0], np.cumsum(outdeg)[:-1]]) if n else np.zeros(0, np.int64)
    src_ids = np.nonzero(outdeg > 0)[0]
    src_starts = src_starts_all[src_ids]

    return Mesh(float(r), pos, edges, src, dst,
                np.minimum(dst_starts, max(src.size - 1, 0)), indeg,
                src_perm, src_starts, src_ids)


@dataclass(frozen=True)
class GridMeshMap:
    """Nearest-node assignment for every patch cell (cells row-major).

    ``cell_order``/``node_starts``/``counts`` express the encoder partition
    in reduceat form; ``assign``/``distance`` are the decoder view.
    """

    side: int
    assign: np.ndarray      # (side*side,) node index
    distance: np.ndarray    # (side*side,) Euclidean distance in cells
    cell_order: np.ndarray
    node_starts: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        for name in ("assign", "distance", "cell_order", "node_starts", "counts"):
            a = np.ascontiguousarray(getattr(self, name))
            a.flags.writeable = False
            object.__setattr__(self, name, a)


def build_maps(mesh: Mesh, side: int) -> GridMeshMap:
    """Assign each cell to its nearest mesh node (ties: lowest node index)."""
    if mesh.n_nodes == 0:
        raise ValidationError("mesh has no nodes")
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    d2 = ((cells[:, None, :] - mesh.positions[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(cells.shape[0]), assign])
    if dist.max() > mesh.spacing + _EDGE_TOL:
        raise ValidationError(
            f"decoder distance {dist.max():.3f} exceeds mesh spacing {mesh.spacing}")

    counts = np.bincount(assign, minlength=mesh.n_nodes)
    cell_order = np.argsort(assign, kind="stable")
    node_starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    node_starts = np.minimum(node_starts, cells.shape[0] - 1)
    return GridMeshMap(side, assign.astype(np.int64), dist, cell_order.astype(np.int64),
                       node_starts.astype(np.int64), counts.astype(np.int64))
