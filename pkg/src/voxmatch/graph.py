"""Voxel sets, locally connected weighted graphs and the normalized Laplacian."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateGraph, EmptyInput


@dataclass(frozen=True)
class VoxelSet:
    """Occupied cells of a regular 3-D grid.

    ``points`` holds integer grid coordinates (one row per voxel, unit = one
    voxel edge). ``resolution`` is world units per voxel and is carried along
    as metadata only.
    """

    points: np.ndarray
    resolution: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.size == 0:
            raise EmptyInput("voxel set is empty")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
        if not np.issubdtype(pts.dtype, np.integer):
            if not np.all(pts == np.round(pts)):
                raise ValueError("voxel coordinates must be integers")
        pts = pts.astype(np.int64)
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("voxel set contains duplicate coordinates")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_points(cls, points, resolution=1.0):
        """Build a voxel set, silently dropping repeated coordinates (first kept)."""
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        _, first = np.unique(pts, axis=0, return_index=True)
        return cls(pts[np.sort(first)], resolution)


@dataclass(frozen=True)
class GraphConfig:
    """Neighbourhood and weighting options for :func:`build_graph`.

    ``connectivity`` is one of ``6``, ``18``, ``26`` or ``"radius:r"`` (every
    voxel within Chebyshev distance ``r``).
    """

    connectivity: int | str = 26
    nu_factor: float = 1.0
    min_component_size: int = 10

    def __post_init__(self):
        neighbourhood_offsets(self.connectivity)
        if not self.nu_factor > 0:
            raise ValueError("nu_factor must be positive")
        if self.min_component_size < 1:
            raise ValueError("min_component_size must be >= 1")


@dataclass(frozen=True)
class ShapeGraph:
    """Sparse weighted adjacency over the retained voxels.

    ``weights`` is a symmetric CSR matrix with an empty diagonal.
    ``node_index[i]`` is the row of the input voxel set that became node ``i``.
    """

    weights: sp.csr_matrix
    degrees: np.ndarray
    nu: float
    node_index: np.ndarray
    n_dropped: int = 0
    coords: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return self.weights.shape[0]

    @property
    def n_edges(self):
        return self.weights.nnz // 2

    def edges(self):
        """Return ``(i, j, w)`` arrays with ``i < j``, one entry per undirected edge."""
        upper = sp.triu(self.weights, k=1).tocoo()
        return upper.row, upper.col, upper.data

    @classmethod
    def from_weights(cls, weights, nu=1.0):
        """Wrap an explicit symmetric weight matrix (used for small test graphs)."""
        w = sp.csr_matrix(weights, dtype=float)
        w.setdiag(0)
        w.eliminate_zeros()
        if abs(w - w.T).max() > 0:
            raise ValueError("weight matrix must be symmetric")
        deg = np.asarray(w.sum(axis=1)).ravel()
        if np.any(deg <= 0):
            raise DegenerateGraph("graph has isolated nodes")
        n_comp, _ = connected_components(w, directed=False)
        if n_comp != 1:
            raise DegenerateGraph("graph is not connected")
        return cls(w, deg, float(nu), np.arange(w.shape[0]))


def neighbourhood_offsets(connectivity):
    """Integer offsets ``(dx, dy, dz)`` defining the neighbourhood of a voxel."""
    if isinstance(connectivity, str):
        text = connectivity.strip().lower()
        if text.isdigit():
            return neighbourhood_offsets(int(text))
        if not text.startswith("radius:"):
            raise ValueError(f"unknown connectivity {connectivity!r}")
        try:
            r = int(text.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad radius in connectivity {connectivity!r}") from None
        if r < 1:
            raise ValueError("neighbourhood radius must be >= 1")
        rng = range(-r, r + 1)
        offs = [o for o in itertools.product(rng, rng, rng) if any(o)]
        return np.array(offs, dtype=np.int64)
    max_l1 = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if max_l1 is None:
        raise ValueError(f"unknown connectivity {connectivity!r}")
    offs = [
        o
        for o in itertools.product((-1, 0, 1), repeat=3)
        if any(o) and sum(map(abs, o)) <= max_l1
    ]
    return np.array(offs, dtype=np.int64)


def _neighbour_pairs(points, offsets):
    """All index pairs ``(i, j)``, ``i != j``, such that ``points[j] - points[i]`` is an offset."""
    # pad by the neighbourhood radius so shifted keys never wrap around
    pad = int(np.abs(offsets).max())
    shifted = points - points.min(axis=0) + pad
    span = shifted.max(axis=0) + pad + 1
    keys = shifted[:, 0] * (span[1] * span[2]) + shifted[:, 1] * span[2] + shifted[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    # only half of the symmetric offsets are needed; the rest follow by symmetry
    half = offsets[[tuple(o) > (0, 0, 0) for o in offsets]]
    rows, cols = [], []
    for off in half:
        target = keys + off[0] * (span[1] * span[2]) + off[1] * span[2] + off[2]
        pos = np.searchsorted(sorted_keys, target)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        hit = sorted_keys[pos] == target
        rows.append(np.nonzero(hit)[0])
        cols.append(order[pos[hit]])
    if not rows:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(rows), np.concatenate(cols)


def build_graph(voxels, config=None):
    """Build the weighted neighbourhood graph of a voxel set.

    Edges join voxels lying in each other's neighbourhood and carry the heat
    kernel weight ``exp(-d**2 / nu**2)`` where ``d`` is the distance between
    voxel centres. ``nu`` is the mean edge length times ``config.nu_factor``.
    Only the largest connected component is kept.

    Raises
    ------
    EmptyInput
        If ``voxels`` holds no points.
    DegenerateGraph
        If the largest component has fewer than ``config.min_component_size``
        nodes or has no edges.
    """
    config = config or GraphConfig()
    if not isinstance(voxels, VoxelSet):
        voxels = VoxelSet(np.asarray(voxels))
    points = voxels.points
    n = len(points)
    if n == 0:
        raise EmptyInput("voxel set is empty")

    offsets = neighbourhood_offsets(config.connectivity)
    rows, cols = _neighbour_pairs(points, offsets)
    if len(rows) == 0:
        raise DegenerateGraph(f"no edges among {n} voxel(s)")

    adjacency = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, labels = connected_components(adjacency, directed=False)
    sizes = np.bincount(labels)
    keep_label = int(np.argmax(sizes))
    keep = np.nonzero(labels == keep_label)[0]
    if len(keep) < max(2, config.min_component_size):
        raise DegenerateGraph(
            f"largest connected component has {len(keep)} node(s), "
            f"fewer than min_component_size={config.min_component_size}"
        )

    remap = np.full(n, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = (remap[rows] >= 0) & (remap[cols] >= 0)
    r, c = remap[rows[mask]], remap[cols[mask]]
    diff = (points[rows[mask]] - points[cols[mask]]).astype(float)
    dist2 = np.einsum("ij,ij->i", diff, diff)

    nu = config.nu_factor * float(np.mean(np.sqrt(dist2)))
    w = np.exp(-dist2 / nu**2)
    m = len(keep)
    weights = sp.coo_matrix(
        (np.concatenate([w, w]), (np.concatenate([r, c]), np.concatenate([c, r]))),
        shape=(m, m),
    ).tocsr()
    weights.sort_indices()
    degrees = np.asarray(weights.sum(axis=1)).ravel()
    return ShapeGraph(
        weights=weights,
        degrees=degrees,
        nu=nu,
        node_index=keep,
        n_dropped=n - m,
        coords=points[keep],
    )


def normalized_laplacian(graph):
    """Symmetric normalized Laplacian ``I - D^-1/2 W D^-1/2`` as a CSR matrix."""
    inv_sqrt = sp.diags(1.0 / np.sqrt(graph.degrees))
    n = graph.n_nodes
    lap = sp.identity(n, format="csr") - inv_sqrt @ graph.weights @ inv_sqrt
    lap = lap.tocsr()
    # exact symmetry; the triple product can differ in the last bit
    return ((lap + lap.T) * 0.5).tocsr()
