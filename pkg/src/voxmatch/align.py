"""Eigenfunction alignment by histogram signatures.

Eigenvectors of two Laplacians are paired by comparing the histograms of
their components, which do not depend on node order. Each eigenvector is
known only up to sign, so every candidate pair is compared both ways and the
better sign is kept. The pairing is an exact linear assignment over the
dissimilarity matrix; poorly matching pairs are then dropped.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .errors import BinMismatch, DegenerateSpectrum, DimensionMismatch, NoRetainedPairs, RangeTooSmall
from .graph import normalized_laplacian

logger = logging.getLogger(__name__)

DEFAULT_BINS = 16


@dataclass(frozen=True)
class Signature:
    bins: np.ndarray
    range_a: float

    @property
    def n_bins(self):
        return len(self.bins)


@dataclass(frozen=True)
class AlignConfig:
    bins: int = DEFAULT_BINS
    retain_threshold: float = 0.25
    max_k: int = 10

    def __post_init__(self):
        if self.bins < 2 or self.bins % 2:
            raise ValueError("bins must be an even number >= 2")
        if self.max_k < 1:
            raise ValueError("max_k must be >= 1")


@dataclass(frozen=True)
class EigenPair:
    k_x: int
    l_y: int
    sign: int
    cost: float


@dataclass(frozen=True)
class EigenAlignment:
    """Retained eigenfunction pairs and the signed permutation they define.

    ``pairs`` are sorted by ascending cost. ``x_columns`` and ``y_columns``
    list the retained eigenvector indices of each shape in ascending order;
    ``initial_rotation[i, j] = s`` when retained column ``i`` of X is paired
    with retained column ``j`` of Y with sign ``s``, so that ``x ~ R0 @ y``.
    """

    pairs: tuple
    x_columns: np.ndarray
    y_columns: np.ndarray
    initial_rotation: np.ndarray
    cost_matrix: np.ndarray
    assignment: tuple = ()

    @property
    def retained_k(self):
        return len(self.pairs)

    def select(self, coords_x, coords_y):
        """Restrict two coordinate blocks to the retained eigenfunctions."""
        return coords_x[:, self.x_columns], coords_y[:, self.y_columns]


def signature(u, bins=DEFAULT_BINS, range_a=None):
    """Normalized histogram of the components of ``u`` over ``[-a, a]``.

    Bins are half-open ``[lo, hi)`` except the top one, which is closed.
    """
    u = np.asarray(u, dtype=float).ravel()
    if u.size == 0:
        raise ValueError("cannot build a signature of an empty vector")
    if bins < 2 or bins % 2:
        raise ValueError("bins must be an even number >= 2")
    top = float(np.max(np.abs(u)))
    if range_a is None:
        range_a = top
    if top > range_a:
        raise RangeTooSmall(f"|u| reaches {top:.6g}, beyond range {range_a:.6g}")
    if range_a <= 0:
        # all-zero vector: put everything in the two central bins
        counts = np.zeros(bins)
        counts[bins // 2] = u.size
    else:
        counts, _ = np.histogram(u, bins=bins, range=(-range_a, range_a))
    return Signature(bins=counts / counts.sum(), range_a=float(range_a))


def dissimilarity(h1, h2):
    """Chi-squared distance ``0.5 * sum((p - q)**2 / (p + q))`` with ``0/0 = 0``."""
    if h1.n_bins != h2.n_bins or not np.isclose(h1.range_a, h2.range_a, rtol=1e-12, atol=0):
        raise BinMismatch(
            f"signatures differ: {h1.n_bins} vs {h2.n_bins} bins, "
            f"range {h1.range_a} vs {h2.range_a}"
        )
    return float(_chi2(h1.bins, h2.bins))


def _chi2(p, q):
    den = p + q
    num = (p - q) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return 0.5 * terms.sum(axis=-1)


def _histograms(cols, bins, ranges):
    # cols: (N, K), ranges: (K, L) -> (K, L, bins) histograms of column k over range [k, l]
    n, k = cols.shape
    scaled = (cols[:, :, None] + ranges[None]) / (2 * ranges[None]) * bins
    idx = np.clip(np.floor(scaled).astype(np.int64), 0, bins - 1)
    flat = (np.arange(k)[:, None] * ranges.shape[1] + np.arange(ranges.shape[1])[None]) * bins
    hist = np.bincount((idx + flat[None]).ravel(), minlength=k * ranges.shape[1] * bins)
    return hist.reshape(k, ranges.shape[1], bins) / n


def cost_matrix(coords_x, coords_y, bins=DEFAULT_BINS):
    """Matrix of best-sign dissimilarities between all column pairs, and the signs.

    Entry ``[k, l]`` compares column ``k`` of X with column ``l`` of Y over
    the shared symmetric range ``max(|u|_inf, |v|_inf)``.
    """
    coords_x = np.asarray(coords_x, dtype=float)
    coords_y = np.asarray(coords_y, dtype=float)
    ax = np.abs(coords_x).max(axis=0)
    ay = np.abs(coords_y).max(axis=0)
    ranges = np.maximum(ax[:, None], ay[None, :])
    ranges = np.where(ranges > 0, ranges, 1.0)
    hx = _histograms(coords_x, bins, ranges)  # (Kx, Ky, B)
    hy = _histograms(coords_y, bins, ranges.T)  # (Ky, Kx, B)
    hy_neg = _histograms(-coords_y, bins, ranges.T)
    c_pos = _chi2(hx, hy.transpose(1, 0, 2))
    c_neg = _chi2(hx, hy_neg.transpose(1, 0, 2))
    signs = np.where(c_pos <= c_neg, 1, -1)
    return np.minimum(c_pos, c_neg), signs


def align_eigenfunctions(ex, ey, config=None):
    """Pair the eigenfunctions of two embeddings and build the initial transform.

    Raises
    ------
    DimensionMismatch
        If the embeddings have a different number of eigenfunctions.
    NoRetainedPairs
        If every assigned pair costs more than ``config.retain_threshold``.
    """
    config = config or AlignConfig()
    cx = getattr(ex, "coordinates", ex)
    cy = getattr(ey, "coordinates", ey)
    if cx.shape[1] != cy.shape[1]:
        raise DimensionMismatch(f"embeddings have {cx.shape[1]} and {cy.shape[1]} eigenfunctions")

    costs, signs = cost_matrix(cx, cy, config.bins)
    rows, cols = linear_sum_assignment(costs)
    assigned = [
        EigenPair(int(k), int(l), int(signs[k, l]), float(costs[k, l])) for k, l in zip(rows, cols)
    ]
    assigned.sort(key=lambda p: (p.cost, p.k_x))
    kept = [p for p in assigned if p.cost <= config.retain_threshold][: config.max_k]
    logger.debug("assignment costs: %s", [round(p.cost, 4) for p in assigned])
    if not kept:
        raise NoRetainedPairs(
            f"no eigenfunction pair below retain_threshold={config.retain_threshold} "
            f"(best cost {assigned[0].cost:.4g})"
        )

    x_cols = np.array(sorted(p.k_x for p in kept))
    y_cols = np.array(sorted(p.l_y for p in kept))
    r0 = np.zeros((len(kept), len(kept)))
    for p in kept:
        r0[np.searchsorted(x_cols, p.k_x), np.searchsorted(y_cols, p.l_y)] = p.sign
    return EigenAlignment(
        pairs=tuple(kept),
        x_columns=x_cols,
        y_columns=y_cols,
        initial_rotation=r0,
        cost_matrix=costs,
        assignment=tuple(assigned),
    )


def brute_force_assignment(costs):
    """Minimum total cost over all permutations (exhaustive; small K only)."""
    k = costs.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(k)):
        total = costs[np.arange(k), perm].sum()
        if total < best:
            best, best_perm = total, perm
    return best, best_perm


def umeyama_oracle(gx, gy, gap_tol=1e-9):
    """Node permutation between two small isomorphic graphs from their full eigenbases.

    Returns ``perm`` with node ``i`` of ``gx`` matched to node ``perm[i]`` of
    ``gy``. Both normalized Laplacians are diagonalized; for every sign
    pattern ``S`` the matrix ``Ux S Uy^T`` is rounded to a permutation by
    row-wise maxima and the pattern minimizing ``|Lx - P Ly P^T|^2`` wins.
    Only meant for graphs of at most a dozen nodes.
    """
    lx = normalized_laplacian(gx).toarray()
    ly = normalized_laplacian(gy).toarray()
    n = lx.shape[0]
    if ly.shape[0] != n:
        raise DimensionMismatch("graphs differ in size")
    if n > 12:
        raise ValueError("umeyama_oracle is limited to graphs of at most 12 nodes")
    vx, ux = scipy.linalg.eigh(lx)
    vy, uy = scipy.linalg.eigh(ly)
    for vals in (vx, vy):
        if n > 1 and np.min(np.diff(vals)) < gap_tol:
            raise DegenerateSpectrum("eigenvalues are not distinct")

    best, best_perm = np.inf, None
    for signs in itertools.product((1.0, -1.0), repeat=n):
        q = (ux * np.array(signs)) @ uy.T
        perm = np.argmax(q, axis=1)
        if len(set(perm.tolist())) != n:
            continue
        cost = graph_matching_cost(lx, ly, perm)
        if cost < best:
            best, best_perm = cost, perm
    if best_perm is None:
        raise DegenerateSpectrum("no sign pattern yields a permutation")
    return best_perm


def graph_matching_cost(lx, ly, perm):
    """``|Lx - P Ly P^T|_F^2`` for the permutation ``x_i -> y_perm[i]``."""
    perm = np.asarray(perm)
    return float(np.sum((lx - ly[np.ix_(perm, perm)]) ** 2))
