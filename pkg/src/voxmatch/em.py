"""Robust point registration under an orthogonal transform.

Observations ``x_n`` are explained by Gaussian clusters centred at ``R y_m``
with one shared covariance, plus a uniform outlier component spread over the
working volume of the embedding. EM alternates posterior computation with
closed-form updates of ``R`` and the covariance.

Posteriors use ``exp(-d)`` with ``d`` the squared Mahalanobis distance. That
kernel is a Gaussian whose covariance is half of the stored matrix, so the
maximum-likelihood covariance update is twice the posterior-weighted scatter.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .errors import (
    DegenerateCrossCovariance,
    DimensionMismatch,
    NonIncreasingLikelihood,
    SingularCovariance,
    ZeroInlierMass,
)

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
LIKELIHOOD_SLACK = 1e-9
# ML covariance for exp(-d) posteriors; see module docstring
SCATTER_SCALE = 2.0
_CHUNK_ELEMENTS = 1_000_000
# Sparse E-step: cluster terms more than _TAIL below a row's largest one are
# dropped, a relative error of at most M * exp(-_TAIL) on every row sum.
_TAIL = 45.0
_NEGLIGIBLE = 1e-18
_SPARSE_MIN_ELEMENTS = 1_000_000
_SPARSE_MAX_FILL = 0.05
# Distances from the expanded form |x|^2 + |c|^2 - 2 x.c lose about
# eps * (|x|^2 + |c|^2) to cancellation. Beyond _EXACT_TOL the entries that
# carry posterior mass are recomputed from differences, unless more than
# _EXACT_MAX_FILL of a large block qualifies (broad posteriors, early iterations).
_EXACT_TOL = 1e-13
_EXACT_MAX_FILL = 0.2
# default covariance floor, as a fraction of the observations' bounding-box diagonal
FLOOR_FACTOR = 1e-6


@dataclass(frozen=True)
class EMConfig:
    pi_out: float = 0.05
    sigma0_factor: float = 0.1
    sigma_floor: float | None = None  # None: FLOOR_FACTOR x bounding-box diagonal
    tol: float = 1e-6
    max_iter: int = 100
    match_threshold: float = 0.5
    rotation_refine_iter: int = 50

    def __post_init__(self):
        if not 0.0 <= self.pi_out < 1.0:
            raise ValueError("pi_out must lie in [0, 1)")
        if not self.sigma0_factor > 0:
            raise ValueError("sigma0_factor must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class MixtureParams:
    rotation: np.ndarray
    covariance: np.ndarray
    pi_in: float
    pi_out: float
    volume: float
    sigma_floor: float = 0.0

    @property
    def dim(self):
        return self.rotation.shape[0]

    @property
    def kappa(self):
        """Relative weight of the outlier component in the posterior denominator."""
        return math.exp(self.log_kappa) if self.pi_out > 0 else 0.0

    @property
    def log_kappa(self):
        if self.pi_out <= 0:
            return -math.inf
        _, logdet = np.linalg.slogdet(self.covariance)
        return (
            0.5 * self.dim * math.log(2 * math.pi)
            + 0.5 * logdet
            + math.log(self.pi_out)
            - math.log(self.volume)
            - math.log(self.pi_in)
        )


@dataclass(frozen=True)
class RegistrationResult:
    """Final mixture parameters, per-observation labels and per-cluster pairing.

    ``best_cluster[n]`` and ``best_posterior[n]`` give the most probable
    cluster of observation ``n``; ``outlier_posterior[n]`` is the posterior of
    the uniform component. ``virtual_means[m]`` (NaN when ``weights[m] == 0``)
    is the posterior-weighted mean observation paired with cluster ``m``.

    ``log_likelihood_trace`` holds the accepted iterates;
    ``evaluated_log_likelihoods`` also includes a final step that was
    rejected for lowering the likelihood.
    """

    params: MixtureParams
    virtual_means: np.ndarray
    weights: np.ndarray
    matched: np.ndarray
    best_cluster: np.ndarray
    best_posterior: np.ndarray
    outlier_posterior: np.ndarray
    cluster_max_posterior: np.ndarray
    iterations: int
    converged: bool
    log_likelihood_trace: list
    orthogonality_trace: list = field(default_factory=list)
    evaluated_log_likelihoods: list = field(default_factory=list)
    x: np.ndarray | None = field(default=None, repr=False)
    y: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_outlier(self):
        """Observations whose outlier posterior beats every cluster posterior."""
        return self.outlier_posterior > self.best_posterior

    def posteriors(self):
        """Dense ``N x (M + 1)`` posterior matrix (last column: outliers)."""
        return e_step(self.x, self.y, self.params)

    def correspondence(self):
        """``(m, virtual_mean, matched)`` for every cluster."""
        return [(m, self.virtual_means[m], bool(self.matched[m])) for m in range(len(self.weights))]


def _bbox(points):
    return points.min(axis=0), points.max(axis=0)


def bbox_diagonal(points):
    lo, hi = _bbox(points)
    return float(np.linalg.norm(hi - lo))


def init_params(x, y, r0, config=None):
    """Starting parameters: ``R = r0``, isotropic covariance, equal cluster priors.

    The initial standard deviation is ``sigma0_factor`` times the bounding-box
    diagonal of the observations. The working volume is the bounding box of
    both point sets, enlarged by 5%.
    """
    config = config or EMConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r0 = np.asarray(r0, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or len(x) == 0 or len(y) == 0:
        raise DimensionMismatch("point sets must be nonempty 2-D arrays")
    k = x.shape[1]
    if y.shape[1] != k or r0.shape != (k, k):
        raise DimensionMismatch(f"dimensions differ: x {x.shape}, y {y.shape}, r0 {r0.shape}")
    if np.abs(r0.T @ r0 - np.eye(k)).max() > 1e-8:
        raise ValueError("r0 is not orthogonal")

    diag = bbox_diagonal(x)
    if diag <= 0:
        raise DimensionMismatch("observations collapse to a single point")
    sigma0 = config.sigma0_factor * diag
    floor = config.sigma_floor if config.sigma_floor is not None else FLOOR_FACTOR * diag

    both = np.vstack([x, y])
    lo, hi = _bbox(both)
    sides = np.maximum(hi - lo, floor)
    volume = 1.05 * float(np.prod(sides))
    m = len(y)
    return MixtureParams(
        rotation=r0.copy(),
        covariance=sigma0**2 * np.eye(k),
        pi_in=(1.0 - config.pi_out) / m,
        pi_out=config.pi_out,
        volume=volume,
        sigma_floor=floor,
    )


def _whitener(cov):
    evals = np.linalg.eigvalsh(cov)
    if evals[0] <= 0 or evals[-1] / evals[0] > MAX_CONDITION:
        raise SingularCovariance(f"covariance condition number too large (eigenvalues {evals})")
    chol = np.linalg.cholesky(cov)
    return np.linalg.inv(chol)


def _neg_sq_distances(xw, cw):
    """``-|x_n - c_m|^2`` from one product of augmented matrices (expanded form)."""
    xa = np.hstack([xw, np.ones((len(xw), 1)), np.einsum("ij,ij->i", xw, xw)[:, None]])
    ca = np.hstack([2.0 * cw, -np.einsum("ij,ij->i", cw, cw)[:, None], -np.ones((len(cw), 1))])
    return xa @ ca.T


def _pair_blocks(n_pairs, k):
    step = max(1, _CHUNK_ELEMENTS // max(k, 1))
    for start in range(0, n_pairs, step):
        yield slice(start, min(n_pairs, start + step))


def _refine_logits(neg_d, xw, cw, row_max, force=False):
    """Recompute from differences the entries of ``neg_d`` that can carry posterior mass.

    ``neg_d`` holds ``-|x_n - c_m|^2`` and ``row_max`` its row maxima.
    Returns the recomputed ``(rows, cols)``, or None when the expanded form
    is accurate enough or, without ``force``, too many entries qualify.
    """
    err = 8 * np.finfo(float).eps * (
        np.einsum("ij,ij->i", xw, xw).max() + np.einsum("ij,ij->i", cw, cw).max()
    )
    if err <= _EXACT_TOL:
        return None
    lim = row_max - _TAIL - 2 * err
    if not force:
        probe = slice(None, None, max(1, len(neg_d) // 64))
        if np.count_nonzero(neg_d[probe] >= lim[probe, None]) > _EXACT_MAX_FILL * neg_d[probe].size:
            return None
    rows, cols = np.nonzero(neg_d >= lim[:, None])
    for blk in _pair_blocks(len(rows), xw.shape[1]):
        diff = xw[rows[blk]] - cw[cols[blk]]
        neg_d[rows[blk], cols[blk]] = -np.einsum("ij,ij->i", diff, diff)
    return rows, cols


def _chunks(n, m):
    step = max(1, _CHUNK_ELEMENTS // max(m, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def e_step(x, y, params):
    """Posterior matrix ``N x (M + 1)``; the last column is the outlier class."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    white = _whitener(params.covariance)
    xw = x @ white.T
    cw = (y @ params.rotation.T) @ white.T
    log_kappa = params.log_kappa
    out = np.empty((len(x), len(y) + 1))
    for sl in _chunks(len(x), len(y)):
        logits = _neg_sq_distances(xw[sl], cw)
        _refine_logits(logits, xw[sl], cw, logits.max(axis=1), force=True)
        logits = np.hstack([logits, np.full((logits.shape[0], 1), log_kappa)])
        norm = logsumexp(logits, axis=1, keepdims=True)
        out[sl] = np.exp(logits - norm)
    return out


def log_likelihood(x, y, params):
    """Mixture log-likelihood of the observations under ``params``."""
    return _accumulate(np.asarray(x, float), np.asarray(y, float), params).log_likelihood


@dataclass
class _Stats:
    log_likelihood: float
    xi: np.ndarray  # (M,) column sums of posteriors
    weighted_x: np.ndarray  # (M, K) sum_n alpha_nm x_n
    scatter: np.ndarray  # (K, K) sum_nm alpha_nm r_nm r_nm^T, r_nm = x_n - R y_m
    outlier: np.ndarray  # (N,)
    best_cluster: np.ndarray
    best_posterior: np.ndarray
    cluster_max: np.ndarray  # (M,) max_n alpha_nm
    rotation: np.ndarray | None = None  # the R of the residuals in ``scatter``


def _accumulate(x, y, params):
    """One pass over the posteriors, keeping only the sufficient statistics.

    Large problems whose posteriors are concentrated on few clusters per
    observation are handled with a k-d tree over the whitened cluster
    centres; see ``_TAIL`` for the truncation bound.
    """
    n, k = x.shape
    m = len(y)
    white = _whitener(params.covariance)
    xw = x @ white.T
    cw = (y @ params.rotation.T) @ white.T
    _, logdet = np.linalg.slogdet(params.covariance)
    const = math.log(params.pi_in) - 0.5 * k * math.log(2 * math.pi) - 0.5 * logdet
    stats = None
    if n * m >= _SPARSE_MIN_ELEMENTS:
        stats = _accumulate_sparse(xw, cw, params.log_kappa)
    if stats is None:
        stats = _accumulate_dense(xw, cw, params.log_kappa, exact=n * m < _SPARSE_MIN_ELEMENTS)
    # sums were taken in whitened coordinates; map them back with x = L xw
    unwhite = np.linalg.cholesky(params.covariance)
    stats.weighted_x = stats.weighted_x @ unwhite.T
    stats.scatter = unwhite @ stats.scatter @ unwhite.T
    stats.rotation = params.rotation
    stats.log_likelihood += n * const
    return stats


def _finish(xi, weighted_x, scatter, outlier, best_cluster, best_posterior, cluster_max, row_terms):
    return _Stats(math.fsum(row_terms), xi, weighted_x, 0.5 * (scatter + scatter.T), outlier,
                  best_cluster, best_posterior, cluster_max)


def _accumulate_dense(xw, cw, log_kappa, exact=False):
    n, k = xw.shape
    m = len(cw)
    xi = np.zeros(m)
    weighted_x = np.zeros((m, k))
    scatter = np.zeros((k, k))
    outlier = np.empty(n)
    best_cluster = np.empty(n, dtype=np.int64)
    best_posterior = np.empty(n)
    cluster_max = np.zeros(m)
    row_terms = np.empty(n)
    for sl in _chunks(n, m):
        # buffer holds -distances, then exponentials, then posteriors (in place)
        buf = _neg_sq_distances(xw[sl], cw)
        rows = np.arange(buf.shape[0])
        # nearest cluster from distances: alpha can underflow on far outliers
        best = np.argmax(buf, axis=1)
        refined = _refine_logits(buf, xw[sl], cw, buf[rows, best], force=exact)
        if refined is not None:
            best = np.argmax(buf, axis=1)
        best_cluster[sl] = best
        top = buf[rows, best]
        if log_kappa > -math.inf:
            top = np.maximum(top, log_kappa)
        buf -= top[:, None]
        np.exp(buf, out=buf)
        outlier_term = np.exp(log_kappa - top) if log_kappa > -math.inf else 0.0
        denom = buf.sum(axis=1) + outlier_term
        buf /= denom[:, None]
        row_terms[sl] = top + np.log(denom)
        outlier[sl] = outlier_term / denom
        col = buf.sum(axis=0)
        wx = buf.T @ xw[sl]
        xi += col
        weighted_x += wx
        if refined is None:
            inl = xw[sl] * (1.0 - outlier[sl])[:, None]
            cross = wx.T @ cw
            scatter += inl.T @ xw[sl] - cross - cross.T + (cw * col[:, None]).T @ cw
        else:
            # entries outside the refined set carry less than exp(-_TAIL) of a row
            r, c = refined
            for blk in _pair_blocks(len(r), k):
                diff = xw[sl][r[blk]] - cw[c[blk]]
                scatter += (diff * buf[r[blk], c[blk]][:, None]).T @ diff
        best_posterior[sl] = buf[rows, best_cluster[sl]]
        np.maximum(cluster_max, buf.max(axis=0), out=cluster_max)
    return _finish(xi, weighted_x, scatter, outlier, best_cluster, best_posterior, cluster_max,
                   row_terms)


def _accumulate_sparse(xw, cw, log_kappa):
    """Truncated E-step; returns None when the posteriors are too spread out."""
    n, k = xw.shape
    m = len(cw)
    tree = cKDTree(cw, leafsize=32)
    dist, nearest = tree.query(xw, k=1, workers=-1)
    d_min = dist**2
    radius = np.sqrt(d_min + _TAIL)

    # cheap density estimate on a subsample of rows before committing
    probe = np.arange(0, n, max(1, n // 256))
    fill = tree.query_ball_point(xw[probe], radius[probe], return_length=True, workers=-1).sum()
    fill /= len(probe) * m
    if fill > _SPARSE_MAX_FILL:
        return None

    top = -d_min
    if log_kappa > -math.inf:
        top = np.maximum(top, log_kappa)
    xi = np.zeros(m)
    weighted_x = np.zeros((m, k))
    scatter = np.zeros((k, k))
    cluster_max = np.zeros(m)
    denom = np.empty(n)
    step = max(1, int(_CHUNK_ELEMENTS / max(1.0, fill * m * 4)))
    for start in range(0, n, step):
        rows_sl = slice(start, min(n, start + step))
        lists = tree.query_ball_point(xw[rows_sl], radius[rows_sl], return_sorted=False, workers=-1)
        counts = np.fromiter(map(len, lists), dtype=np.int64, count=len(lists))
        cols = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=counts.sum())
        local = np.repeat(np.arange(counts.size), counts)
        diff = np.repeat(xw[rows_sl], counts, axis=0)
        diff -= cw[cols]
        expo = np.einsum("ij,ij->i", diff, diff)
        expo += np.repeat(top[rows_sl], counts)
        np.negative(expo, out=expo)
        np.exp(expo, out=expo)
        den = np.bincount(local, weights=expo, minlength=counts.size)
        if log_kappa > -math.inf:
            den += np.exp(log_kappa - top[rows_sl])
        denom[rows_sl] = den
        alpha = expo / den[local]
        # posteriors below _NEGLIGIBLE change no sum beyond round-off
        keep = np.flatnonzero(alpha > _NEGLIGIBLE)
        alpha, cols, local, diff = alpha[keep], cols[keep], local[keep], diff[keep]
        xi += np.bincount(cols, weights=alpha, minlength=m)
        weighted_x += sp.csc_matrix((alpha, (local, cols)), shape=(counts.size, m)).T @ xw[rows_sl]
        scatter += (diff * alpha[:, None]).T @ diff
        np.maximum.at(cluster_max, cols, alpha)
    outlier = np.exp(log_kappa - top) / denom if log_kappa > -math.inf else np.zeros(n)
    best_posterior = np.exp(-d_min - top) / denom
    row_terms = top + np.log(denom)
    return _finish(xi, weighted_x, scatter, outlier, nearest.astype(np.int64), best_posterior,
                   cluster_max, row_terms)


def virtual_means(x, posteriors, outlier_column=True):
    """Posterior-weighted mean observation per cluster and the cluster weights.

    With ``outlier_column`` the last column of ``posteriors`` is the outlier
    class and is ignored. Clusters with zero weight get a NaN mean.
    """
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(posteriors, dtype=float)
    if alpha.shape[0] != len(x):
        raise DimensionMismatch("posteriors and observations differ in length")
    if outlier_column:
        alpha = alpha[:, :-1]
    xi = alpha.sum(axis=0)
    sums = alpha.T @ x
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / xi[:, None]
    means[xi <= 0] = np.nan
    return means, xi


def _split_outlier(posteriors, m):
    posteriors = np.asarray(posteriors, dtype=float)
    if posteriors.shape[1] == m + 1:
        return posteriors[:, :m]
    if posteriors.shape[1] == m:
        return posteriors
    raise DimensionMismatch(f"posteriors have {posteriors.shape[1]} columns for {m} clusters")


def m_step_rotation(xbar, xi, y):
    """Orthogonal ``R`` minimizing ``sum_m xi_m |xbar_m - R y_m|^2``.

    ``R = U V^T`` from the SVD of the weighted cross-covariance; reflections
    are allowed. Clusters with zero weight or NaN means are skipped.
    """
    xbar = np.asarray(xbar, dtype=float)
    xi = np.asarray(xi, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (xi > 0) & np.all(np.isfinite(xbar), axis=1)
    if not np.any(ok):
        raise ZeroInlierMass("all cluster weights are zero")
    cross = (xbar[ok] * xi[ok, None]).T @ y[ok]
    return _polar(cross, warn=True)


def _polar(cross, warn=False):
    u, s, vt = np.linalg.svd(cross)
    k = cross.shape[0]
    if warn and k > 1 and s[0] > 0 and np.sum(s > s[0] * 1e-12) < k - 1:
        warnings.warn(
            "cross-covariance has rank < K-1; rotation is not unique",
            DegenerateCrossCovariance,
            stacklevel=3,
        )
    return u @ vt


def _floor_covariance(cov, floor):
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, floor**2)
    return (evecs * evals) @ evecs.T


def m_step_covariance(x, y, posteriors, rotation, floor=0.0, scale=1.0):
    """Posterior-weighted scatter of the residuals ``x_n - R y_m``.

    The result is multiplied by ``scale`` and its eigenvalues are clamped to
    at least ``floor**2``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    alpha = _split_outlier(posteriors, len(y))
    total = alpha.sum()
    if not total > 0:
        raise ZeroInlierMass("no posterior mass on any cluster")
    mu = y @ np.asarray(rotation).T
    k = x.shape[1]
    scatter = np.zeros((k, k))
    for sl in _chunks(len(x), len(y)):
        a = alpha[sl]
        resid = x[sl, None, :] - mu[None, :, :]
        scatter += np.einsum("nm,nmi,nmj->ij", a, resid, resid)
    return _floor_covariance(scale * scatter / total, floor)


def _moments(xbar, xi, y):
    """``B = sum xi_m xbar_m y_m^T`` and ``C = sum xi_m y_m y_m^T`` over valid clusters."""
    xbar, xi, y = _valid(xbar, xi, y)
    return (xbar * xi[:, None]).T @ y, (y * xi[:, None]).T @ y


def _rotation_objective(rot, precision, b, c):
    # sum_m xi_m |xbar_m - R y_m|^2_P up to a constant independent of R
    return float(np.sum(precision * (rot @ c @ rot.T)) - 2.0 * np.sum(rot * (precision @ b)))


def _skew_basis(k):
    i, j = np.triu_indices(k, 1)
    basis = np.zeros((len(i), k, k))
    idx = np.arange(len(i))
    basis[idx, i, j] = 1.0
    basis[idx, j, i] = -1.0
    return basis


def _cayley(omega):
    k = len(omega)
    return np.linalg.solve(np.eye(k) - 0.5 * omega, np.eye(k) + 0.5 * omega)


def refine_rotation(xbar, xi, y, precision, start, n_iter=50):
    """Minimize ``sum_m xi_m d(xbar_m, R y_m)`` in the Mahalanobis metric over O(K).

    Newton iterations on the rotation group starting from ``start``: the
    objective is expanded to second order in a skew-symmetric increment,
    the step is mapped back with a Cayley transform and halved until the
    objective decreases. The result is never worse than ``start``.
    """
    b, c = _moments(xbar, xi, y)
    k = len(precision)
    if k < 2:
        return start
    basis = _skew_basis(k)
    rot = start
    value = _rotation_objective(rot, precision, b, c)
    scale = abs(float(np.trace(precision @ c))) + abs(float(np.sum(rot * (precision @ b)))) + 1e-300
    for _ in range(n_iter):
        s = rot.T @ precision @ rot
        t = rot.T @ precision @ b
        lin = c @ s - s @ c + 2.0 * t
        grad = np.einsum("iab,ba->i", basis, lin)
        if np.linalg.norm(grad) <= 1e-13 * scale:
            break
        sx = np.einsum("ab,ibc->iac", s, basis)
        cy = np.einsum("ab,jbc->jac", c, basis)
        a = np.einsum("iac,jca->ij", sx, cy)
        g1 = np.einsum("iab,jbc,ca->ij", basis, basis, c @ s + s @ c)
        g2 = np.einsum("iab,jbc,ca->ij", basis, basis, t)
        hess = -(a + a.T) + 0.5 * (g1 + g1.T) - (g2 + g2.T)
        evals = np.linalg.eigvalsh(hess)
        if evals[0] <= 1e-12 * max(abs(evals[-1]), 1e-300):
            hess = hess + (abs(evals[0]) + 1e-8 * max(abs(evals[-1]), 1e-300)) * np.eye(len(hess))
        step = np.linalg.solve(hess, -grad)
        omega = np.einsum("i,iab->ab", step, basis)
        for _ in range(40):
            cand = rot @ _cayley(omega)
            cand_value = _rotation_objective(cand, precision, b, c)
            if cand_value < value:
                break
            omega = omega * 0.5
        else:
            break
        gain = value - cand_value
        rot, value = cand, cand_value
        if gain <= 1e-15 * scale:
            break
    # remove the round-off accumulated by repeated products
    u, _, vt = np.linalg.svd(rot)
    polished = u @ vt
    if _rotation_objective(polished, precision, b, c) <= value:
        rot = polished
    return rot


def _covariance_from_stats(stats, y, rotation, floor):
    total = stats.xi.sum()
    if not total > 0:
        raise ZeroInlierMass("no posterior mass on any cluster")
    # move the E-step scatter to the new rotation: r' = r + (R_old - R_new) y
    mu_old = y @ stats.rotation.T
    delta = mu_old - y @ rotation.T
    resid = stats.weighted_x - stats.xi[:, None] * mu_old  # sum_n alpha_nm r_nm
    cross = resid.T @ delta
    scatter = stats.scatter + cross + cross.T + (delta * stats.xi[:, None]).T @ delta
    return _floor_covariance(SCATTER_SCALE * scatter / total, floor)


def _m_step(x, y, params, stats, config):
    with np.errstate(invalid="ignore", divide="ignore"):
        xbar = stats.weighted_x / stats.xi[:, None]
    xbar[stats.xi <= 0] = np.nan
    precision = np.linalg.inv(params.covariance)
    if not np.any(stats.xi > 0):
        raise ZeroInlierMass("all cluster weights are zero")
    b, c = _moments(xbar, stats.xi, y)
    # Euclidean Procrustes solution as a candidate start for the Newton refinement
    candidate = _polar(b)
    old_value = _rotation_objective(params.rotation, precision, b, c)
    new_value = _rotation_objective(candidate, precision, b, c)
    start = candidate if new_value <= old_value else params.rotation
    rotation = refine_rotation(xbar, stats.xi, y, precision, start, config.rotation_refine_iter)
    covariance = _covariance_from_stats(stats, y, rotation, params.sigma_floor)
    return replace(params, rotation=rotation, covariance=covariance)


def _valid(xbar, xi, y):
    ok = (xi > 0) & np.all(np.isfinite(xbar), axis=1)
    return xbar[ok], xi[ok], y[ok]


def run_em(x, y, r0, config=None, params=None, callback=None):
    """Register observations ``x`` (N x K) to cluster centres ``y`` (M x K).

    Iterates until the relative change of the log-likelihood drops below
    ``config.tol`` or ``config.max_iter`` M-steps have run. A decrease of the
    log-likelihood beyond round-off stops the loop with a
    :class:`NonIncreasingLikelihood` warning.

    ``callback(iteration, params, log_likelihood)`` is called after every
    E-step when given.
    """
    config = config or EMConfig()
    x = np.asarray(getattr(x, "coordinates", x), dtype=float)
    y = np.asarray(getattr(y, "coordinates", y), dtype=float)
    if params is None:
        params = init_params(x, y, r0, config)
    k = x.shape[1]

    trace, ortho = [], []
    stats = _accumulate(x, y, params)
    trace.append(stats.log_likelihood)
    evaluated = [stats.log_likelihood]
    if callback:
        callback(0, params, stats.log_likelihood)
    iterations, converged = 0, False
    while iterations < config.max_iter:
        new_params = _m_step(x, y, params, stats, config)
        ortho.append(float(np.abs(new_params.rotation.T @ new_params.rotation - np.eye(k)).max()))
        new_stats = _accumulate(x, y, new_params)
        iterations += 1
        ll_old, ll_new = trace[-1], new_stats.log_likelihood
        evaluated.append(ll_new)
        if callback:
            callback(iterations, new_params, ll_new)
        settled = bool(abs(ll_new - ll_old) <= config.tol * abs(ll_new))
        if ll_new < ll_old - LIKELIHOOD_SLACK:
            # keep the previous parameters; a drop this small is round-off at convergence
            if not settled:
                warnings.warn(
                    f"log-likelihood decreased from {ll_old:.12g} to {ll_new:.12g}; stopping",
                    NonIncreasingLikelihood,
                    stacklevel=2,
                )
            converged = settled
            break
        params, stats = new_params, new_stats
        trace.append(ll_new)
        if settled:
            converged = True
            break
    logger.debug("EM stopped after %d iterations, log-likelihood %.6g", iterations, trace[-1])

    with np.errstate(invalid="ignore", divide="ignore"):
        means = stats.weighted_x / stats.xi[:, None]
    means[stats.xi <= 0] = np.nan
    return RegistrationResult(
        params=params,
        virtual_means=means,
        weights=stats.xi,
        matched=stats.xi >= config.match_threshold,
        best_cluster=stats.best_cluster,
        best_posterior=stats.best_posterior,
        outlier_posterior=stats.outlier,
        cluster_max_posterior=stats.cluster_max,
        iterations=iterations,
        converged=converged,
        log_likelihood_trace=trace,
        orthogonality_trace=ortho,
        evaluated_log_likelihoods=evaluated,
        x=x,
        y=y,
    )
