"""Laplacian eigenmap embedding of a shape graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigsh, splu

from .errors import DimensionMismatch, InsufficientNodes, ParseError, SolverFailure
from .graph import normalized_laplacian

DEFAULT_K = 15
RESIDUAL_TOL = 1e-8
# shift for shift-invert mode; must be negative so that L - sigma*I stays SPD
_SHIFT = -1e-3


@dataclass(frozen=True)
class Embedding:
    """K smallest nonzero eigenpairs of a graph and the embedded coordinates.

    ``eigenvectors`` are unit-norm eigenvectors of the symmetric normalized
    Laplacian. ``coordinates`` holds the same vectors mapped back to the
    random-walk (generalized) form ``D^-1/2 v`` and renormalized to unit norm;
    row ``i`` is the embedded position of node ``i``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    coordinates: np.ndarray

    @property
    def k(self):
        return len(self.eigenvalues)

    @property
    def n_points(self):
        return self.coordinates.shape[0]


def _fix_signs(vectors):
    # largest-magnitude entry positive; keeps repeated runs comparable
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _dense_pairs(lap, n_pairs):
    vals, vecs = scipy.linalg.eigh(lap.toarray())
    return vals[:n_pairs], vecs[:, :n_pairs]


def _sparse_pairs(lap, n_pairs, seed, maxiter):
    n = lap.shape[0]
    shifted = (lap - _SHIFT * sp.identity(n, format="csc")).tocsc()
    lu = splu(shifted)
    op_inv = LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        vals, vecs = eigsh(
            lap,
            k=n_pairs,
            sigma=_SHIFT,
            which="LM",
            OPinv=op_inv,
            v0=v0,
            tol=0,
            maxiter=maxiter,
        )
    except (ArpackNoConvergence, ArpackError) as exc:
        raise SolverFailure(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _rayleigh_ritz(lap, vecs):
    # one projection step: re-orthonormalize and re-diagonalize in the found subspace
    q, _ = np.linalg.qr(vecs)
    small = q.T @ (lap @ q)
    small = (small + small.T) * 0.5
    vals, rot = np.linalg.eigh(small)
    return vals, q @ rot


def embed(graph, k_request=DEFAULT_K, seed=0, maxiter=None):
    """Embed ``graph`` with its ``k_request`` smallest nonzero Laplacian eigenpairs.

    The ``k_request + 1`` smallest eigenpairs of the symmetric normalized
    Laplacian are computed with shift-invert Lanczos (dense ``eigh`` only when
    every eigenpair is requested) and the zero pair is discarded. The start
    vector is drawn from ``seed`` so repeated runs are reproducible.

    Raises
    ------
    InsufficientNodes
        If ``k_request + 1`` exceeds the number of nodes.
    SolverFailure
        If the eigensolver does not converge or the residual check fails.
    """
    n = graph.n_nodes
    k_request = int(k_request)
    if k_request < 1:
        raise ValueError("k_request must be >= 1")
    if k_request + 1 > n:
        raise InsufficientNodes(f"cannot extract {k_request} nonzero eigenpairs from {n} nodes")

    lap = normalized_laplacian(graph)
    n_pairs = k_request + 1
    if n_pairs >= n:
        vals, vecs = _dense_pairs(lap, n_pairs)
    else:
        vals, vecs = _sparse_pairs(lap, n_pairs, seed, maxiter)
        vals, vecs = _rayleigh_ritz(lap, vecs)

    if vals[0] > 1e-8:
        raise SolverFailure(f"smallest eigenvalue {vals[0]:.3e} is not zero; graph disconnected?")
    vals, vecs = vals[1:], vecs[:, 1:]
    if np.any(vals <= 0):
        raise SolverFailure("zero eigenvalue has multiplicity > 1; graph disconnected?")

    vecs = _fix_signs(vecs / np.linalg.norm(vecs, axis=0))
    resid = np.linalg.norm(lap @ vecs - vecs * vals, axis=0)
    if np.any(resid > RESIDUAL_TOL):
        raise SolverFailure(f"eigenpair residual {resid.max():.3e} exceeds {RESIDUAL_TOL}")

    coords = vecs / np.sqrt(graph.degrees)[:, None]
    coords = coords / np.linalg.norm(coords, axis=0)
    for arr in (vals, vecs, coords):
        arr.setflags(write=False)
    return Embedding(eigenvalues=vals, eigenvectors=vecs, coordinates=coords)


def embedding_distortion(graph, emb):
    """Sum over edges of ``w_ij * |x_i - x_j|**2`` for the embedded coordinates."""
    coords = emb.coordinates if isinstance(emb, Embedding) else np.asarray(emb, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.shape[0] != graph.n_nodes:
        raise DimensionMismatch(
            f"embedding has {coords.shape[0]} rows but graph has {graph.n_nodes} nodes"
        )
    i, j, w = graph.edges()
    diff = coords[i] - coords[j]
    return float(np.sum(w * np.einsum("ij,ij->i", diff, diff)))


def save_embedding(emb, path):
    """Write ``n k`` on the first line, eigenvalues as a comment, then one row per node."""
    with open(path, "w") as fh:
        fh.write(f"{emb.n_points} {emb.k}\n")
        fh.write("# eigenvalues " + " ".join(f"{v:.17g}" for v in emb.eigenvalues) + "\n")
        np.savetxt(fh, emb.coordinates, fmt="%.17g")


def load_embedding(path):
    """Read an embedding written by :func:`save_embedding`.

    Only coordinates and eigenvalues are stored, so ``eigenvectors`` of the
    returned object equals its ``coordinates``.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty embedding file", path=path)
    try:
        n, k = (int(t) for t in lines[0].split())
    except ValueError:
        raise ParseError("header must be 'n k'", line=1, path=path) from None
    eigenvalues = np.full(k, np.nan)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            parts = text[1:].split()
            if parts and parts[0] == "eigenvalues":
                eigenvalues = np.array([float(v) for v in parts[1:]])
            continue
        try:
            row = [float(t) for t in text.split()]
        except ValueError:
            raise ParseError(f"bad number in {text!r}", line=lineno, path=path) from None
        if len(row) != k:
            raise ParseError(f"expected {k} values, got {len(row)}", line=lineno, path=path)
        rows.append(row)
    if len(rows) != n:
        raise ParseError(f"expected {n} rows, got {len(rows)}", path=path)
    coords = np.array(rows, dtype=float).reshape(n, k)
    return Embedding(eigenvalues=eigenvalues, eigenvectors=coords, coordinates=coords)
