"""Traffic-pattern extraction from a flow tensor.

Flattened flow matrices are expressed as sparse combinations of each other
(self-expressiveness), the absolute coefficients are symmetrized into a
similarity graph, and spectral clustering on its normalized Laplacian groups
the fragments. Each group's nonnegative centroid becomes one base matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.cluster import KMeans

from .errors import ConvergenceError, DataError
from .geo import RegionMap, project_equirectangular
from .tensor import FlowTensor


@dataclass
class AdmmParams:
    """Solver knobs for the self-expressive coefficient problem.

    tau weighs the data-fidelity term against the l1 penalty; mu is the ADMM
    penalty. Either may be None to use the data-driven defaults (mu =
    1/mean off-diagonal |Gram|, tau = 10/mu). recon_tol bounds the accepted
    per-column relative reconstruction residual before a warning is raised.
    """

    tau: Optional[float] = None
    mu: Optional[float] = None
    max_iter: int = 2000
    tol: float = 1e-5
    recon_tol: float = 0.15
    normalize: bool = False


@dataclass
class SelfExpressCoeffs:
    csc: np.ndarray                  # (N, N), column n expresses fragment n, zero diagonal
    iterations: int
    primal_residual: float
    dual_residual: float
    column_residuals: np.ndarray     # relative reconstruction error per fragment
    converged: bool
    warning: bool = False


@dataclass
class SimilarityGraph:
    wg: np.ndarray   # symmetric nonnegative similarity
    lw: np.ndarray   # normalized Laplacian I - D^{-1/2} Wg D^{-1/2}


@dataclass
class BasisSet:
    bases: np.ndarray        # (C, M, M), nonnegative, sorted by descending mass
    labels: np.ndarray       # base index per fragment
    c: int
    masses: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.masses is None:
            self.masses = self.bases.sum(axis=(1, 2))


def _flatten(tensor: Union[FlowTensor, np.ndarray]) -> np.ndarray:
    """Columns of the returned (M*M, N) array are the flattened matrices."""
    matrices = tensor.matrices if isinstance(tensor, FlowTensor) else np.asarray(tensor, dtype=float)
    if matrices.ndim != 3:
        raise DataError(f"expected (N, M, M) stack, got shape {matrices.shape}")
    n = matrices.shape[0]
    return matrices.reshape(n, -1).T


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def solve_self_expressive(tensor: Union[FlowTensor, np.ndarray],
                          tau: Optional[float] = None,
                          params: Optional[AdmmParams] = None) -> SelfExpressCoeffs:
    """Solve min ||C||_1 + (tau/2)||X - X C||_F^2  s.t. diag(C) = 0 by ADMM.

    X stacks the flattened flow matrices as columns. Zero-norm columns are
    excluded from the dictionary and receive zero coefficients. Iterates
    until both the primal residual ||Z - C||_F and the dual residual
    mu*||C - C_prev||_F fall below tol, or max_iter is reached (the best
    iterate is returned with a warning flag in that case).
    """
    params = params or AdmmParams()
    if tau is not None:
        params = replace(params, tau=tau)
    x_full = _flatten(tensor)
    n_total = x_full.shape[1]
    if n_total < 2:
        raise DataError(f"self-expressive coding needs at least 2 fragments, got {n_total}")

    norms = np.linalg.norm(x_full, axis=0)
    active = np.flatnonzero(norms > 0)
    if active.size < 2:
        # nothing to express: all-zero coefficients
        return SelfExpressCoeffs(csc=np.zeros((n_total, n_total)), iterations=0,
                                 primal_residual=0.0, dual_residual=0.0,
                                 column_residuals=np.zeros(n_total),
                                 converged=True)

    x = x_full[:, active]
    if params.normalize:
        x = x / norms[active]
    n = x.shape[1]

    gram = x.T @ x
    off = np.abs(gram[~np.eye(n, dtype=bool)])
    mean_off = float(off.mean()) if off.size and off.mean() > 0 else 1.0
    mu = params.mu if params.mu is not None else 1.0 / mean_off
    tau_eff = params.tau if params.tau is not None else 10.0 / mu

    lhs = cho_factor(tau_eff * gram + mu * np.eye(n))
    c = np.zeros((n, n))
    u = np.zeros((n, n))
    r_prim = r_dual = np.inf
    it = 0
    for it in range(1, params.max_iter + 1):
        z = cho_solve(lhs, tau_eff * gram + mu * (c - u))
        c_prev = c
        c = soft_threshold(z + u, 1.0 / mu)
        np.fill_diagonal(c, 0.0)
        u = u + z - c
        r_prim = float(np.linalg.norm(z - c))
        r_dual = float(mu * np.linalg.norm(c - c_prev))
        if r_prim <= params.tol and r_dual <= params.tol:
            break
    converged = r_prim <= params.tol and r_dual <= params.tol
    if not converged:
        warnings.warn(f"self-expressive ADMM stopped at max_iter={params.max_iter} "
                      f"(primal {r_prim:.2e}, dual {r_dual:.2e})")

    if params.normalize:
        # map coefficients back to the original column scale so the
        # reconstruction invariant refers to the raw tensor
        c = c * (norms[active][None, :] / norms[active][:, None])
    csc = np.zeros((n_total, n_total))
    csc[np.ix_(active, active)] = c
    np.fill_diagonal(csc, 0.0)

    recon = x_full @ csc
    col_res = np.zeros(n_total)
    nz = norms > 0
    col_res[nz] = np.linalg.norm(recon[:, nz] - x_full[:, nz], axis=0) / norms[nz]
    warn_res = bool(np.any(col_res > params.recon_tol))
    if warn_res:
        warnings.warn(f"{int(np.sum(col_res > params.recon_tol))} fragments exceed "
                      f"relative reconstruction tolerance {params.recon_tol}")
    return SelfExpressCoeffs(csc=csc, iterations=it, primal_residual=r_prim,
                             dual_residual=r_dual, column_residuals=col_res,
                             converged=converged, warning=warn_res or not converged)


def build_similarity(coeffs: SelfExpressCoeffs) -> SimilarityGraph:
    """Symmetrize |Csc| into the similarity graph and form its normalized
    Laplacian; isolated nodes use a unit degree so Lw stays finite."""
    wg = np.abs(coeffs.csc) + np.abs(coeffs.csc).T
    deg = wg.sum(axis=1)
    deg_safe = np.where(deg > 0, deg, 1.0)
    inv_sqrt = 1.0 / np.sqrt(deg_safe)
    lw = np.eye(len(wg)) - inv_sqrt[:, None] * wg * inv_sqrt[None, :]
    lw = 0.5 * (lw + lw.T)
    return SimilarityGraph(wg=wg, lw=lw)


def spectral_cluster(graph: SimilarityGraph, c: int, seed: int = 0,
                     restarts: int = 50) -> np.ndarray:
    """Cluster fragments from the c bottom eigenvectors of the normalized
    Laplacian, row-normalized, via k-means (k-means++ seeding, best of
    ``restarts`` runs)."""
    n = graph.lw.shape[0]
    if not (1 <= c <= n):
        raise DataError(f"cluster count must satisfy 1 <= c <= {n}, got {c}")
    if c == 1:
        return np.zeros(n, dtype=int)

    eigvals, eigvecs = np.linalg.eigh(graph.lw)
    embedding = eigvecs[:, np.argsort(eigvals)[:c]]
    row_norms = np.linalg.norm(embedding, axis=1)
    embedding = embedding / np.where(row_norms > 0, row_norms, 1.0)[:, None]

    for attempt in range(10):
        km = KMeans(n_clusters=c, init="k-means++", n_init=restarts,
                    random_state=seed + 1000 * attempt)
        labels = km.fit_predict(embedding)
        if len(np.unique(labels)) == c:
            return labels.astype(int)
    raise ConvergenceError(f"k-means produced an empty cluster in 10 reseeded attempts (c={c})")


def construct_bases(tensor: Union[FlowTensor, np.ndarray], labels: np.ndarray,
                    c: int) -> BasisSet:
    """Entry-wise mean of each cluster, floored at zero, ordered by
    descending total mass. Labels are remapped to the new base order."""
    matrices = tensor.matrices if isinstance(tensor, FlowTensor) else np.asarray(tensor, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(matrices):
        raise DataError("one label per fragment is required")
    m = matrices.shape[1]
    bases = np.empty((c, m, m))
    for k in range(c):
        members = matrices[labels == k]
        if len(members) == 0:
            raise DataError(f"cluster {k} is empty")
        bases[k] = np.maximum(members.mean(axis=0), 0.0)
    masses = bases.sum(axis=(1, 2))
    order = np.argsort(-masses, kind="stable")
    relabel = np.empty(c, dtype=int)
    relabel[order] = np.arange(c)
    return BasisSet(bases=bases[order], labels=relabel[labels], c=c, masses=masses[order])


def extract_patterns(tensor: Union[FlowTensor, np.ndarray], c: int,
                     params: Optional[AdmmParams] = None, seed: int = 0,
                     restarts: int = 50) -> tuple[BasisSet, SelfExpressCoeffs]:
    """End-to-end: self-expressive coding, similarity graph, spectral
    clustering, base construction."""
    coeffs = solve_self_expressive(tensor, params=params)
    graph = build_similarity(coeffs)
    labels = spectral_cluster(graph, c, seed=seed, restarts=restarts)
    return construct_bases(tensor, labels, c), coeffs


def distance_histogram(basis_set: BasisSet, region_map: RegionMap,
                       bin_width_m: float = 500.0) -> dict:
    """Per-base flow mass binned by straight-line distance between region
    centroids, for the pattern report."""
    cxy = project_equirectangular(region_map.centroids(), region_map.ref_lat)
    dist = np.linalg.norm(cxy[:, None, :] - cxy[None, :, :], axis=2)
    max_d = float(dist.max()) if dist.size else 0.0
    n_bins = max(1, int(np.ceil(max_d / bin_width_m)) or 1)
    edges = np.arange(n_bins + 1) * bin_width_m
    bin_of = np.minimum((dist / bin_width_m).astype(int), n_bins - 1)
    hist = np.zeros((basis_set.c, n_bins))
    for k in range(basis_set.c):
        np.add.at(hist[k], bin_of.ravel(), basis_set.bases[k].ravel())
    return {"edges_m": edges.tolist(), "mass": hist.tolist()}
