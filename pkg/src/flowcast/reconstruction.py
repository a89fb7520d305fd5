"""Learning reconstruction coefficients over a fixed or learned basis.

The smooth objective is the negative log-likelihood of a Poisson factor
model: each flow count F[i, j, l] is Poisson with mean <S_i, B[:, j, l]>,
coefficients carry a zero-mean Gaussian prior, basis entries a Gamma(eta,
theta) prior. A graph penalty gamma * tr(S^T L S) ties coefficient rows of
fragments that share the same time slot across weeks, and an l1 term with
weight lambda is handled by soft-thresholding inside a proximal-gradient
loop with backtracked step sizes.

Coefficient rows are updated in a deterministic Gauss-Seidel sweep
(0..N-1); the composite objective never increases across accepted steps.
A Frobenius-loss mode replaces the likelihood with the plain squared
reconstruction error and drops both priors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .errors import ConvergenceError, DataError
from .patterns import BasisSet
from .tensor import FlowTensor, FragmentIndex, laplacian, periodicity_weights

POISSON = "poisson"
FROBENIUS = "frobenius"
_L_MAX = 1e15


@dataclass
class ObjectiveParams:
    lam: float = 0.4                  # l1 weight on S
    gamma: float = 1e-5               # graph smoothing weight
    sigma: float = 1.0                # Gaussian prior std on S entries
    eta: float = 2.0                  # Gamma prior shape on B entries
    theta: float = 1.0                # Gamma prior rate on B entries
    eps_pos: float = 1e-8             # positivity floor inside log terms
    include_zero_cells: bool = False  # count zero cells in the likelihood

    def __post_init__(self):
        vals = [self.lam, self.gamma, self.sigma, self.eta, self.theta, self.eps_pos]
        if not all(math.isfinite(v) for v in vals):
            raise DataError("objective parameters must be finite")
        if self.lam < 0 or self.gamma < 0:
            raise DataError("lambda and gamma must be >= 0")
        if self.sigma <= 0 or self.eta <= 0 or self.theta <= 0 or self.eps_pos <= 0:
            raise DataError("sigma, eta, theta, eps_pos must be > 0")


@dataclass
class PgOptions:
    max_sweeps: int = 500
    rel_tol: float = 1e-6
    loss: str = POISSON
    trace_per_step: bool = False
    lipschitz_init: float = 1.0
    s_init: Optional[np.ndarray] = None
    alt_max_iter: int = 100
    alt_rel_tol: float = 1e-5
    basis_steps: int = 25

    def __post_init__(self):
        if self.loss not in (POISSON, FROBENIUS):
            raise DataError(f"loss must be '{POISSON}' or '{FROBENIUS}', got {self.loss!r}")


@dataclass
class CoefficientMatrix:
    s: np.ndarray                     # (N, C)
    fragments: list[FragmentIndex]

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        if self.s.ndim != 2:
            raise DataError(f"coefficient matrix must be 2-d, got {self.s.shape}")
        if self.fragments and len(self.fragments) != len(self.s):
            raise DataError("one fragment per coefficient row is required")
        if not np.all(np.isfinite(self.s)):
            raise DataError("coefficient matrix has non-finite entries")


@dataclass
class PgState:
    lipschitz: np.ndarray             # final per-row step-size estimates
    sweeps: int
    trace: list[float]                # composite objective, non-increasing
    converged: bool
    warning: bool = False

    def check_monotone(self, tol: float = 1e-10) -> None:
        diffs = np.diff(self.trace)
        if diffs.size and float(diffs.max()) > tol:
            raise ConvergenceError(f"objective increased by {float(diffs.max()):.3e} "
                                   f"(tolerance {tol:.0e})")


def _matrices_of(tensor: Union[FlowTensor, np.ndarray]) -> np.ndarray:
    mats = tensor.matrices if isinstance(tensor, FlowTensor) else np.asarray(tensor, dtype=float)
    if mats.ndim != 3:
        raise DataError(f"expected (N, M, M) stack, got shape {mats.shape}")
    return mats


def _bases_of(bases: Union[BasisSet, np.ndarray]) -> np.ndarray:
    arr = bases.bases if isinstance(bases, BasisSet) else np.asarray(bases, dtype=float)
    if arr.ndim != 3:
        raise DataError(f"expected (C, M, M) basis stack, got shape {arr.shape}")
    if np.any(arr < 0):
        raise DataError("basis matrices must be nonnegative")
    return arr


def graph_penalty(s: np.ndarray, lap: np.ndarray) -> float:
    """tr(S^T L S); equals half the W-weighted sum of squared row gaps."""
    s = np.asarray(s, dtype=float)
    lap = np.asarray(lap, dtype=float)
    if lap.shape != (len(s), len(s)):
        raise DataError(f"Laplacian shape {lap.shape} does not match S rows {len(s)}")
    return float(np.einsum("ic,ij,jc->", s, lap, s))


def prox_l1(z: np.ndarray, threshold: float) -> np.ndarray:
    """Soft-thresholding, the proximal map of threshold * ||.||_1."""
    if threshold < 0:
        raise DataError(f"prox threshold must be >= 0, got {threshold}")
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


def _poisson_cells(fv: np.ndarray, ind: np.ndarray, mu_raw: np.ndarray,
                   eps: float) -> np.ndarray:
    mu = np.maximum(mu_raw, eps)
    return -ind * (fv * np.log(mu) - mu)


def negative_log_likelihood(tensor, bases, s: np.ndarray,
                            params: ObjectiveParams) -> float:
    """Appendix-style factor-model loss: Poisson data term over cells with
    observed flow (all cells when include_zero_cells), Gaussian penalty on S,
    Gamma penalty on B. Inner products and basis entries are floored at
    eps_pos inside the logs."""
    mats = _matrices_of(tensor)
    b = _bases_of(bases)
    n, m = mats.shape[0], mats.shape[1]
    fv = mats.reshape(n, -1)
    bv = np.maximum(b, params.eps_pos).reshape(b.shape[0], -1)
    s = np.asarray(s, dtype=float)
    if s.shape != (n, b.shape[0]):
        raise DataError(f"S shape {s.shape} does not match (N={n}, C={b.shape[0]})")

    ind = np.ones_like(fv) if params.include_zero_cells else (fv > 0).astype(float)
    cells = _poisson_cells(fv, ind, s @ bv, params.eps_pos)
    if not np.all(np.isfinite(cells)):
        i, jl = np.argwhere(~np.isfinite(cells))[0]
        raise DataError(f"non-finite likelihood cell at fragment {i}, "
                        f"entry ({jl // m}, {jl % m})")
    s_prior = float(np.sum(s * s)) / (2.0 * params.sigma ** 2)
    b_prior = -float(np.sum((params.eta - 1.0) * np.log(bv) - params.theta * bv))
    return float(cells.sum()) + s_prior + b_prior


def frobenius_loss(tensor, bases, s: np.ndarray) -> float:
    """Plain reconstruction error 0.5 * sum_i ||F_i - sum_c S_ic B_c||_F^2."""
    mats = _matrices_of(tensor)
    b = _bases_of(bases)
    fv = mats.reshape(mats.shape[0], -1)
    bv = b.reshape(b.shape[0], -1)
    resid = np.asarray(s, dtype=float) @ bv - fv
    return 0.5 * float(np.sum(resid * resid))


def smooth_objective(tensor, bases, s: np.ndarray, params: ObjectiveParams,
                     lap: Optional[np.ndarray] = None, loss: str = POISSON) -> float:
    """The differentiable part handed to the proximal step: loss plus
    gamma * tr(S^T L S) (the l1 term is excluded)."""
    if loss == POISSON:
        value = negative_log_likelihood(tensor, bases, s, params)
    else:
        value = frobenius_loss(tensor, bases, s)
    if params.gamma != 0.0:
        if lap is None:
            raise DataError("gamma > 0 requires a Laplacian")
        value += params.gamma * graph_penalty(s, lap)
    return value


def composite_objective(tensor, bases, s: np.ndarray, params: ObjectiveParams,
                        lap: Optional[np.ndarray] = None, loss: str = POISSON) -> float:
    return smooth_objective(tensor, bases, s, params, lap, loss) \
        + params.lam * float(np.sum(np.abs(s)))


def coefficient_gradient(tensor, bases, s: np.ndarray, params: ObjectiveParams,
                         lap: Optional[np.ndarray] = None,
                         loss: str = POISSON) -> np.ndarray:
    """Analytic gradient of the smooth objective with respect to S."""
    mats = _matrices_of(tensor)
    b = _bases_of(bases)
    fv = mats.reshape(mats.shape[0], -1)
    bv = np.maximum(b, params.eps_pos).reshape(b.shape[0], -1)
    s = np.asarray(s, dtype=float)

    if loss == POISSON:
        ind = np.ones_like(fv) if params.include_zero_cells else (fv > 0).astype(float)
        mu_raw = s @ bv
        mu = np.maximum(mu_raw, params.eps_pos)
        w = np.where(mu_raw > params.eps_pos, -ind * (fv / mu - 1.0), 0.0)
        grad = w @ bv.T + s / params.sigma ** 2
    else:
        grad = (s @ bv - fv) @ bv.T

    if params.gamma != 0.0:
        if lap is None:
            raise DataError("gamma > 0 requires a Laplacian")
        grad = grad + 2.0 * params.gamma * (lap @ s)
    if not np.all(np.isfinite(grad)):
        raise DataError("non-finite entries in coefficient gradient")
    return grad


def basis_gradient(tensor, bases, s: np.ndarray, params: ObjectiveParams,
                   loss: str = POISSON) -> np.ndarray:
    """Analytic gradient of the smooth objective with respect to B,
    shaped like the basis stack."""
    mats = _matrices_of(tensor)
    b = _bases_of(bases)
    c = b.shape[0]
    fv = mats.reshape(mats.shape[0], -1)
    b_used = np.maximum(b, params.eps_pos)
    bv = b_used.reshape(c, -1)
    mask_b = (b >= params.eps_pos).reshape(c, -1).astype(float)
    s = np.asarray(s, dtype=float)

    if loss == POISSON:
        ind = np.ones_like(fv) if params.include_zero_cells else (fv > 0).astype(float)
        mu_raw = s @ bv
        mu = np.maximum(mu_raw, params.eps_pos)
        w = np.where(mu_raw > params.eps_pos, -ind * (fv / mu - 1.0), 0.0)
        grad = (s.T @ w) * mask_b
        grad += (-(params.eta - 1.0) / bv + params.theta) * mask_b
    else:
        grad = (s.T @ (s @ bv - fv)) * mask_b
    if not np.all(np.isfinite(grad)):
        raise DataError("non-finite entries in basis gradient")
    return grad.reshape(b.shape)


def nnls_project_grad(a: np.ndarray, b: np.ndarray, max_iter: int = 500,
                      tol: float = 1e-10) -> np.ndarray:
    """min_{x >= 0} ||a x - b||_2 by projected gradient with the exact
    Lipschitz step 1 / lambda_max(a^T a)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ata = a.T @ a
    atb = a.T @ b
    lmax = float(np.linalg.eigvalsh(ata).max())
    if lmax <= 0:
        return np.zeros(a.shape[1])
    step = 1.0 / lmax
    x = np.zeros(a.shape[1])
    for _ in range(max_iter):
        x_new = np.maximum(x - step * (ata @ x - atb), 0.0)
        if np.max(np.abs(x_new - x)) <= tol * max(1.0, float(np.max(np.abs(x)))):
            return x_new
        x = x_new
    return x


def init_coefficients(tensor, bases, params: Optional[ObjectiveParams] = None) -> np.ndarray:
    """Warm start: nonnegative least squares of each flattened flow matrix
    onto the flattened bases."""
    mats = _matrices_of(tensor)
    b = _bases_of(bases)
    eps = params.eps_pos if params is not None else 1e-8
    a = np.maximum(b, eps).reshape(b.shape[0], -1).T   # (M*M, C)
    fv = mats.reshape(mats.shape[0], -1)
    return np.vstack([nnls_project_grad(a, fv[i]) for i in range(len(fv))])


class _RowObjective:
    """Per-row view of the smooth objective for Gauss-Seidel sweeps.

    All terms that change when row i changes are included, so row-level
    decreases equal the change of the full composite objective.
    """

    def __init__(self, fv, bv, params: ObjectiveParams, lap, loss: str):
        self.fv = fv
        self.bv = bv
        self.params = params
        self.lap = lap
        self.loss = loss
        if loss == POISSON:
            self.ind = np.ones_like(fv) if params.include_zero_cells else (fv > 0).astype(float)

    def cross_term(self, s_all: np.ndarray, i: int) -> np.ndarray:
        """sum_{a != i} L_ia S_a, fixed during the row-i line search."""
        if self.lap is None or self.params.gamma == 0.0:
            return None
        return self.lap[i] @ s_all - self.lap[i, i] * s_all[i]

    def value(self, i: int, s: np.ndarray, cross: np.ndarray) -> float:
        p = self.params
        if self.loss == POISSON:
            cells = _poisson_cells(self.fv[i], self.ind[i], s @ self.bv, p.eps_pos)
            val = float(cells.sum()) + float(s @ s) / (2.0 * p.sigma ** 2)
        else:
            resid = s @ self.bv - self.fv[i]
            val = 0.5 * float(resid @ resid)
        if cross is not None:
            val += p.gamma * (self.lap[i, i] * float(s @ s) + 2.0 * float(cross @ s))
        return val

    def gradient(self, i: int, s: np.ndarray, cross: np.ndarray) -> np.ndarray:
        p = self.params
        if self.loss == POISSON:
            mu_raw = s @ self.bv
            mu = np.maximum(mu_raw, p.eps_pos)
            w = np.where(mu_raw > p.eps_pos, -self.ind[i] * (self.fv[i] / mu - 1.0), 0.0)
            grad = self.bv @ w + s / p.sigma ** 2
        else:
            grad = self.bv @ (s @ self.bv - self.fv[i])
        if cross is not None:
            grad = grad + 2.0 * p.gamma * (self.lap[i, i] * s + cross)
        return grad


def _sweep_rows(s: np.ndarray, row_obj: _RowObjective, lam: float,
                lip: np.ndarray, obj: float, trace: list[float],
                per_step: bool) -> tuple[float, int]:
    """One Gauss-Seidel pass over all rows; returns (objective, accepted steps)."""
    accepted = 0
    for i in range(len(s)):
        cross = row_obj.cross_term(s, i)
        cur = s[i]
        f_cur = row_obj.value(i, cur, cross)
        grad = row_obj.gradient(i, cur, cross)
        step_l = max(lip[i] * 0.5, 1e-8)
        while True:
            cand = prox_l1(cur - grad / step_l, lam / step_l)
            delta = cand - cur
            if not np.any(delta):
                break
            f_cand = row_obj.value(i, cand, cross)
            bound = f_cur + float(grad @ delta) + 0.5 * step_l * float(delta @ delta)
            if f_cand <= bound:
                break
            step_l *= 2.0
            if step_l > _L_MAX:
                cand = cur
                break
        if cand is cur or not np.any(cand - cur):
            continue
        lip[i] = step_l
        d_obj = (f_cand - f_cur) + lam * float(np.sum(np.abs(cand)) - np.sum(np.abs(cur)))
        if d_obj > 0.0:
            continue  # progress below floating-point resolution
        s[i] = cand
        obj += d_obj
        accepted += 1
        if per_step:
            trace.append(obj)
    return obj, accepted


def fit_coefficients(tensor, bases, params: ObjectiveParams,
                     options: Optional[PgOptions] = None,
                     lap: Optional[np.ndarray] = None
                     ) -> tuple[CoefficientMatrix, PgState]:
    """Proximal-gradient fit of S with fixed bases.

    Rows are swept in order 0..N-1; each step soft-thresholds a backtracked
    gradient step, with the per-row step size doubled until the quadratic
    upper bound holds. Stops when the relative objective change per sweep
    drops to rel_tol or after max_sweeps.
    """
    options = options or PgOptions()
    mats = _matrices_of(tensor)
    b = _bases_of(bases)
    fragments = tensor.fragments if isinstance(tensor, FlowTensor) else []
    n = mats.shape[0]

    if params.gamma != 0.0 and lap is None:
        if not fragments:
            raise DataError("gamma > 0 requires fragment metadata or an explicit Laplacian")
        lap = laplacian(periodicity_weights(fragments))

    fv = mats.reshape(n, -1)
    bv = np.maximum(b, params.eps_pos).reshape(b.shape[0], -1)
    s = np.array(options.s_init, dtype=float) if options.s_init is not None \
        else init_coefficients(mats, b, params)
    if s.shape != (n, b.shape[0]):
        raise DataError(f"initial S shape {s.shape} does not match (N={n}, C={b.shape[0]})")

    row_obj = _RowObjective(fv, bv, params, lap if params.gamma != 0.0 else None, options.loss)
    lip = np.full(n, float(options.lipschitz_init))
    obj = composite_objective(mats, b, s, params, lap, options.loss)
    trace = [obj]

    converged = False
    sweeps = 0
    for sweeps in range(1, options.max_sweeps + 1):
        prev = obj
        obj, accepted = _sweep_rows(s, row_obj, params.lam, lip, obj, trace,
                                    options.trace_per_step)
        if not options.trace_per_step:
            trace.append(obj)
        if accepted == 0 or abs(prev - obj) <= options.rel_tol * max(1.0, abs(prev)):
            converged = True
            break

    state = PgState(lipschitz=lip, sweeps=sweeps, trace=trace, converged=converged,
                    warning=not converged)
    state.check_monotone()
    if not converged:
        warnings.warn(f"coefficient fit stopped at max_sweeps={options.max_sweeps}")
    return CoefficientMatrix(s=s, fragments=list(fragments)), state


def _basis_value(mats, b, s, params: ObjectiveParams, loss: str) -> float:
    # graph and l1 terms are constant in B and drop out of B-step differences
    if loss == POISSON:
        return negative_log_likelihood(mats, b, s, params)
    return frobenius_loss(mats, b, s)


def _basis_phase(mats, b, s, params: ObjectiveParams, loss: str, obj: float,
                 lip_b: float, steps: int) -> tuple[np.ndarray, float, float]:
    """Projected-gradient descent on B with backtracking; keeps B >= eps_pos."""
    c = b.shape[0]
    for _ in range(steps):
        grad = basis_gradient(mats, b, s, params, loss).reshape(c, -1)
        bv = b.reshape(c, -1)
        f_cur = _basis_value(mats, b, s, params, loss)
        step_l = max(lip_b * 0.5, 1e-8)
        while True:
            cand = np.maximum(bv - grad / step_l, params.eps_pos)
            delta = cand - bv
            if not np.any(delta):
                return b, obj, lip_b
            f_cand = _basis_value(mats, cand.reshape(b.shape), s, params, loss)
            bound = f_cur + float(np.sum(grad * delta)) \
                + 0.5 * step_l * float(np.sum(delta * delta))
            if f_cand <= bound:
                break
            step_l *= 2.0
            if step_l > _L_MAX:
                return b, obj, lip_b
        d_obj = f_cand - f_cur
        if d_obj > 0.0:
            return b, obj, lip_b
        b = cand.reshape(b.shape)
        obj += d_obj
        lip_b = step_l
        if abs(d_obj) <= 1e-12 * max(1.0, abs(obj)):
            break
    return b, obj, lip_b


def fit_alternating(tensor, params: ObjectiveParams, c: int,
                    options: Optional[PgOptions] = None, seed: int = 0
                    ) -> tuple[BasisSet, CoefficientMatrix, PgState]:
    """Learn bases and coefficients jointly: alternate the coefficient fit
    with projected-gradient basis updates, starting from Gamma-distributed
    random bases. Bases are returned sorted by descending total mass with
    coefficient columns permuted to match."""
    options = options or PgOptions()
    mats = _matrices_of(tensor)
    fragments = tensor.fragments if isinstance(tensor, FlowTensor) else []
    n, m = mats.shape[0], mats.shape[1]
    if c < 1:
        raise DataError(f"basis count must be >= 1, got {c}")

    lap = None
    if params.gamma != 0.0:
        if not fragments:
            raise DataError("gamma > 0 requires fragment metadata")
        lap = laplacian(periodicity_weights(fragments))

    rng = np.random.default_rng(seed)
    b = np.maximum(rng.gamma(shape=params.eta, scale=1.0 / params.theta, size=(c, m, m)),
                   params.eps_pos)
    s = init_coefficients(mats, b, params)

    obj = composite_objective(mats, b, s, params, lap, options.loss)
    trace = [obj]
    lip_b = float(options.lipschitz_init)
    converged = False
    state = None
    for _ in range(options.alt_max_iter):
        prev = obj
        coeffs, state = fit_coefficients(mats, b, params,
                                         replace(options, s_init=s), lap=lap)
        s = coeffs.s
        obj = state.trace[-1]
        trace.append(obj)
        b, obj, lip_b = _basis_phase(mats, b, s, params, options.loss, obj, lip_b,
                                     options.basis_steps)
        trace.append(obj)
        if abs(prev - obj) <= options.alt_rel_tol * max(1.0, abs(prev)):
            converged = True
            break
    if not converged:
        warnings.warn(f"alternating fit stopped at alt_max_iter={options.alt_max_iter}")

    order = np.argsort(-b.sum(axis=(1, 2)), kind="stable")
    b = b[order]
    s = s[:, order]
    labels = np.argmax(s, axis=1)
    basis_set = BasisSet(bases=b, labels=labels, c=c)
    coeffs = CoefficientMatrix(s=s, fragments=list(fragments))
    final = PgState(lipschitz=state.lipschitz if state else np.empty(0),
                    sweeps=len(trace) - 1, trace=trace, converged=converged,
                    warning=not converged)
    final.check_monotone()
    return basis_set, coeffs, final
