"""Flow prediction from averaged coefficient transitions.

A one-step transition is the minimum-Frobenius-norm matrix A with
s_prev A = s_next (the pseudoinverse of the previous row times the next
row). Two averages drive the forecast: one over the p transitions between
consecutive hourly fragments just before the target, one over the q
transitions between same-hour rows of consecutive prior days with the
target's day type. Predicted rows come from the average of both chains and
are rolled forward for multi-step horizons; flow matrices are the
coefficient-weighted sum of the bases, clamped at zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Union

import numpy as np

from .errors import DataError
from .patterns import BasisSet
from .reconstruction import CoefficientMatrix
from .tensor import FRAGMENT_SECONDS, FragmentIndex, default_day_type

HOUR = timedelta(seconds=FRAGMENT_SECONDS)
DAY = timedelta(hours=24)


@dataclass
class TransitionModel:
    a_p: np.ndarray      # (C, C) averaged precedent transition
    a_q: np.ndarray      # (C, C) averaged periodic transition
    p: int               # number of precedent transitions averaged
    q: int               # number of periodic transitions averaged
    period: int = 24     # fragments per day
    degenerate_pairs: int = 0


@dataclass
class Forecast:
    horizon: int
    fragments: list[FragmentIndex]
    rows: np.ndarray          # (h+1, C) predicted coefficient rows
    matrices: np.ndarray      # (h+1, M, M) predicted flows, >= 0
    outflow: np.ndarray       # (h+1, M) row sums
    inflow: np.ndarray        # (h+1, M) column sums
    warnings: list[str] = field(default_factory=list)


def solve_transition(s_prev: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """Minimum-norm exact solution of s_prev A = s_next.

    A = s_prev^+ s_next is rank one and reproduces s_next exactly. A near-zero
    s_prev has no information; the identity is returned with a warning.
    """
    s_prev = np.asarray(s_prev, dtype=float).ravel()
    s_next = np.asarray(s_next, dtype=float).ravel()
    if s_prev.shape != s_next.shape:
        raise DataError(f"row shapes differ: {s_prev.shape} vs {s_next.shape}")
    nrm2 = float(s_prev @ s_prev)
    if nrm2 <= 1e-20:
        warnings.warn("degenerate transition pair (near-zero previous row); using identity")
        return np.eye(len(s_prev))
    return np.outer(s_prev / nrm2, s_next)


def _row_lookup(coeffs: CoefficientMatrix) -> dict[datetime, int]:
    if not coeffs.fragments:
        raise DataError("coefficient matrix carries no fragment metadata")
    return {f.start: i for i, f in enumerate(coeffs.fragments)}


def _chain_pairs(rows: list[np.ndarray]) -> list[np.ndarray]:
    """Transitions oldest->newest between consecutive rows of a chain given
    newest-first."""
    return [solve_transition(rows[k + 1], rows[k]) for k in range(len(rows) - 1)]


def build_transition_model(coeffs: CoefficientMatrix, t: datetime, p: int, q: int,
                           day_type: Optional[str] = None) -> TransitionModel:
    """Average transition matrices from history for a target fragment at t.

    The precedent chain takes the consecutive hourly rows ending at t-1h; the
    periodic chain takes rows at the same hour on prior days whose day type
    matches the target's (non-matching days are skipped, not counted).
    Shorter-than-requested chains shrink p or q with a warning; an empty
    chain is an error.
    """
    if p < 1 or q < 1:
        raise DataError(f"p and q must be >= 1, got p={p}, q={q}")
    index = _row_lookup(coeffs)
    if day_type is None:
        day_type = default_day_type(t.date())

    preceding = []
    for k in range(1, p + 2):
        i = index.get(t - k * HOUR)
        if i is None:
            break
        preceding.append(coeffs.s[i])
    if len(preceding) < 2:
        raise DataError(f"no usable precedent history before {t}")
    p_eff = len(preceding) - 1
    if p_eff < p:
        warnings.warn(f"precedent history shorter than requested: p={p_eff} (wanted {p})")

    earliest = min(index)
    periodic = []
    when = t - DAY
    while when >= earliest and len(periodic) < q + 1:
        i = index.get(when)
        if i is not None and coeffs.fragments[i].day_type == day_type:
            periodic.append(coeffs.s[i])
        when -= DAY
    if len(periodic) < 2:
        raise DataError(f"no usable periodic history before {t} (day_type={day_type})")
    q_eff = len(periodic) - 1
    if q_eff < q:
        warnings.warn(f"periodic history shorter than requested: q={q_eff} (wanted {q})")

    degenerate = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        a_p = np.mean(_chain_pairs(preceding), axis=0)
        a_q = np.mean(_chain_pairs(periodic), axis=0)
        degenerate = sum("degenerate" in str(w.message) for w in caught)
    return TransitionModel(a_p=a_p, a_q=a_q, p=p_eff, q=q_eff,
                           degenerate_pairs=degenerate)


def predict_row(model: TransitionModel, s_prev: np.ndarray,
                s_prev_day: np.ndarray) -> np.ndarray:
    """One-step prediction: average of both transitioned reference rows."""
    return 0.5 * (np.asarray(s_prev) @ model.a_p + np.asarray(s_prev_day) @ model.a_q)


def reconstruct_flow(row: np.ndarray, bases: Union[BasisSet, np.ndarray]) -> np.ndarray:
    """Coefficient-weighted sum of bases, clamped at zero."""
    b = bases.bases if isinstance(bases, BasisSet) else np.asarray(bases, dtype=float)
    return np.maximum(np.tensordot(np.asarray(row, dtype=float), b, axes=(0, 0)), 0.0)


def predict_horizon(model: TransitionModel, coeffs: CoefficientMatrix, t: datetime,
                    h: int, bases: Union[BasisSet, np.ndarray],
                    calendar: Optional[dict] = None) -> Forecast:
    """Roll the one-step prediction forward over fragments t .. t+h.

    Each predicted row is appended to the working history and serves as the
    precedent reference of the next step. The periodic reference prefers the
    true row 24h earlier, then a predicted one, then older same-hour rows of
    matching day type; as a last resort the precedent row stands in.
    """
    if h < 0:
        raise DataError(f"horizon must be >= 0, got {h}")
    index = _row_lookup(coeffs)
    b = bases.bases if isinstance(bases, BasisSet) else np.asarray(bases, dtype=float)
    m = b.shape[1]
    calendar = calendar or {}
    notes = []

    def day_type_of(when: datetime) -> str:
        return calendar.get(when.date(), default_day_type(when.date()))

    history: dict[datetime, np.ndarray] = {f.start: coeffs.s[i]
                                           for i, f in enumerate(coeffs.fragments)}
    predicted: dict[datetime, np.ndarray] = {}
    rows = np.empty((h + 1, coeffs.s.shape[1]))
    fragments = []
    for step in range(h + 1):
        when = t + step * HOUR
        s_prev = predicted.get(when - HOUR)
        if s_prev is None:
            s_prev = history.get(when - HOUR)
        if s_prev is None:
            raise DataError(f"missing precedent row for {when}")

        s_prev_day = history.get(when - DAY)
        if s_prev_day is None:
            s_prev_day = predicted.get(when - DAY)
        if s_prev_day is None:
            back = when - 2 * DAY
            for _ in range(7):
                i = index.get(back)
                if i is not None and coeffs.fragments[i].day_type == day_type_of(when):
                    s_prev_day = coeffs.s[i]
                    break
                back -= DAY
        if s_prev_day is None:
            notes.append(f"{when}: no periodic reference, reusing precedent row")
            s_prev_day = s_prev

        row = predict_row(model, s_prev, s_prev_day)
        predicted[when] = row
        rows[step] = row
        fragments.append(FragmentIndex(n=step, start=when, day_type=day_type_of(when)))

    matrices = np.maximum(np.tensordot(rows, b, axes=(1, 0)), 0.0)
    return Forecast(horizon=h, fragments=fragments, rows=rows, matrices=matrices,
                    outflow=matrices.sum(axis=2).reshape(h + 1, m),
                    inflow=matrices.sum(axis=1).reshape(h + 1, m),
                    warnings=notes)
