"""Incremental inverse tracking via rank-k Sherman-Morrison-Woodbury updates.

The tracked state is T = (S + gamma*I)^-1 together with the current head W.
A round's Gram change arrives factored as ΔS = UᵀU with U of shape r x d,
so each update solves only an r x r capacitance system:

    add:     T+ = T - TUᵀ(I_r + U T Uᵀ)^-1 U T
             W+ = W - T+ Uᵀ(U W) + T+ G_add
    delete:  T- = T + TUᵀ(I_r - U T Uᵀ)^-1 U T
             W- = W + T- Uᵀ(U W) - T- G_del

Deletions are feasible exactly when I_r - U T Uᵀ stays SPD; its Cholesky
failing is the DowndateInfeasible signal that sends the caller back to an
exact rebuild from the ledger.  T is re-symmetrized after every update
because the algebra is symmetric but floating evaluation is not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import stats as stats_mod
from .kernels import (
    DimensionMismatch,
    NotSPD,
    as_matrix,
    cholesky_spd,
    frobenius_norm,
    solve_spd,
    spd_inverse,
    spectral_norm,
    symmetrize,
)


class DowndateInfeasible(Exception):
    """The capacitance matrix I - U T Uᵀ of a delete step is not SPD."""


@dataclass(frozen=True)
class InverseState:
    T: np.ndarray
    W: np.ndarray
    gamma: float
    updates_since_reset: int = 0


def init_from_ledger(ledger: stats_mod.Ledger) -> InverseState:
    """Exact state rebuild: T = (S + gamma*I)^-1 and W = T G."""
    t = spd_inverse(stats_mod.regularized_gram(ledger))
    return InverseState(t, t @ ledger.stats.G, float(ledger.gamma), 0)


def _clean_rows(u, d: int, dtype) -> np.ndarray:
    """Drop all-zero rows of U; empty client batches contribute nothing."""
    if u is None:
        return np.zeros((0, d), dtype=dtype)
    u = as_matrix(u, "U")
    if u.shape[1] != d:
        raise DimensionMismatch(f"U has {u.shape[1]} columns, expected {d}")
    keep = np.any(u != 0, axis=1)
    return u[keep] if not keep.all() else u


def smw_add(state: InverseState, u, g_plus) -> InverseState:
    """Fold the addition ΔS = UᵀU and its label moment into the state."""
    d = state.T.shape[0]
    u = _clean_rows(u, d, state.T.dtype)
    g_plus = np.asarray(g_plus, dtype=state.T.dtype)
    if u.shape[0] == 0 and not np.any(g_plus):
        return state
    ut = u @ state.T
    cap = np.eye(u.shape[0], dtype=state.T.dtype) + symmetrize(ut @ u.T)
    try:
        factor = cholesky_spd(cap)
    except NotSPD as exc:
        # Cannot happen for finite U and SPD T; treat as corrupted state.
        raise NotSPD(f"add capacitance lost positive definiteness: {exc}") from exc
    t_new = symmetrize(state.T - ut.T @ solve_spd(factor, ut))
    w_new = state.W - t_new @ (u.T @ (u @ state.W)) + t_new @ g_plus
    return InverseState(t_new, w_new, state.gamma, state.updates_since_reset + 1)


def smw_delete(state: InverseState, u, g_minus) -> InverseState:
    """Remove the deletion ΔS = UᵀU and its label moment from the state."""
    d = state.T.shape[0]
    u = _clean_rows(u, d, state.T.dtype)
    g_minus = np.asarray(g_minus, dtype=state.T.dtype)
    if u.shape[0] == 0 and not np.any(g_minus):
        return state
    ut = u @ state.T
    cap = np.eye(u.shape[0], dtype=state.T.dtype) - symmetrize(ut @ u.T)
    try:
        factor = cholesky_spd(cap)
    except NotSPD as exc:
        raise DowndateInfeasible(str(exc)) from exc
    t_new = symmetrize(state.T + ut.T @ solve_spd(factor, ut))
    w_new = state.W + t_new @ (u.T @ (u @ state.W)) - t_new @ g_minus
    return InverseState(t_new, w_new, state.gamma, state.updates_since_reset + 1)


def feasibility_check(t, u) -> tuple[bool, float]:
    """Whether a downdate with U is feasible, plus the diagnostic bound.

    Feasibility is lambda_max(U T Uᵀ) < 1 up to a 1e-10 safety margin;
    the eigenvalue estimate is returned either way.
    """
    t = as_matrix(t, "T")
    u = _clean_rows(u, t.shape[0], t.dtype)
    if u.shape[0] == 0:
        return True, 0.0
    lam = spectral_norm(symmetrize(u @ t @ u.T))
    return lam < 1.0 - 1e-10, lam


def capacitance_condition(t, u) -> float:
    """Condition estimate of I - U T Uᵀ from its Cholesky diagonal.

    Returns the squared ratio of extreme diagonal entries of the factor,
    or +inf when the factorization fails outright.
    """
    t = as_matrix(t, "T")
    u = _clean_rows(u, t.shape[0], t.dtype)
    if u.shape[0] == 0:
        return 1.0
    cap = np.eye(u.shape[0], dtype=t.dtype) - symmetrize((u @ t) @ u.T)
    try:
        factor = cholesky_spd(cap)
    except NotSPD:
        return float("inf")
    diag = np.diagonal(factor)
    return float((diag.max() / diag.min()) ** 2)


def audit_drift(state: InverseState, ledger: stats_mod.Ledger) -> float:
    """Drift of the tracked inverse against the authoritative ledger.

    Returns ||T (S + gamma*I) - I||_F / sqrt(d); the caller compares this
    to its reset threshold.
    """
    h = stats_mod.regularized_gram(ledger)
    d = h.shape[0]
    resid = state.T.astype(np.float64) @ h.astype(np.float64) - np.eye(d)
    return frobenius_norm(resid) / np.sqrt(d)
