"""Server-side round loop: aggregation, ledger update, head recovery.

Three ways to recover the head after a round's aggregate lands:

* full recompute -- apply the ledger update and re-solve the SPD system
  from scratch (robust baseline);
* incremental inverse -- advance a tracked inverse by SMW updates built
  from stacked client R-factors, falling back to an exact rebuild from
  the ledger whenever a downdate is infeasible, ill-conditioned, or the
  periodic drift audit fails;
* truncated adds -- approximate each add round's Gram change by its top-r
  eigenpairs, carrying a perturbation bound, with the exact ledger kept
  in parallel as the authority for periodic exact resets.

Aggregation always sums client payloads in a fixed order (ascending
client id) so repeated runs are bitwise reproducible at fixed precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .client import ClientMessage, QrPayload, StatsPayload, VARIANT_FULL, VARIANT_QR
from .inverse import (
    DowndateInfeasible,
    InverseState,
    audit_drift,
    capacitance_condition,
    feasibility_check,
    init_from_ledger,
    smw_add,
    smw_delete,
)
from .kernels import (
    DimensionMismatch,
    NotSPD,
    spd_inverse,
    spectral_norm,
    symmetric_eig,
    symmetrize,
    thin_qr_rfactor,
)
from .stats import Ledger, SufficientStats, ledger_apply, solve_head

DEFAULT_AUDIT_EVERY = 32
DEFAULT_DRIFT_THRESHOLD = 1e-6
DEFAULT_CONDITION_THRESHOLD = 1e8


class MixedRound(Exception):
    """Messages from different rounds were aggregated together."""


class MixedVariant(Exception):
    """Messages of different variants were aggregated together."""


@dataclass(frozen=True)
class RoundAggregate:
    round: int
    variant: str
    d: int
    c: int
    S_plus: np.ndarray
    G_plus: np.ndarray
    S_minus: np.ndarray
    G_minus: np.ndarray
    n_plus: int
    n_minus: int
    U_plus: np.ndarray | None = None
    U_minus: np.ndarray | None = None


@dataclass(frozen=True)
class BRoundInfo:
    reset: bool
    lambda_max: float | None


@dataclass(frozen=True)
class ApproxState:
    """Accumulated truncated Gram plus the rounds since the last reset."""

    S_ap: np.ndarray
    rounds_since_reset: int


@dataclass(frozen=True)
class ApproxReport:
    rank_used: int
    neglected_mass: float
    t_ap_norm: float
    contraction: float
    inverse_bound: float
    head_bound: float
    assumption_ok: bool


@dataclass(frozen=True)
class CommRecord:
    round: int
    variant: str
    per_client: dict
    total_scalars: int
    total_bytes: int


def _payload_stats(payload) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(payload, StatsPayload):
        return payload.S, payload.G, payload.n
    if isinstance(payload, QrPayload):
        return symmetrize(payload.R.T @ payload.R), payload.G, payload.n
    raise TypeError(f"unsupported payload type {type(payload).__name__}")


def aggregate(messages: list[ClientMessage]) -> RoundAggregate:
    """Sum client messages for one round into the server's aggregate.

    Variant B messages additionally stack their R-factors row-wise so
    that UᵀU equals the aggregated Gram change.
    """
    if not messages:
        raise ValueError("cannot aggregate an empty message list")
    messages = sorted(messages, key=lambda m: m.client_id)
    head = messages[0]
    rounds = {m.round for m in messages}
    if len(rounds) != 1:
        raise MixedRound(f"messages span rounds {sorted(rounds)}")
    variants = {m.variant for m in messages}
    if len(variants) != 1:
        raise MixedVariant(f"messages span variants {sorted(variants)}")
    s_add, g_add, n_add = _payload_stats(head.add)
    d = s_add.shape[0]
    c = g_add.shape[1]
    s_add = s_add.copy()
    g_add = g_add.copy()
    s_del, g_del, n_del = _payload_stats(head.delete)
    s_del = s_del.copy()
    g_del = g_del.copy()
    for m in messages[1:]:
        sa, ga, na = _payload_stats(m.add)
        if sa.shape[0] != d or ga.shape[1] != c:
            raise DimensionMismatch(f"message dims {sa.shape[0]}x{ga.shape[1]} do not match {d}x{c}")
        sd, gd, nd = _payload_stats(m.delete)
        s_add += sa
        g_add += ga
        n_add += na
        s_del += sd
        g_del += gd
        n_del += nd
    u_plus = u_minus = None
    if head.variant == VARIANT_QR:
        u_plus = np.vstack([m.add.R for m in messages])
        u_minus = np.vstack([m.delete.R for m in messages])
    return RoundAggregate(
        round=head.round,
        variant=head.variant,
        d=d,
        c=c,
        S_plus=symmetrize(s_add),
        G_plus=g_add,
        S_minus=symmetrize(s_del),
        G_minus=g_del,
        n_plus=n_add,
        n_minus=n_del,
        U_plus=u_plus,
        U_minus=u_minus,
    )


def _agg_stats(agg: RoundAggregate) -> tuple[SufficientStats, SufficientStats]:
    return (
        SufficientStats(agg.S_plus, agg.G_plus, agg.n_plus),
        SufficientStats(agg.S_minus, agg.G_minus, agg.n_minus),
    )


def run_round_a(ledger: Ledger, agg: RoundAggregate) -> tuple[Ledger, np.ndarray]:
    """Exact recompute: ledger update followed by one SPD solve."""
    add, delete = _agg_stats(agg)
    new_ledger = ledger_apply(ledger, add, delete)
    return new_ledger, solve_head(new_ledger)


def _compact_factor(u: np.ndarray) -> np.ndarray:
    # Re-factor tall stacks so the capacitance system never exceeds d x d;
    # UᵀU is preserved up to roundoff.
    if u.shape[0] > u.shape[1] and u.shape[1] > 0:
        return thin_qr_rfactor(u)
    return u


def run_round_b(
    ledger: Ledger,
    state: InverseState,
    agg: RoundAggregate,
    audit_every: int = DEFAULT_AUDIT_EVERY,
    drift_threshold: float = DEFAULT_DRIFT_THRESHOLD,
    condition_threshold: float = DEFAULT_CONDITION_THRESHOLD,
) -> tuple[Ledger, InverseState, np.ndarray, BRoundInfo]:
    """Incremental round: SMW add step, then SMW delete step.

    The ledger is advanced first and stays authoritative; any failure or
    reset trigger along the SMW path rebuilds the state from it, which is
    exactly the full-recompute fallback.
    """
    add, delete = _agg_stats(agg)
    new_ledger = ledger_apply(ledger, add, delete)
    empty = np.zeros((0, agg.d), dtype=agg.S_plus.dtype)
    u_plus = _compact_factor(agg.U_plus if agg.U_plus is not None else empty)
    u_minus = _compact_factor(agg.U_minus if agg.U_minus is not None else empty)
    reset = False
    lam = None
    new_state = state
    try:
        new_state = smw_add(new_state, u_plus, agg.G_plus)
        if u_minus.shape[0] or np.any(agg.G_minus):
            _, lam = feasibility_check(new_state.T, u_minus)
            if capacitance_condition(new_state.T, u_minus) > condition_threshold:
                raise DowndateInfeasible("delete capacitance condition estimate above threshold")
            new_state = smw_delete(new_state, u_minus, agg.G_minus)
    except (DowndateInfeasible, NotSPD):
        new_state = init_from_ledger(new_ledger)
        reset = True
    if not reset and audit_every and new_ledger.t % audit_every == 0:
        if audit_drift(new_state, new_ledger) > drift_threshold:
            new_state = init_from_ledger(new_ledger)
            reset = True
    return new_ledger, new_state, new_state.W, BRoundInfo(reset=reset, lambda_max=lam)


def approx_init(ledger: Ledger) -> ApproxState:
    return ApproxState(ledger.stats.S.copy(), 0)


def _truncate_gram(s_plus: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray, int]:
    d = s_plus.shape[0]
    if rank >= d:
        return s_plus, np.zeros_like(s_plus), d
    vals, vecs = symmetric_eig(s_plus)
    kept = vecs[:, :rank] * vals[:rank]
    ds_r = symmetrize(kept @ vecs[:, :rank].T)
    return ds_r, s_plus - ds_r, rank


def run_round_approx(
    ledger: Ledger, approx: ApproxState, agg: RoundAggregate, rank: int
) -> tuple[Ledger, ApproxState, np.ndarray, ApproxReport | None]:
    """Advance one round keeping only a rank-`rank` Gram update.

    Only add rounds are approximated; any round containing deletions is
    handled exactly from the ledger and re-syncs the truncated state to it
    (the perturbation bound covers additions, and subtracting an exact
    deletion Gram from a truncated accumulation could go indefinite).  The
    exact ledger advances unconditionally and is the authority
    `periodic_reset` snaps back to.  When the bound's contraction
    assumption fails the report is still returned, flagged, with infinite
    bounds.
    """
    add, delete = _agg_stats(agg)
    new_ledger = ledger_apply(ledger, add, delete)
    dtype = new_ledger.dtype
    gamma = float(ledger.gamma)
    eye = np.eye(agg.d, dtype=dtype)
    if agg.n_minus > 0 or np.any(agg.S_minus) or np.any(agg.G_minus):
        new_approx = ApproxState(new_ledger.stats.S.copy(), 0)
        return new_ledger, new_approx, solve_head(new_ledger), None
    ds_r, err, rank_used = _truncate_gram(agg.S_plus.astype(dtype), rank)
    s_ap = symmetrize(approx.S_ap + ds_r)
    new_approx = ApproxState(s_ap, approx.rounds_since_reset + 1)
    t_ap = spd_inverse(s_ap + gamma * eye)
    w_ap = t_ap @ new_ledger.stats.G
    neglected = spectral_norm(err)
    t_ap_norm = spectral_norm(t_ap)
    contraction = spectral_norm(t_ap @ err)
    assumption_ok = contraction < 1.0
    if neglected == 0.0:
        inverse_bound = head_bound = 0.0
    elif assumption_ok:
        inverse_bound = t_ap_norm**2 * neglected / (1.0 - contraction)
        head_bound = inverse_bound * spectral_norm(new_ledger.stats.G)
    else:
        inverse_bound = head_bound = math.inf
    report = ApproxReport(
        rank_used=rank_used,
        neglected_mass=neglected,
        t_ap_norm=t_ap_norm,
        contraction=contraction,
        inverse_bound=inverse_bound,
        head_bound=head_bound,
        assumption_ok=assumption_ok,
    )
    return new_ledger, new_approx, w_ap, report


def periodic_reset(ledger: Ledger, approx: ApproxState) -> tuple[np.ndarray, ApproxState]:
    """Exact recompute from the ledger; zeroes the approximate drift."""
    return solve_head(ledger), ApproxState(ledger.stats.S.copy(), 0)


def account_round(messages: list[ClientMessage], precision: str) -> CommRecord:
    """Exact per-round communication accounting in scalars and bytes."""
    itemsize = {"f32": 4, "f64": 8}[precision]
    per_client = {m.client_id: m.scalar_count for m in sorted(messages, key=lambda m: m.client_id)}
    total = sum(per_client.values())
    round_index = messages[0].round if messages else 0
    variant = messages[0].variant if messages else VARIANT_FULL
    return CommRecord(
        round=round_index,
        variant=variant,
        per_client=per_client,
        total_scalars=total,
        total_bytes=total * itemsize,
    )
