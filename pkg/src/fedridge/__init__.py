"""Exact federated continual unlearning for ridge heads on frozen features.

Clients summarize every add/delete batch into fixed-size second-order
statistics; the server keeps an additive ledger of the retained set and
recovers a head equal (to floating-point tolerance) to centralized ridge
retraining after every round, by full recomputation or by incremental
inverse updates, with a Bayesian zero-KL certificate on top.
"""

from .client import ClientMessage, ClientStore, QrPayload, Sample, StatsPayload
from .coordinator import (
    ApproxReport,
    ApproxState,
    CommRecord,
    RoundAggregate,
    account_round,
    aggregate,
    approx_init,
    periodic_reset,
    run_round_a,
    run_round_approx,
    run_round_b,
)
from .inverse import (
    DowndateInfeasible,
    InverseState,
    audit_drift,
    feasibility_check,
    init_from_ledger,
    smw_add,
    smw_delete,
)
from .kernels import (
    DimensionMismatch,
    NoConvergence,
    NotSPD,
    ZeroReference,
    cholesky_spd,
    frobenius_norm,
    rel_frobenius_dev,
    solve_spd,
    spectral_norm,
    symmetric_eig,
    thin_qr_rfactor,
)
from .posterior import MatrixNormalPosterior, kl_matrix_normal, posterior_from_ledger, psd_order_check
from .simulate import (
    Scenario,
    dirichlet_partition,
    gen_synthetic,
    oracle_retrain,
    run_scenario,
    schedule_addback,
    schedule_burst,
    schedule_chunked,
    schedule_churn,
)
from .stats import (
    Ledger,
    NegativeCount,
    SufficientStats,
    ledger_apply,
    ledger_init,
    solve_head,
    stats_add,
    stats_from_batch,
    stats_sub,
)

__version__ = "0.1.0"
