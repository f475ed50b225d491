"""Named property suites behind `fedridge verify`.

Each property measures one number and compares it against its stated
tolerance; `verify` prints one line per property.  The tolerances here are
the same ones the test suite pins, so a passing `verify` run is a quick
field check that the protocol's guarantees hold in this environment.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .client import (
    ClientStore,
    Sample,
    VARIANT_FULL,
    VARIANT_QR,
    variant_a_payload_scalars,
    variant_b_payload_scalars,
)
from .coordinator import aggregate, run_round_a
from .inverse import InverseState, smw_add, smw_delete
from .kernels import (
    NotSPD,
    cholesky_spd,
    frobenius_norm,
    rel_frobenius_dev,
    solve_spd,
    spd_inverse,
    spectral_norm,
    symmetric_eig,
    symmetrize,
    thin_qr_rfactor,
)
from .posterior import MatrixNormalPosterior, kl_matrix_normal
from .simulate import (
    ClientEvent,
    Scenario,
    dirichlet_partition,
    gen_synthetic,
    run_scenario,
    schedule_churn,
)
from .stats import Ledger, ledger_init, solve_head, stats_from_batch


@dataclass(frozen=True)
class Property:
    name: str
    description: str
    tolerance: float
    direction: str  # "le": measured <= tol passes; "ge": measured >= tol passes
    fn: Callable[[int], float]

    def run(self, seed: int, tol_override: float | None = None):
        measured = self.fn(seed)
        tol = self.tolerance if tol_override is None else tol_override
        ok = measured <= tol if self.direction == "le" else measured >= tol
        return ok, measured, tol


def _rng(seed, salt):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(salt.encode()),)))


def _random_spd(rng, d, gamma=1.0):
    m = rng.standard_normal((d, d))
    return symmetrize(m.T @ m) + gamma * np.eye(d)


# ---------------------------------------------------------------------------
# kernel properties


def _kernel_roundtrip(seed):
    rng = _rng(seed, "kernel")
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 33))
        a = _random_spd(rng, d)
        x0 = rng.standard_normal((d, int(rng.integers(1, 5))))
        x = solve_spd(cholesky_spd(a), a @ x0)
        worst = max(worst, rel_frobenius_dev(x, x0))
    return worst


def _qr_gram(seed):
    rng = _rng(seed, "qr")
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 65))
        d = int(rng.integers(1, 65))
        f = rng.standard_normal((n, d))
        r = thin_qr_rfactor(f)
        worst = max(worst, rel_frobenius_dev(r.T @ r, f.T @ f))
    return worst


def _eig_reconstruction(seed):
    rng = _rng(seed, "eig")
    worst = 0.0
    for _ in range(10):
        d = int(rng.integers(2, 25))
        a = _random_spd(rng, d, gamma=0.0) + np.diag(rng.standard_normal(d))
        a = symmetrize(a)
        vals, vecs = symmetric_eig(a)
        worst = max(worst, rel_frobenius_dev(vecs @ np.diag(vals) @ vecs.T, a))
    return worst


def _eig_orthogonality(seed):
    rng = _rng(seed, "eigq")
    worst = 0.0
    for _ in range(10):
        d = int(rng.integers(2, 25))
        vals, vecs = symmetric_eig(_random_spd(rng, d))
        worst = max(worst, frobenius_norm(vecs.T @ vecs - np.eye(d)))
    return worst


# ---------------------------------------------------------------------------
# statistics and head properties


def _second_order_lemma(seed):
    a = stats_from_batch(np.eye(2), np.ones((2, 1)))
    b = stats_from_batch(np.array([[1.0, 1.0], [0.0, 0.0]]), np.ones((2, 1)))
    led_a = Ledger(a, 1, 1.0, "f64")
    led_b = Ledger(b, 1, 1.0, "f64")
    return rel_frobenius_dev(solve_head(led_a), solve_head(led_b))


@lru_cache(maxsize=4)
def _churn_result(seed):
    data = gen_synthetic(seed, 500, 16, 4, 2.0)
    assignments = dirichlet_partition(seed, data.classes[: data.n_train], 5, 0.5)
    schedule = schedule_churn(seed, assignments, rounds=30, adds_per_round=2, deletes_per_round=5)
    scenario = Scenario(
        seed=seed,
        d=16,
        c=4,
        clients=5,
        n=500,
        n_train=data.n_train,
        gamma=1.0,
        precision="f64",
        variant="both",
        partition={"kind": "dirichlet", "alpha": 0.5},
        schedule=schedule,
    )
    return run_scenario(scenario, data.features, data.labels)


def _retrain_equivalence(seed):
    result = _churn_result(seed)
    return max(rec.variants["A"].rel_dev for rec in result.records)


def _variant_equivalence(seed):
    result = _churn_result(seed)
    return max(rec.variants["B"].rel_dev for rec in result.records)


def _kl_certificate(seed):
    result = _churn_result(seed)
    return max(m.kl for rec in result.records for m in rec.variants.values())


def _kl_floor(seed):
    result = _churn_result(seed)
    return max(0.0, -min(m.kl for rec in result.records for m in rec.variants.values()))


def _order_invariance(seed):
    heads = equivalent_shuffled_heads(seed, shuffles=6, n=240, d=12, c=3, clients=4)
    worst = 0.0
    for i in range(len(heads)):
        for j in range(i + 1, len(heads)):
            worst = max(worst, rel_frobenius_dev(heads[i], heads[j]))
    return worst


# ---------------------------------------------------------------------------
# inverse-tracking properties


def _downdate_lemma(seed):
    rng = _rng(seed, "downdate")
    worst = 0.0
    for trial in range(1000):
        d = 6
        k = int(rng.integers(1, 5))
        h = _random_spd(rng, d, gamma=float(rng.uniform(0.1, 2.0)))
        t = spd_inverse(h)
        u = rng.standard_normal((k, d))
        lam0 = spectral_norm(symmetrize(u @ t @ u.T))
        if trial % 2 == 0 and lam0 > 0:
            u = u * math.sqrt(rng.uniform(0.8, 1.2) / lam0)
        lam = spectral_norm(symmetrize(u @ t @ u.T))
        try:
            cholesky_spd(h - u.T @ u)
            cond_i = True
        except NotSPD:
            cond_i = False
        try:
            cholesky_spd(np.eye(u.shape[0]) - symmetrize(u @ t @ u.T))
            cond_ii = True
        except NotSPD:
            cond_ii = False
        cond_iii = lam < 1.0
        if not (cond_i == cond_ii == cond_iii):
            worst = max(worst, abs(lam - 1.0))
    return worst


def _add_delete_roundtrip(seed):
    rng = _rng(seed, "roundtrip")
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 17))
        t0 = spd_inverse(_random_spd(rng, d))
        state = InverseState(t0, rng.standard_normal((d, 2)), 1.0, 0)
        u = rng.standard_normal((int(rng.integers(1, 5)), d))
        g = rng.standard_normal((d, 2))
        back = smw_delete(smw_add(state, u, g), u, g)
        worst = max(worst, rel_frobenius_dev(back.T, state.T))
    return worst


def _psd_monotonicity(seed):
    rng = _rng(seed, "psd")
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 13))
        t0 = spd_inverse(_random_spd(rng, d))
        state = InverseState(t0, np.zeros((d, 1)), 1.0, 0)
        u = rng.standard_normal((int(rng.integers(1, 4)), d))
        lam = spectral_norm(symmetrize(u @ t0 @ u.T))
        u = u * math.sqrt(0.5 / max(lam, 1e-12))
        ref = frobenius_norm(t0)
        after_del = smw_delete(state, u, np.zeros((d, 1)))
        vals, _ = symmetric_eig(after_del.T - t0)
        worst = max(worst, max(0.0, -float(vals[-1])) / ref)
        after_add = smw_add(state, u, np.zeros((d, 1)))
        vals, _ = symmetric_eig(after_add.T - t0)
        worst = max(worst, max(0.0, float(vals[0])) / ref)
    return worst


# ---------------------------------------------------------------------------
# posteriors and bounds


def _dense_vectorized_kl(p: MatrixNormalPosterior, q: MatrixNormalPosterior) -> float:
    # Independent oracle: the generic multivariate-normal KL on the full
    # dc x dc Kronecker covariance.
    c1 = np.kron(np.eye(p.c), p.Sigma)
    c2 = np.kron(np.eye(q.c), q.Sigma)
    dm = (q.M - p.M).flatten(order="F")
    inv2 = np.linalg.inv(c2)
    big_d = c1.shape[0]
    _, ld1 = np.linalg.slogdet(c1)
    _, ld2 = np.linalg.slogdet(c2)
    return 0.5 * (float(np.trace(inv2 @ c1)) - big_d + float(dm @ inv2 @ dm) + ld2 - ld1)


def _kl_reduction(seed):
    rng = _rng(seed, "kl")
    worst = 0.0
    for _ in range(40):
        d = int(rng.integers(1, 4))
        c = int(rng.integers(1, 4))
        p = MatrixNormalPosterior(
            rng.standard_normal((d, c)), _random_spd(rng, d, 0.5), 1.0, 1.0
        )
        q = MatrixNormalPosterior(
            rng.standard_normal((d, c)), _random_spd(rng, d, 0.5), 1.0, 1.0
        )
        worst = max(worst, abs(kl_matrix_normal(p, q) - _dense_vectorized_kl(p, q)))
    return worst


def _perturbation_bound(seed):
    rng = _rng(seed, "bound")
    worst_ratio = 0.0
    for _ in range(500):
        d = 12
        h = _random_spd(rng, d, gamma=1.0)
        k = int(rng.integers(1, 7))
        a = rng.standard_normal((k, d)) * float(rng.uniform(0.2, 2.0))
        ds = symmetrize(a.T @ a)
        r = int(rng.integers(0, k))
        vals, vecs = symmetric_eig(ds)
        kept = vecs[:, :r] * vals[:r]
        ds_r = symmetrize(kept @ vecs[:, :r].T)
        err = ds - ds_r
        t_ap = spd_inverse(h + ds_r)
        contraction = spectral_norm(t_ap @ err)
        if contraction >= 1.0:
            continue
        bound = spectral_norm(t_ap) ** 2 * spectral_norm(err) / (1.0 - contraction)
        gap = spectral_norm(spd_inverse(h + ds) - t_ap)
        if bound == 0.0:
            if gap > 1e-12:
                worst_ratio = max(worst_ratio, math.inf)
            continue
        worst_ratio = max(worst_ratio, gap / bound)
    return worst_ratio


def _comm_accounting(seed):
    rng = _rng(seed, "comm")
    worst = 0
    for _ in range(10):
        d = int(rng.integers(1, 9))
        c = int(rng.integers(1, 4))
        n_add = int(rng.integers(0, 6))
        store = ClientStore(0, d, c, "f64")
        store.ingest(
            Sample(i, rng.standard_normal(d), rng.standard_normal(c)) for i in range(n_add)
        )
        msg = store.make_round_message(1, list(range(n_add)), [], VARIANT_FULL)
        expect = 2 * variant_a_payload_scalars(d, c)
        worst = max(worst, abs(msg.scalar_count - expect))
        store_b = ClientStore(1, d, c, "f64")
        store_b.ingest(
            Sample(i, rng.standard_normal(d), rng.standard_normal(c)) for i in range(n_add)
        )
        msg_b = store_b.make_round_message(1, list(range(n_add)), [], VARIANT_QR)
        r_add = min(n_add, d)
        expect_b = variant_b_payload_scalars(r_add, d, c) + variant_b_payload_scalars(0, d, c)
        worst = max(worst, abs(msg_b.scalar_count - expect_b))
    return float(worst)


# ---------------------------------------------------------------------------
# shared helpers for invariance checks


def equivalent_shuffled_heads(
    seed: int, shuffles: int, n: int, d: int, c: int, clients: int, delete_fraction: float = 0.3
) -> list[np.ndarray]:
    """Final heads from randomized replays with the same final multiset.

    Every replay re-partitions the samples across clients, re-groups the
    additions into waves, and spreads the (fixed) deletions over random
    later rounds; all of them retain exactly the same final multiset, so
    all final heads must agree up to floating reordering.
    """
    data = gen_synthetic(seed, n, d, c, 2.0)
    pool = list(range(data.n_train))
    base = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    delete_ids = sorted(int(i) for i in base.choice(pool, int(len(pool) * delete_fraction), replace=False))
    heads = []
    for shuffle in range(shuffles):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(100 + shuffle,)))
        order = rng.permutation(pool)
        bounds = sorted(rng.choice(np.arange(1, len(pool)), clients - 1, replace=False))
        assignment = {}
        for client, part in enumerate(np.split(order, bounds)):
            for i in part:
                assignment[int(i)] = client
        waves = np.split(rng.permutation(pool), [len(pool) // 3, 2 * len(pool) // 3])
        add_round = {}
        for w, wave in enumerate(waves):
            for i in wave:
                add_round[int(i)] = 1 + w
        last_add = 3
        del_round = {i: int(rng.integers(add_round[i] + 1, last_add + 4)) for i in delete_ids}
        total_rounds = max([last_add] + list(del_round.values()))
        schedule = []
        for t in range(1, total_rounds + 1):
            events: dict[int, ClientEvent] = {}
            for i in pool:
                if add_round[i] == t:
                    events.setdefault(assignment[i], ClientEvent(assignment[i])).add.append(i)
            for i in delete_ids:
                if del_round[i] == t:
                    events.setdefault(assignment[i], ClientEvent(assignment[i])).delete.append(i)
            if events:
                schedule.append((t, [events[k] for k in sorted(events)]))
        ledger = ledger_init(d, c, 1.0, "f64")
        stores = {k: ClientStore(k, d, c, "f64") for k in range(clients)}
        w_final = np.zeros((d, c))
        for t, evs in schedule:
            messages = []
            for ev in evs:
                stores[ev.client].ingest(
                    Sample(i, data.features[i], data.labels[i]) for i in sorted(ev.add)
                )
                messages.append(
                    stores[ev.client].make_round_message(t, sorted(ev.add), sorted(ev.delete), VARIANT_FULL)
                )
            ledger, w_final = run_round_a(ledger, aggregate(messages))
        heads.append(w_final)
    return heads


PROPERTIES = [
    Property("kernel-roundtrip", "Cholesky solve recovers planted solutions", 1e-9, "le", _kernel_roundtrip),
    Property("qr-gram", "R factor reproduces the Gram matrix", 1e-12, "le", _qr_gram),
    Property("eig-reconstruction", "Jacobi eigendecomposition reconstructs A", 1e-10, "le", _eig_reconstruction),
    Property("eig-orthogonality", "Jacobi eigenvectors are orthonormal", 1e-9, "le", _eig_orthogonality),
    Property("second-order-lemma", "first-moment twins yield distinct heads", 0.3, "ge", _second_order_lemma),
    Property("retrain-equivalence", "full-recompute head matches the oracle each round", 1e-9, "le", _retrain_equivalence),
    Property("variant-equivalence", "inverse-tracking head matches the oracle each round", 1e-8, "le", _variant_equivalence),
    Property("order-invariance", "shuffled replays agree on the final head", 1e-10, "le", _order_invariance),
    Property("downdate-lemma", "three downdate feasibility conditions agree", 1e-8, "le", _downdate_lemma),
    Property("add-delete-roundtrip", "delete undoes add exactly", 1e-10, "le", _add_delete_roundtrip),
    Property("psd-monotonicity", "deletes grow and adds shrink the tracked inverse", 1e-9, "le", _psd_monotonicity),
    Property("kl-reduction", "matrix-normal KL matches the dense Gaussian KL", 1e-10, "le", _kl_reduction),
    Property("kl-certificate", "protocol posterior has (near) zero KL to retrain", 1e-9, "le", _kl_certificate),
    Property("kl-floor", "computed KL never goes meaningfully negative", 1e-12, "le", _kl_floor),
    Property("perturbation-bound", "measured truncation gap within the stated bound", 1.0 + 1e-6, "le", _perturbation_bound),
    Property("comm-accounting", "message scalar counts match the size formulas", 0.0, "le", _comm_accounting),
]


def run_properties(seed: int = 7, only: str | None = None, tol_override: float | None = None):
    """Run the suites; yields (name, ok, measured, tolerance, description)."""
    selected = [p for p in PROPERTIES if only is None or p.name == only]
    if only is not None and not selected:
        raise KeyError(f"unknown property {only!r}; known: {', '.join(p.name for p in PROPERTIES)}")
    for prop in selected:
        ok, measured, tol = prop.run(seed, tol_override)
        yield prop.name, ok, measured, tol, prop.description
