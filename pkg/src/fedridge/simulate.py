"""Scenario generation and the end-to-end federated round loop.

A scenario bundles everything needed to replay a federated add/delete
stream deterministically: the data seed, the client partition, an explicit
per-round event schedule, and the server configuration.  The harness
drives client stores and the coordinator round by round, and after every
round recomputes the centralized head from scratch on the currently
retained samples; the relative deviation against that oracle is the
headline metric everywhere.

Synthetic features stand in for a frozen feature extractor: Gaussian
clusters with controllable mean separation, generated in single precision
regardless of the precision the protocol later accumulates in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .client import ClientStore, Sample, VARIANT_FULL, VARIANT_QR
from .coordinator import (
    account_round,
    aggregate,
    approx_init,
    periodic_reset,
    run_round_a,
    run_round_approx,
    run_round_b,
)
from .inverse import init_from_ledger
from .kernels import cholesky_spd, frobenius_norm, rel_frobenius_dev, solve_spd
from .posterior import kl_matrix_normal, posterior_from_ledger
from .stats import Ledger, dtype_of, ledger_init, stats_from_batch

_SUBSTREAMS = {"data": 0, "partition": 1, "schedule": 2}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named child generator so each pipeline stage has its own stream."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SUBSTREAMS[name],)))


# ---------------------------------------------------------------------------
# synthetic data and partitions


@dataclass(frozen=True)
class SyntheticData:
    features: np.ndarray  # n x d, float32
    labels: np.ndarray  # n x c one-hot, float32
    n_train: int

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


def gen_synthetic(seed: int, n: int, d: int, c: int, class_separation: float) -> SyntheticData:
    """Gaussian cluster features with an 80/20 train/test split.

    Cluster means are random directions scaled to `class_separation`;
    zero separation makes every class identically distributed, so any
    head can only reach chance accuracy.
    """
    if c < 2:
        raise ValueError("need at least two classes for one-hot labels")
    rng = rng_stream(seed, "data")
    means = rng.standard_normal((c, d))
    norms = np.sqrt(np.sum(means**2, axis=1, keepdims=True))
    norms[norms == 0] = 1.0
    means = means / norms * float(class_separation)
    if n == 0:
        return SyntheticData(
            np.zeros((0, d), dtype=np.float32), np.zeros((0, c), dtype=np.float32), 0
        )
    classes = np.resize(np.arange(c), n)
    rng.shuffle(classes)
    features = (means[classes] + rng.standard_normal((n, d))).astype(np.float32)
    labels = np.zeros((n, c), dtype=np.float32)
    labels[np.arange(n), classes] = 1.0
    return SyntheticData(features, labels, int(n * 0.8))


def dirichlet_partition(seed: int, classes: np.ndarray, k: int, alpha: float) -> list[list[int]]:
    """Class-wise Dirichlet split of sample ids across k clients.

    Per class, proportions are drawn from Dirichlet(alpha, ..., alpha) and
    the class's shuffled ids split at the cumulative boundaries.  Small
    alpha concentrates classes on few clients; empty clients can happen.
    """
    if k < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = rng_stream(seed, "partition")
    classes = np.asarray(classes)
    out: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(classes):
        ids = np.flatnonzero(classes == cls)
        rng.shuffle(ids)
        props = rng.dirichlet(np.full(k, float(alpha)))
        bounds = (np.cumsum(props)[:-1] * len(ids)).astype(int)
        for client, part in enumerate(np.split(ids, bounds)):
            out[client].extend(int(i) for i in part)
    return [sorted(ids) for ids in out]


def writer_partition(seed: int, n: int, k: int, writers: int) -> list[list[int]]:
    """Writer-style grouping: samples belong to writers, writers to clients."""
    if writers < k:
        raise ValueError("need at least as many writers as clients")
    rng = rng_stream(seed, "partition")
    writer_of = rng.integers(0, writers, size=n)
    out: list[list[int]] = [[] for _ in range(k)]
    for i in range(n):
        out[int(writer_of[i]) % k].append(i)
    return [sorted(ids) for ids in out]


# ---------------------------------------------------------------------------
# event schedules


@dataclass
class ClientEvent:
    client: int
    add: list[int] = field(default_factory=list)
    delete: list[int] = field(default_factory=list)


@dataclass
class RoundSpec:
    round: int
    events: list[ClientEvent]


def initial_round(assignments: list[list[int]]) -> RoundSpec:
    """Round 1: every client adds its whole initial partition."""
    events = [ClientEvent(k, list(ids), []) for k, ids in enumerate(assignments) if ids]
    return RoundSpec(1, events)


def _owner_map(assignments: list[list[int]]) -> dict[int, int]:
    owners: dict[int, int] = {}
    for client, ids in enumerate(assignments):
        for i in ids:
            owners[i] = client
    return owners


def _delete_round(round_index: int, ids, owners: dict[int, int]) -> RoundSpec:
    per_client: dict[int, list[int]] = {}
    for i in ids:
        per_client.setdefault(owners[i], []).append(int(i))
    events = [ClientEvent(k, [], sorted(v)) for k, v in sorted(per_client.items())]
    return RoundSpec(round_index, events)


def schedule_chunked(
    seed: int,
    assignments: list[list[int]],
    fraction: float,
    steps: int,
    start_round: int = 2,
    classes: np.ndarray | None = None,
    target_class: int | None = None,
) -> list[RoundSpec]:
    """Rounds deleting a fixed fraction of the initially retained ids.

    Each step removes `fraction` of the original pool, drawn uniformly
    across all clients without replacement between steps.  With a target
    class set, the pool is restricted to that class's ids and the
    fraction applies to the class pool instead.
    """
    if fraction < 0 or steps < 0 or fraction * steps > 1 + 1e-12:
        raise ValueError("fraction * steps must stay within the available pool")
    owners = _owner_map(assignments)
    pool = sorted(owners)
    if target_class is not None:
        if classes is None:
            raise ValueError("target_class requires the class labels")
        pool = [i for i in pool if int(classes[i]) == target_class]
    rng = rng_stream(seed, "schedule")
    perm = rng.permutation(np.asarray(pool, dtype=np.int64))
    size = int(fraction * len(pool))
    rounds = []
    for step in range(steps):
        ids = perm[step * size : (step + 1) * size]
        rounds.append(_delete_round(start_round + step, ids, owners))
    return rounds


def schedule_burst(
    seed: int, assignments: list[list[int]], count: int, start_round: int = 2
) -> list[RoundSpec]:
    """`count` rounds, each deleting exactly one retained sample."""
    owners = _owner_map(assignments)
    pool = sorted(owners)
    if count > len(pool):
        raise ValueError(f"cannot burst-delete {count} of {len(pool)} retained samples")
    rng = rng_stream(seed, "schedule")
    chosen = rng.permutation(np.asarray(pool, dtype=np.int64))[:count]
    return [
        _delete_round(start_round + i, [int(sid)], owners) for i, sid in enumerate(chosen)
    ]


def schedule_addback(burst: list[RoundSpec], start_round: int | None = None) -> list[RoundSpec]:
    """Re-add the ids of a burst schedule, one per round, in reverse order."""
    if start_round is None:
        start_round = (burst[-1].round + 1) if burst else 2
    rounds = []
    for i, spec in enumerate(reversed(burst)):
        events = [ClientEvent(ev.client, list(ev.delete), []) for ev in spec.events if ev.delete]
        rounds.append(RoundSpec(start_round + i, events))
    return rounds


def schedule_churn(
    seed: int,
    assignments: list[list[int]],
    rounds: int,
    adds_per_round: int,
    deletes_per_round: int,
    holdback_fraction: float = 0.2,
    start_round: int = 1,
) -> list[RoundSpec]:
    """Initial ingest plus rounds mixing additions and deletions.

    A held-back slice of the pool is kept out of the first round and fed
    in over the churn rounds, while deletions draw from whatever was
    retained before the round started (a sample added in round t can only
    be deleted from round t+1 on).
    """
    owners = _owner_map(assignments)
    rng = rng_stream(seed, "schedule")
    perm = list(rng.permutation(np.asarray(sorted(owners), dtype=np.int64)))
    n_hold = min(int(len(perm) * holdback_fraction), rounds * adds_per_round)
    held = [int(i) for i in perm[:n_hold]]
    initial = sorted(int(i) for i in perm[n_hold:])
    per_client: dict[int, list[int]] = {}
    for i in initial:
        per_client.setdefault(owners[i], []).append(i)
    out = [RoundSpec(start_round, [ClientEvent(k, v, []) for k, v in sorted(per_client.items())])]
    retained = list(initial)
    for step in range(rounds):
        adds = held[step * adds_per_round : (step + 1) * adds_per_round]
        n_del = min(deletes_per_round, len(retained))
        del_pos = rng.choice(len(retained), size=n_del, replace=False)
        dels = sorted(retained[p] for p in del_pos)
        events: dict[int, ClientEvent] = {}
        for i in adds:
            events.setdefault(owners[i], ClientEvent(owners[i])).add.append(i)
        for i in dels:
            events.setdefault(owners[i], ClientEvent(owners[i])).delete.append(i)
        out.append(RoundSpec(start_round + 1 + step, [events[k] for k in sorted(events)]))
        removed = set(dels)
        retained = [i for i in retained if i not in removed] + sorted(adds)
    return out


# ---------------------------------------------------------------------------
# scenario container


@dataclass
class Scenario:
    seed: int
    d: int
    c: int
    clients: int
    n: int
    n_train: int
    gamma: float
    precision: str
    variant: str  # "A", "B", "both" or "approx"
    partition: dict
    schedule: list[RoundSpec]
    rank: int = 8
    reset_every: int = 16
    sigma2: float = 1.0
    audit_every: int = 32
    drift_threshold: float = 1e-6
    condition_threshold: float = 1e8

    def to_json(self) -> str:
        doc = asdict(self)
        doc["version"] = 1
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Scenario":
        doc = json.loads(text)
        doc.pop("version", None)
        doc["schedule"] = [
            RoundSpec(r["round"], [ClientEvent(e["client"], e["add"], e["delete"]) for e in r["events"]])
            for r in doc["schedule"]
        ]
        return Scenario(**doc)


# ---------------------------------------------------------------------------
# oracle and evaluation helpers


def oracle_retrain(features, labels, gamma: float, precision: str = "f64") -> np.ndarray:
    """Centralized ridge head recomputed from scratch on the given samples."""
    dtype = dtype_of(precision)
    features = np.asarray(features)
    labels = np.asarray(labels)
    d = features.shape[1]
    c = labels.shape[1]
    if features.shape[0] == 0:
        return np.zeros((d, c), dtype=dtype)
    st = stats_from_batch(features, labels, dtype)
    h = st.S + float(gamma) * np.eye(d, dtype=dtype)
    return solve_spd(cholesky_spd(h), st.G)


def safe_rel_dev(w, w_ref) -> float:
    """Relative deviation, falling back to the absolute norm at a zero ref.

    An empty retained set has a zero oracle head; the protocol heads are
    then judged by their absolute Frobenius norm instead.
    """
    if frobenius_norm(w_ref) == 0.0:
        return frobenius_norm(w)
    return rel_frobenius_dev(w, w_ref)


def head_accuracy(w, test_features, test_labels) -> float:
    if test_features.shape[0] == 0:
        return float("nan")
    scores = test_features.astype(np.float64) @ np.asarray(w, dtype=np.float64)
    pred = scores.argmax(axis=1)
    true = np.asarray(test_labels).argmax(axis=1)
    return float(np.mean(pred == true))


def per_class_recall(w, test_features, test_labels) -> list[float]:
    scores = test_features.astype(np.float64) @ np.asarray(w, dtype=np.float64)
    pred = scores.argmax(axis=1)
    true = np.asarray(test_labels).argmax(axis=1)
    out = []
    for cls in range(test_labels.shape[1]):
        mask = true == cls
        out.append(float(np.mean(pred[mask] == cls)) if mask.any() else float("nan"))
    return out


# ---------------------------------------------------------------------------
# the round loop


@dataclass
class VariantMetrics:
    rel_dev: float
    reset: bool
    scalars: int
    bytes: int
    lambda_max: float | None
    bound: float | None
    accuracy: float
    kl: float
    recall: list[float]


@dataclass
class RoundMetrics:
    round: int
    retained: int
    variants: dict[str, VariantMetrics]


@dataclass
class ScenarioResult:
    scenario: Scenario
    records: list[RoundMetrics]
    final_heads: dict[str, np.ndarray]
    summary: dict


def _oracle_ledger(st, t: int, gamma: float) -> Ledger:
    return Ledger(st, t, gamma, "f64")


def run_scenario(scenario: Scenario, features: np.ndarray, labels: np.ndarray) -> ScenarioResult:
    """Replay a scenario and collect per-round metrics for each variant."""
    if features.shape[0] != scenario.n:
        raise ValueError(f"feature file has {features.shape[0]} rows, scenario says {scenario.n}")
    variants = {"A": ["A"], "B": ["B"], "both": ["A", "B"], "approx": ["approx"]}[scenario.variant]
    test_f = features[scenario.n_train :]
    test_y = labels[scenario.n_train :]
    stores = {
        v: {
            k: ClientStore(k, scenario.d, scenario.c, scenario.precision)
            for k in range(scenario.clients)
        }
        for v in variants
    }
    ledgers = {
        v: ledger_init(scenario.d, scenario.c, scenario.gamma, scenario.precision)
        for v in variants
    }
    inverse_state = init_from_ledger(ledgers["B"]) if "B" in variants else None
    approx_state = approx_init(ledgers["approx"]) if "approx" in variants else None
    retained: set[int] = set()
    records: list[RoundMetrics] = []
    resets = 0
    total_bytes = {v: 0 for v in variants}
    max_kl = 0.0
    max_bound = 0.0
    heads: dict[str, np.ndarray] = {}

    for spec in scenario.schedule:
        events = sorted(spec.events, key=lambda e: e.client)
        if not events:
            continue
        for ev in events:
            add_set = set(ev.add)
            del_set = set(ev.delete)
            if add_set & retained:
                raise RuntimeError(f"round {spec.round} re-adds retained ids")
            if not del_set <= retained:
                raise RuntimeError(f"round {spec.round} deletes ids that are not retained")
            retained |= add_set
            retained -= del_set
        oracle_ids = sorted(retained)
        f_ret = features[oracle_ids]
        y_ret = labels[oracle_ids]
        w_oracle = oracle_retrain(f_ret, y_ret, scenario.gamma)
        oracle_stats = stats_from_batch(f_ret, y_ret, np.float64) if oracle_ids else None

        round_variants: dict[str, VariantMetrics] = {}
        for v in variants:
            wire_variant = VARIANT_QR if v == "B" else VARIANT_FULL
            messages = []
            for ev in events:
                store = stores[v][ev.client]
                store.ingest(Sample(i, features[i], labels[i]) for i in ev.add)
                messages.append(
                    store.make_round_message(spec.round, ev.add, ev.delete, wire_variant)
                )
            agg = aggregate(messages)
            lam = None
            bound = None
            reset = False
            if v == "A":
                ledgers[v], w = run_round_a(ledgers[v], agg)
            elif v == "B":
                ledgers[v], inverse_state, w, info = run_round_b(
                    ledgers[v],
                    inverse_state,
                    agg,
                    audit_every=scenario.audit_every,
                    drift_threshold=scenario.drift_threshold,
                    condition_threshold=scenario.condition_threshold,
                )
                reset = info.reset
                lam = info.lambda_max
            else:
                ledgers[v], approx_state, w, report = run_round_approx(
                    ledgers[v], approx_state, agg, scenario.rank
                )
                if report is not None:
                    bound = report.inverse_bound
                    if math.isfinite(report.inverse_bound):
                        max_bound = max(max_bound, report.inverse_bound)
                if scenario.reset_every and approx_state.rounds_since_reset >= scenario.reset_every:
                    w, approx_state = periodic_reset(ledgers[v], approx_state)
                    reset = True
            if reset:
                resets += 1
            if ledgers[v].stats.n != len(retained):
                raise RuntimeError(
                    f"retained-count bookkeeping broke in round {spec.round}: "
                    f"ledger says {ledgers[v].stats.n}, stream says {len(retained)}"
                )
            comm = account_round(messages, scenario.precision)
            total_bytes[v] += comm.total_bytes
            if oracle_stats is not None:
                kl = kl_matrix_normal(
                    posterior_from_ledger(ledgers[v], scenario.sigma2),
                    posterior_from_ledger(
                        _oracle_ledger(oracle_stats, ledgers[v].t, scenario.gamma), scenario.sigma2
                    ),
                )
            else:
                kl = kl_matrix_normal(
                    posterior_from_ledger(ledgers[v], scenario.sigma2),
                    posterior_from_ledger(
                        _oracle_ledger(
                            ledger_init(scenario.d, scenario.c, scenario.gamma).stats,
                            ledgers[v].t,
                            scenario.gamma,
                        ),
                        scenario.sigma2,
                    ),
                )
            max_kl = max(max_kl, kl)
            heads[v] = w
            round_variants[v] = VariantMetrics(
                rel_dev=safe_rel_dev(w, w_oracle),
                reset=reset,
                scalars=comm.total_scalars,
                bytes=comm.total_bytes,
                lambda_max=lam,
                bound=bound,
                accuracy=head_accuracy(w, test_f, test_y),
                kl=kl,
                recall=per_class_recall(w, test_f, test_y),
            )
        records.append(RoundMetrics(spec.round, len(retained), round_variants))

    last = records[-1].variants if records else {}
    summary = {
        "schema_version": 1,
        "final_dev_A": last["A"].rel_dev if "A" in last else None,
        "final_dev_B": last["B"].rel_dev if "B" in last else None,
        "resets": resets,
        "total_bytes_A": total_bytes.get("A", 0),
        "total_bytes_B": total_bytes.get("B", 0),
        "max_kl": max_kl,
    }
    if "approx" in variants:
        summary["final_dev_approx"] = last["approx"].rel_dev if "approx" in last else None
        summary["max_bound"] = max_bound
        summary["total_bytes_approx"] = total_bytes.get("approx", 0)
    return ScenarioResult(scenario, records, heads, summary)


# ---------------------------------------------------------------------------
# output files


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def metrics_csv(result: ScenarioResult) -> str:
    """CSV with one row per round per variant, deterministic formatting."""
    lines = ["round,variant,rel_dev_vs_oracle,reset_flag,scalars_sent,bytes_sent,lambda_max,bound"]
    for rec in result.records:
        for v in sorted(rec.variants):
            m = rec.variants[v]
            lines.append(
                ",".join(
                    [
                        str(rec.round),
                        v,
                        _fmt(m.rel_dev),
                        _fmt(m.reset),
                        str(m.scalars),
                        str(m.bytes),
                        _fmt(m.lambda_max),
                        _fmt(m.bound),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def events_jsonl(scenario: Scenario) -> str:
    lines = []
    for spec in scenario.schedule:
        for ev in sorted(spec.events, key=lambda e: e.client):
            for op, ids in (("add", ev.add), ("delete", ev.delete)):
                if ids:
                    lines.append(
                        json.dumps(
                            {
                                "round": spec.round,
                                "client_id": ev.client,
                                "op": op,
                                "sample_ids": list(ids),
                                "variant": scenario.variant,
                            },
                            sort_keys=True,
                        )
                    )
    return "\n".join(lines) + ("\n" if lines else "")


def summary_json(result: ScenarioResult) -> str:
    return json.dumps(result.summary, sort_keys=True, indent=2) + "\n"
