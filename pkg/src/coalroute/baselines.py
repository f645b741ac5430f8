"""Rule-based bargaining bots and episode-level evaluation metrics.

Two reference bots:
  - heuristic: always proposes the grand coalition with equal shares and
    accepts every proposal it is asked about;
  - random: draws one of the 4 coalitions containing the proposer uniformly,
    splits the gain uniformly on the simplex, and accepts with probability
    one half.

The metrics reduce a batch of episode outcomes (plus per-instance
characteristic tables) into an evaluation report: proposal accuracy against
the per-capita-best coalition, absolute and relative optimality gaps,
round statistics, equal-share deviation, and the correlation between
realized payoffs and Shapley values. A closed-form expression for the
random bot's expected number of rounds is included as an analytic check.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .bargaining import EpisodeOutcome, play_episodes
from .coalition_values import (
    CharacteristicTable,
    ValueOracle,
    best_coalition_for,
    characteristic_table,
    coalition_size,
    shapley,
)
from .instances import Instance

AGENTS = (1, 2, 3)


class HeuristicBotPolicy:
    """Grand coalition, equal split, always accept."""

    def propose(self, envs, obs, rng, deterministic):
        n = len(envs)
        return np.ones((n, 3)), np.full((n, 3), 1.0 / 3.0), None

    def respond(self, envs, obs, rng, deterministic):
        return np.ones(len(envs), dtype=bool), None


class RandomBotPolicy:
    """Uniform coalition among the 4 containing the proposer, uniform split,
    coin-flip responses."""

    def propose(self, envs, obs, rng, deterministic):
        n = len(envs)
        ks = rng.integers(0, 4, size=n)
        payoffs = rng.dirichlet((1.0, 1.0, 1.0), size=n)
        bits = np.zeros((n, 3))
        for i, env in enumerate(envs):
            p = env.state.p
            q, r = (a for a in AGENTS if a != p)
            members = ((p,), (p, q), (p, r), (p, q, r))[ks[i]]
            for a in members:
                bits[i, a - 1] = 1.0
        return bits, payoffs, None

    def respond(self, envs, obs, rng, deterministic):
        return rng.random(len(envs)) < 0.5, None


def make_bot(kind: str):
    if kind == "heuristic":
        return HeuristicBotPolicy()
    if kind == "random":
        return RandomBotPolicy()
    raise ValueError(f"unknown bot kind {kind!r}")


def bot_singleton_rule(kind: str) -> str:
    """Random-bot round statistics count singleton proposals as immediate
    zero-payoff terminations; learned policies and the heuristic bot use the
    auto-reject rule."""
    return "terminate" if kind == "random" else "auto_reject"


# ---------------------------------------------------------------------------
# Metric reductions
# ---------------------------------------------------------------------------


@dataclass
class AccuracyReport:
    per_agent: dict[int, float]
    mean: float
    pooled: float
    n_scored: int


def accuracy(
    outcomes: Sequence[EpisodeOutcome], tables: Sequence[CharacteristicTable]
) -> AccuracyReport:
    """Fraction of first proposals matching the proposer's best coalition.

    Scored over non-degenerate instances only; `mean` averages the three
    per-agent accuracies, `pooled` is the overall fraction.
    """
    hits = {a: 0 for a in AGENTS}
    counts = {a: 0 for a in AGENTS}
    for out in outcomes:
        if out.first_proposer is None:
            continue
        table = tables[out.index]
        if table.degenerate:
            continue
        best_mask, _ = best_coalition_for(table, out.first_proposer)
        counts[out.first_proposer] += 1
        if out.first_mask == best_mask:
            hits[out.first_proposer] += 1
    per_agent = {a: (hits[a] / counts[a] if counts[a] else float("nan")) for a in AGENTS}
    scored = [per_agent[a] for a in AGENTS if counts[a]]
    total = sum(counts.values())
    return AccuracyReport(
        per_agent=per_agent,
        mean=float(np.mean(scored)) if scored else float("nan"),
        pooled=(sum(hits.values()) / total) if total else float("nan"),
        n_scored=total,
    )


@dataclass
class GapReport:
    phi_per_capita: float
    eta_per_capita: float
    phi_value: float
    eta_value: float
    n_scored: int
    excluded_fraction: float


def optimality_gaps(
    outcomes: Sequence[EpisodeOutcome], tables: Sequence[CharacteristicTable]
) -> GapReport:
    """Mean gap of the first proposal against the proposer's best coalition.

    Headline numbers use the per-capita convention: phi = best per-capita
    value minus proposed per-capita value, eta = phi over best per-capita.
    A raw coalition-value variant is reported alongside. Degenerate
    instances and singleton first proposals are excluded (a singleton has
    no collaboration gain to compare on).
    """
    phis, etas, phis_v, etas_v = [], [], [], []
    excluded = 0
    considered = 0
    for out in outcomes:
        if out.first_proposer is None:
            continue
        considered += 1
        table = tables[out.index]
        if table.degenerate or coalition_size(out.first_mask) < 2:
            excluded += 1
            continue
        best_mask, best_pc = best_coalition_for(table, out.first_proposer)
        proposed_pc = table.per_capita(out.first_mask)
        phis.append(best_pc - proposed_pc)
        etas.append((best_pc - proposed_pc) / best_pc)
        best_v = table.v(best_mask)
        proposed_v = table.v(out.first_mask)
        phis_v.append(best_v - proposed_v)
        etas_v.append((best_v - proposed_v) / best_v)
    n = len(phis)
    return GapReport(
        phi_per_capita=float(np.mean(phis)) if n else float("nan"),
        eta_per_capita=float(np.mean(etas)) if n else float("nan"),
        phi_value=float(np.mean(phis_v)) if n else float("nan"),
        eta_value=float(np.mean(etas_v)) if n else float("nan"),
        n_scored=n,
        excluded_fraction=(excluded / considered) if considered else 0.0,
    )


@dataclass
class ShapleyReport:
    r2_per_agent: dict[int, float]
    mse_per_agent: dict[int, float]
    mae_per_agent: dict[int, float]
    r2: float
    mse: float
    mae: float


def realized_payoffs(outcome: EpisodeOutcome) -> np.ndarray:
    """Per-agent realized payoff: share of v(C) for agreed members, else 0."""
    return np.asarray(outcome.rewards, dtype=np.float64)


def shapley_correlation(
    outcomes: Sequence[EpisodeOutcome], tables: Sequence[CharacteristicTable]
) -> ShapleyReport:
    """Per-agent R^2 / MSE / MAE of realized payoff against the Shapley
    value of the instance's table, averaged across agents."""
    realized = np.stack([realized_payoffs(o) for o in outcomes])
    targets = np.stack([shapley(tables[o.index]) for o in outcomes])
    r2s, mses, maes = {}, {}, {}
    for a in AGENTS:
        y_true = targets[:, a - 1]
        y_pred = realized[:, a - 1]
        residual = float(np.sum((y_true - y_pred) ** 2))
        total = float(np.sum((y_true - y_true.mean()) ** 2))
        r2s[a] = 1.0 - residual / total if total > 0 else (1.0 if residual == 0 else float("-inf"))
        mses[a] = float(np.mean((y_true - y_pred) ** 2))
        maes[a] = float(np.mean(np.abs(y_true - y_pred)))
    return ShapleyReport(
        r2_per_agent=r2s,
        mse_per_agent=mses,
        mae_per_agent=maes,
        r2=float(np.mean(list(r2s.values()))),
        mse=float(np.mean(list(mses.values()))),
        mae=float(np.mean(list(maes.values()))),
    )


def write_shapley_scatter(
    path,
    outcomes: Sequence[EpisodeOutcome],
    tables: Sequence[CharacteristicTable],
) -> None:
    """CSV of one row per (episode, agent) for plotting payoff vs Shapley."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "agent", "realized_payoff", "shapley", "in_coalition"])
        for out in outcomes:
            values = shapley(tables[out.index])
            realized = realized_payoffs(out)
            for a in AGENTS:
                in_c = int(
                    out.agreed_mask is not None and bool(out.agreed_mask >> (a - 1) & 1)
                )
                writer.writerow(
                    [out.index, a, repr(float(realized[a - 1])), repr(float(values[a - 1])), in_c]
                )


def equal_share_deviation(outcomes: Sequence[EpisodeOutcome]) -> float:
    """Mean |x_i - 1/|C|| over agreed coalition members; 0 for equal splits."""
    devs = []
    for out in outcomes:
        if out.agreed_mask is None:
            continue
        size = coalition_size(out.agreed_mask)
        for a in AGENTS:
            if out.agreed_mask >> (a - 1) & 1:
                devs.append(abs(out.agreed_payoff[a - 1] - 1.0 / size))
    return float(np.mean(devs)) if devs else float("nan")


@dataclass
class RoundsReport:
    mean_rounds: float
    agreement_rate: float
    truncation_rate: float
    round_one_agreement_rate: float
    round_histogram: dict[int, float]


def round_statistics(outcomes: Sequence[EpisodeOutcome]) -> RoundsReport:
    """Round-count statistics; truncated episodes count the full horizon."""
    n = len(outcomes)
    rounds = np.array([o.final_round for o in outcomes], dtype=np.float64)
    agreed = np.array([o.agreed_mask is not None for o in outcomes])
    hist: dict[int, float] = {}
    for o in outcomes:
        hist[o.final_round] = hist.get(o.final_round, 0.0) + 1.0 / n
    return RoundsReport(
        mean_rounds=float(rounds.mean()),
        agreement_rate=float(agreed.mean()),
        truncation_rate=float(1.0 - agreed.mean()),
        round_one_agreement_rate=float(
            np.mean([(o.agreed_mask is not None and o.final_round == 1) for o in outcomes])
        ),
        round_histogram=dict(sorted(hist.items())),
    )


def proposer_self_share_mean(outcomes: Sequence[EpisodeOutcome]) -> float:
    shares = [o.proposer_self_share for o in outcomes if o.proposer_self_share is not None]
    return float(np.mean(shares)) if shares else float("nan")


def degenerate_rate(instances: Sequence[Instance]) -> float:
    """Fraction of instances whose grand coalition yields no gain."""
    from .coalition_values import DEGENERATE_TOL, GRAND_MASK

    flags = [ValueOracle(inst).value(GRAND_MASK) <= DEGENERATE_TOL for inst in instances]
    return float(np.mean(flags))


# ---------------------------------------------------------------------------
# Analytic round count for the random bot
# ---------------------------------------------------------------------------

# Per round: singleton 1/4, a pair accepted 2/4 * 1/2, grand accepted 1/4 * 1/4.
ROUND_TERMINATION_PROB = 1.0 / 4.0 + 2.0 / 4.0 * 1.0 / 2.0 + 1.0 / 4.0 * 1.0 / 4.0  # 9/16


def expected_rounds_random_analytic(T: int) -> float:
    """Expected rounds until the random bots agree, given agreement by T.

    The round count is geometric with success probability 9/16 truncated at
    the horizon; conditioning on agreement gives
    sum_{k=1..T} k*p*q^(k-1) / (1 - q^T).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    p = ROUND_TERMINATION_PROB
    q = 1.0 - p
    numer = sum(k * p * q ** (k - 1) for k in range(1, T + 1))
    return numer / (1.0 - q**T)


def analytic_round_distribution(T: int) -> dict[int, float]:
    """P(episode ends in round k) for the random bots; k = T pools agreement
    at T with truncation."""
    p = ROUND_TERMINATION_PROB
    q = 1.0 - p
    dist = {k: p * q ** (k - 1) for k in range(1, T)}
    dist[T] = q ** (T - 1)
    return dist


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    label: str
    episodes: int
    T: int
    degenerate_rate: float
    rounds: RoundsReport
    accuracy: AccuracyReport
    gaps: GapReport
    shapley: ShapleyReport
    equal_share_deviation: float
    proposer_self_share: float
    wall_clock_s: float
    wall_clock_per_instance_s: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_policies(
    instances: Sequence[Instance],
    policies: Sequence,
    *,
    T: int = 10,
    rng: np.random.Generator,
    tables: Sequence[CharacteristicTable] | None = None,
    deterministic: bool = False,
    singleton_rule: str = "auto_reject",
    label: str = "policy",
    scatter_path=None,
) -> tuple[EvalReport, list[EpisodeOutcome]]:
    """Play one episode per instance from round 1 and reduce all metrics."""
    start = time.perf_counter()
    if tables is None:
        tables = [characteristic_table(inst) for inst in instances]
    value_fns = [tbl.v for tbl in tables]
    outcomes, _ = play_episodes(
        instances,
        policies,
        T=T,
        rng=rng,
        deterministic=deterministic,
        value_fns=value_fns,
        singleton_rule=singleton_rule,
    )
    elapsed = time.perf_counter() - start
    report = EvalReport(
        label=label,
        episodes=len(outcomes),
        T=T,
        degenerate_rate=float(np.mean([tbl.degenerate for tbl in tables])),
        rounds=round_statistics(outcomes),
        accuracy=accuracy(outcomes, tables),
        gaps=optimality_gaps(outcomes, tables),
        shapley=shapley_correlation(outcomes, tables),
        equal_share_deviation=equal_share_deviation(outcomes),
        proposer_self_share=proposer_self_share_mean(outcomes),
        wall_clock_s=elapsed,
        wall_clock_per_instance_s=elapsed / max(1, len(instances)),
    )
    if scatter_path is not None:
        write_shapley_scatter(scatter_path, outcomes, tables)
    return report, outcomes


def evaluate_bot(
    kind: str,
    instances: Sequence[Instance],
    *,
    T: int = 10,
    rng: np.random.Generator,
    tables: Sequence[CharacteristicTable] | None = None,
    scatter_path=None,
) -> tuple[EvalReport, list[EpisodeOutcome]]:
    policies = [make_bot(kind) for _ in AGENTS]
    return evaluate_policies(
        instances,
        policies,
        T=T,
        rng=rng,
        tables=tables,
        singleton_rule=bot_singleton_rule(kind),
        label=f"bot:{kind}",
        scatter_path=scatter_path,
    )
