"""Bots, evaluation metrics, and the analytic round-count check."""

import csv
import json
import math

import numpy as np
import pytest

from coalroute.baselines import (
    ROUND_TERMINATION_PROB,
    HeuristicBotPolicy,
    RandomBotPolicy,
    accuracy,
    analytic_round_distribution,
    bot_singleton_rule,
    degenerate_rate,
    equal_share_deviation,
    evaluate_bot,
    evaluate_policies,
    expected_rounds_random_analytic,
    make_bot,
    optimality_gaps,
    proposer_self_share_mean,
    round_statistics,
    shapley_correlation,
    write_shapley_scatter,
)
from coalroute.bargaining import EpisodeOutcome, play_episodes
from coalroute.coalition_values import (
    CharacteristicTable,
    best_coalition_for,
    characteristic_table,
    shapley,
)
from coalroute.instances import generate_instance, generate_instances
from coalroute.rng import RngStream

WORKED_VALUES = {1: 0.0, 2: 0.0, 4: 0.0, 3: 0.76, 5: 0.24, 6: 0.01, 7: 0.88}


def fake_outcome(index, proposer=None, first_mask=None, first_payoff=None,
                 agreed_mask=None, agreed_payoff=None, agreed_value=None,
                 final_round=1, truncated=False, rewards=None):
    return EpisodeOutcome(
        index=index,
        start_round=1,
        first_proposer=proposer,
        first_mask=first_mask,
        first_payoff=None if first_payoff is None else np.asarray(first_payoff, float),
        agreed_mask=agreed_mask,
        agreed_payoff=None if agreed_payoff is None else np.asarray(agreed_payoff, float),
        agreed_value=agreed_value,
        agreed_round=final_round if agreed_mask is not None else None,
        final_round=final_round,
        truncated=truncated,
        rewards=np.zeros(3) if rewards is None else np.asarray(rewards, float),
    )


@pytest.fixture(scope="module")
def eval_instances():
    return generate_instances(RngStream(501, "baseline-eval"), 800)


@pytest.fixture(scope="module")
def eval_tables(eval_instances):
    return [characteristic_table(inst) for inst in eval_instances]


# ---------------------------------------------------------------------------
# Bot behavior
# ---------------------------------------------------------------------------


class TestBots:
    def test_heuristic_agrees_round_one_on_grand_with_equal_shares(self):
        instances = generate_instances(RngStream(301, "bots"), 20)
        report, outcomes = evaluate_bot(
            "heuristic", instances, rng=np.random.default_rng(0)
        )
        for out in outcomes:
            assert out.agreed_mask == 7
            assert out.final_round == 1
            np.testing.assert_allclose(out.agreed_payoff, np.full(3, 1 / 3))
        assert report.rounds.mean_rounds == 1.0
        assert report.rounds.agreement_rate == 1.0
        assert report.equal_share_deviation == 0.0

    def test_random_bot_coalition_uniform_over_four_choices(self):
        inst = generate_instance(RngStream(302, "bots"))
        policies = [make_bot("random") for _ in range(3)]
        outcomes, _ = play_episodes(
            [inst] * 8000,
            policies,
            T=10,
            rng=np.random.default_rng(7),
            compute_values=False,
            singleton_rule="terminate",
        )
        per_kind = {"singleton": 0, "pair": 0, "grand": 0}
        for out in outcomes:
            size = bin(out.first_mask).count("1")
            per_kind[{1: "singleton", 2: "pair", 3: "grand"}[size]] += 1
        n = len(outcomes)
        assert per_kind["singleton"] / n == pytest.approx(0.25, abs=0.02)
        assert per_kind["pair"] / n == pytest.approx(0.50, abs=0.02)
        assert per_kind["grand"] / n == pytest.approx(0.25, abs=0.02)

    def test_random_bot_payoff_lies_on_simplex_and_varies(self):
        inst = generate_instance(RngStream(303, "bots"))
        policies = [make_bot("random") for _ in range(3)]
        outcomes, _ = play_episodes(
            [inst] * 200,
            policies,
            T=10,
            rng=np.random.default_rng(8),
            compute_values=False,
        )
        payoffs = np.stack([o.first_payoff for o in outcomes])
        np.testing.assert_allclose(payoffs.sum(axis=1), np.ones(len(outcomes)), atol=1e-9)
        assert payoffs.std() > 0.05

    def test_bot_factory_and_rules(self):
        assert isinstance(make_bot("heuristic"), HeuristicBotPolicy)
        assert isinstance(make_bot("random"), RandomBotPolicy)
        with pytest.raises(ValueError):
            make_bot("greedy")
        assert bot_singleton_rule("random") == "terminate"
        assert bot_singleton_rule("heuristic") == "auto_reject"


# ---------------------------------------------------------------------------
# Analytic expected rounds
# ---------------------------------------------------------------------------


class TestAnalyticRounds:
    def test_per_round_termination_probability(self):
        assert ROUND_TERMINATION_PROB == 9 / 16

    def test_horizon_ten_closed_form_value(self):
        assert round(expected_rounds_random_analytic(10), 3) == 1.775

    def test_single_round_horizon_is_one(self):
        assert expected_rounds_random_analytic(1) == 1.0

    def test_monotone_in_horizon_and_bounded(self):
        values = [expected_rounds_random_analytic(T) for T in range(1, 31)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] < 16 / 9 + 1e-9  # untruncated geometric mean

    def test_matches_monte_carlo_at_horizon_thirty(self):
        rng = np.random.default_rng(99)
        draws = rng.geometric(ROUND_TERMINATION_PROB, size=1_000_000)
        conditional = draws[draws <= 30].mean()
        assert expected_rounds_random_analytic(30) == pytest.approx(conditional, abs=0.01)

    def test_distribution_sums_to_one(self):
        dist = analytic_round_distribution(10)
        assert set(dist) == set(range(1, 11))
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
        assert dist[1] == pytest.approx(9 / 16)

    def test_bad_horizon_rejected(self):
        with pytest.raises(ValueError):
            expected_rounds_random_analytic(0)


@pytest.fixture(scope="module")
def random_run():
    inst = generate_instance(RngStream(304, "rounds"))
    policies = [make_bot("random") for _ in range(3)]
    outcomes, _ = play_episodes(
        [inst] * 20000,
        policies,
        T=10,
        rng=np.random.default_rng(12),
        compute_values=False,
        singleton_rule="terminate",
    )
    return outcomes


class TestSimulatedRounds:
    def test_mean_rounds_near_analytic(self, random_run):
        stats = round_statistics(random_run)
        assert stats.mean_rounds == pytest.approx(1.775, abs=0.05)

    def test_round_one_agreement_rate(self, random_run):
        stats = round_statistics(random_run)
        assert stats.round_one_agreement_rate == pytest.approx(0.5625, abs=0.015)

    def test_histogram_matches_analytic_binwise(self, random_run):
        stats = round_statistics(random_run)
        dist = analytic_round_distribution(10)
        n = len(random_run)
        for k, p in dist.items():
            observed = stats.round_histogram.get(k, 0.0)
            sigma = math.sqrt(p * (1 - p) / n)
            assert abs(observed - p) < 5 * sigma + 1e-9, f"round {k}"


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


class OraclePolicy:
    """Proposes the proposer's best coalition with equal member shares."""

    def propose(self, envs, obs, rng, deterministic):
        n = len(envs)
        bits = np.zeros((n, 3))
        payoffs = np.zeros((n, 3))
        for i, env in enumerate(envs):
            table = characteristic_table(env.instance)
            mask, _ = best_coalition_for(table, env.state.p)
            for a in (1, 2, 3):
                if mask >> (a - 1) & 1:
                    bits[i, a - 1] = 1.0
            members = bits[i].sum()
            payoffs[i] = bits[i] / members
        return bits, payoffs, None

    def respond(self, envs, obs, rng, deterministic):
        return np.ones(len(envs), dtype=bool), None


class TestAccuracy:
    def test_oracle_policy_scores_one(self):
        instances = generate_instances(RngStream(305, "acc"), 60)
        tables = [characteristic_table(inst) for inst in instances]
        policies = [OraclePolicy() for _ in range(3)]
        outcomes, _ = play_episodes(
            instances, policies, T=10, rng=np.random.default_rng(3),
            value_fns=[t.v for t in tables],
        )
        report = accuracy(outcomes, tables)
        assert report.mean == 1.0
        assert report.pooled == 1.0
        for a in (1, 2, 3):
            assert report.per_agent[a] in (1.0,) or math.isnan(report.per_agent[a])

    def test_grand_proposal_wrong_when_pair_is_best(self):
        table = CharacteristicTable.from_values(WORKED_VALUES)
        outcomes = [fake_outcome(0, proposer=1, first_mask=7)]
        assert accuracy(outcomes, [table]).pooled == 0.0
        outcomes = [fake_outcome(0, proposer=1, first_mask=3)]
        assert accuracy(outcomes, [table]).pooled == 1.0

    def test_degenerate_instances_excluded(self):
        table = CharacteristicTable.from_values({m: 0.0 for m in range(1, 8)})
        outcomes = [fake_outcome(0, proposer=2, first_mask=7)]
        report = accuracy(outcomes, [table])
        assert report.n_scored == 0
        assert math.isnan(report.pooled)

    def test_heuristic_accuracy_near_reference_level(self, eval_instances, eval_tables):
        report, _ = evaluate_bot(
            "heuristic", eval_instances, rng=np.random.default_rng(21), tables=eval_tables
        )
        assert report.accuracy.pooled == pytest.approx(0.62, abs=0.06)

    def test_random_accuracy_near_chance_level(self, eval_instances, eval_tables):
        report, _ = evaluate_bot(
            "random", eval_instances, rng=np.random.default_rng(22), tables=eval_tables
        )
        assert report.accuracy.pooled == pytest.approx(0.25, abs=0.06)


# ---------------------------------------------------------------------------
# Optimality gaps
# ---------------------------------------------------------------------------


class TestOptimalityGaps:
    def test_worked_table_grand_proposal_gap(self):
        table = CharacteristicTable.from_values(WORKED_VALUES)
        outcomes = [fake_outcome(0, proposer=1, first_mask=7)]
        report = optimality_gaps(outcomes, [table])
        assert report.phi_per_capita == pytest.approx(0.38 - 0.88 / 3, abs=1e-9)
        assert report.phi_per_capita == pytest.approx(0.0867, abs=5e-5)
        assert report.eta_per_capita == pytest.approx((0.38 - 0.88 / 3) / 0.38, abs=1e-9)
        assert report.eta_per_capita == pytest.approx(0.228, abs=5e-4)
        assert report.phi_value == pytest.approx(0.76 - 0.88, abs=1e-12)
        assert report.eta_value == pytest.approx((0.76 - 0.88) / 0.76, abs=1e-12)

    def test_best_coalition_proposal_has_zero_gap(self):
        table = CharacteristicTable.from_values(WORKED_VALUES)
        outcomes = [fake_outcome(0, proposer=1, first_mask=3)]
        report = optimality_gaps(outcomes, [table])
        assert report.phi_per_capita == 0.0
        assert report.eta_per_capita == 0.0
        assert report.phi_value == 0.0

    def test_singleton_and_degenerate_proposals_excluded(self):
        table = CharacteristicTable.from_values(WORKED_VALUES)
        zero = CharacteristicTable.from_values({m: 0.0 for m in range(1, 8)})
        outcomes = [
            fake_outcome(0, proposer=1, first_mask=1),
            fake_outcome(1, proposer=2, first_mask=7),
            fake_outcome(2, proposer=1, first_mask=3),
        ]
        report = optimality_gaps(outcomes, [table, zero, table])
        assert report.n_scored == 1
        assert report.excluded_fraction == pytest.approx(2 / 3)
        assert report.phi_per_capita == 0.0

    def test_random_bot_relative_gap_near_reference_level(self, eval_instances, eval_tables):
        report, _ = evaluate_bot(
            "random", eval_instances, rng=np.random.default_rng(23), tables=eval_tables
        )
        assert report.gaps.eta_per_capita == pytest.approx(0.32, abs=0.08)

    def test_heuristic_relative_gap_near_reference_level(self, eval_instances, eval_tables):
        report, _ = evaluate_bot(
            "heuristic", eval_instances, rng=np.random.default_rng(24), tables=eval_tables
        )
        assert report.gaps.eta_per_capita == pytest.approx(0.08, abs=0.04)


# ---------------------------------------------------------------------------
# Shapley correlation and scatter export
# ---------------------------------------------------------------------------


class TestShapleyCorrelation:
    def test_paying_exactly_shapley_gives_perfect_scores(self):
        instances = generate_instances(RngStream(306, "shap"), 40)
        tables = [characteristic_table(inst) for inst in instances]
        outcomes = [
            fake_outcome(i, proposer=1, first_mask=7, agreed_mask=7,
                         agreed_payoff=np.full(3, 1 / 3), rewards=shapley(tables[i]))
            for i in range(len(tables))
        ]
        report = shapley_correlation(outcomes, tables)
        assert report.r2 == pytest.approx(1.0, abs=1e-12)
        assert report.mse == pytest.approx(0.0, abs=1e-15)
        assert report.mae == pytest.approx(0.0, abs=1e-12)

    def test_constant_zero_payoffs_score_at_most_zero(self):
        instances = generate_instances(RngStream(307, "shap"), 40)
        tables = [characteristic_table(inst) for inst in instances]
        outcomes = [fake_outcome(i, proposer=1, first_mask=7) for i in range(len(tables))]
        report = shapley_correlation(outcomes, tables)
        assert report.r2 <= 0.0
        for a in (1, 2, 3):
            assert report.r2_per_agent[a] <= 0.0

    def test_scatter_csv_schema(self, tmp_path):
        instances = generate_instances(RngStream(308, "shap"), 5)
        tables = [characteristic_table(inst) for inst in instances]
        outcomes = [
            fake_outcome(i, proposer=1, first_mask=3, agreed_mask=3,
                         agreed_payoff=[0.5, 0.5, 0.0],
                         rewards=[0.1, 0.1, 0.0])
            for i in range(len(tables))
        ]
        path = tmp_path / "scatter.csv"
        write_shapley_scatter(path, outcomes, tables)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["instance_id", "agent", "realized_payoff", "shapley", "in_coalition"]
        assert len(rows) == 1 + 3 * len(outcomes)
        for row in rows[1:]:
            agent = int(row[1])
            assert float(row[2]) == (0.1 if agent in (1, 2) else 0.0)
            assert float(row[3]) == pytest.approx(
                shapley(tables[int(row[0])])[agent - 1], abs=1e-12
            )
            assert row[4] == ("1" if agent in (1, 2) else "0")


# ---------------------------------------------------------------------------
# Remaining reductions and the full report
# ---------------------------------------------------------------------------


class TestOtherMetrics:
    def test_equal_share_deviation_fixture(self):
        outcomes = [
            fake_outcome(0, proposer=1, first_mask=7, agreed_mask=7,
                         agreed_payoff=[0.5, 0.3, 0.2])
        ]
        expected = (abs(0.5 - 1 / 3) + abs(0.3 - 1 / 3) + abs(0.2 - 1 / 3)) / 3
        assert equal_share_deviation(outcomes) == pytest.approx(expected, abs=1e-12)

    def test_equal_share_deviation_pair(self):
        outcomes = [
            fake_outcome(0, proposer=1, first_mask=3, agreed_mask=3,
                         agreed_payoff=[0.7, 0.3, 0.0])
        ]
        assert equal_share_deviation(outcomes) == pytest.approx(0.2, abs=1e-12)

    def test_round_statistics_fixture(self):
        outcomes = [
            fake_outcome(0, proposer=1, first_mask=7, agreed_mask=7,
                         agreed_payoff=[1 / 3] * 3, final_round=1),
            fake_outcome(1, proposer=2, first_mask=7, agreed_mask=7,
                         agreed_payoff=[1 / 3] * 3, final_round=3),
            fake_outcome(2, proposer=3, first_mask=7, final_round=10, truncated=True),
        ]
        stats = round_statistics(outcomes)
        assert stats.mean_rounds == pytest.approx((1 + 3 + 10) / 3)
        assert stats.agreement_rate == pytest.approx(2 / 3)
        assert stats.truncation_rate == pytest.approx(1 / 3)
        assert stats.round_one_agreement_rate == pytest.approx(1 / 3)
        assert stats.round_histogram[1] == pytest.approx(1 / 3)

    def test_proposer_self_share(self):
        outcomes = [
            fake_outcome(0, proposer=2, first_mask=7, first_payoff=[0.2, 0.5, 0.3]),
            fake_outcome(1, proposer=1, first_mask=3, first_payoff=[0.7, 0.3, 0.0]),
        ]
        assert proposer_self_share_mean(outcomes) == pytest.approx(0.6)

    def test_degenerate_rate_near_reference_level(self):
        instances = generate_instances(RngStream(309, "degen"), 1500)
        assert degenerate_rate(instances) == pytest.approx(0.019, abs=0.015)

    def test_report_serializes_to_json(self, tmp_path):
        instances = generate_instances(RngStream(310, "report"), 30)
        report, _ = evaluate_bot("heuristic", instances, rng=np.random.default_rng(1))
        path = tmp_path / "report.json"
        report.to_json(path)
        with open(path) as fh:
            data = json.load(fh)
        assert data["label"] == "bot:heuristic"
        assert data["episodes"] == 30
        assert data["rounds"]["agreement_rate"] == 1.0
        assert data["equal_share_deviation"] == 0.0
        assert 0.0 <= data["accuracy"]["pooled"] <= 1.0
        assert data["wall_clock_per_instance_s"] > 0.0

    def test_evaluate_policies_respects_given_tables(self):
        instances = generate_instances(RngStream(311, "report"), 10)
        tables = [characteristic_table(inst) for inst in instances]
        policies = [HeuristicBotPolicy() for _ in range(3)]
        report, outcomes = evaluate_policies(
            instances, policies, rng=np.random.default_rng(2), tables=tables,
            label="given-tables",
        )
        for out, table in zip(outcomes, tables):
            np.testing.assert_allclose(out.rewards, np.full(3, table.v(7) / 3), atol=1e-12)
        assert report.label == "given-tables"
