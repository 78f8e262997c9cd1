import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpbackoff.backoff import (BackoffTable, ChanceConfig, clopper_lower, ecdf_joint, initial_backoffs,
                               joint_satisfaction_stat, run_backoff_iterations, sample_stream_id)
from gpbackoff.errors import DomainError
from gpbackoff.numerics import RngStream, betainv
from synthetic import LinearGaussianLoop


class TestStatistic:
    def test_all_feasible(self):
        assert joint_satisfaction_stat(-np.ones((13, 3))) == -1.0

    def test_single_violation(self):
        G = -np.ones((13, 3))
        G[5, 1] = 0.5
        assert joint_satisfaction_stat(G) == 0.5

    @given(st.lists(st.floats(-100, 100), min_size=6, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_exhaustive_oracle(self, vals):
        G = np.array(vals).reshape(3, 2)
        best = -np.inf
        for t in range(3):
            for j in range(2):
                best = max(best, G[t, j])
        assert joint_satisfaction_stat(G) == best
        assert (joint_satisfaction_stat(G) <= 0) == all(v <= 0 for v in vals)


class TestEcdf:
    def test_counts(self):
        assert ecdf_joint(-np.ones(10)) == 1.0
        assert ecdf_joint(np.r_[-np.ones(900), np.ones(100)]) == 0.9

    def test_indicator_oracle(self):
        s = np.random.default_rng(0).standard_normal(333)
        assert ecdf_joint(s) == sum(1 for v in s if v <= 0) / 333


class TestClopperPearson:
    def test_all_successes_closed_form(self):
        assert abs(clopper_lower(1.0, 1000, 0.01) - 0.01 ** (1 / 1000)) <= 1e-12
        assert clopper_lower(1.0, 1000, 0.01) == pytest.approx(0.99540, abs=1e-5)

    def test_no_successes(self):
        assert clopper_lower(0.0, 50, 0.01) == 0.0

    @pytest.mark.parametrize("beta_hat,expected", [(0.93, 0.91), (0.91, 0.89)])
    def test_table_pairs(self, beta_hat, expected):
        assert round(clopper_lower(beta_hat, 1000, 0.01), 2) == expected

    def test_symmetry_identity(self):
        # the reflected form with the quantile level mirrored equals the lower bound
        S, alpha = 1000, 0.01
        for k in (1, 120, 500, 910, 930, 999):
            lb = clopper_lower(k / S, S, alpha)
            assert abs((1.0 - betainv(1.0 - alpha, S + 1 - k, k)) - lb) <= 1e-9

    def test_literal_reflection_is_upper_quantile(self):
        # 1 - betainv(alpha, S+1-k, k) is the (1 - alpha) quantile of Beta(k, S-k+1), not the lower bound
        S, alpha, k = 1000, 0.01, 930
        literal = 1.0 - betainv(alpha, S + 1 - k, k)
        assert abs(literal - betainv(1.0 - alpha, k, S - k + 1)) <= 1e-9
        assert literal > k / S > clopper_lower(k / S, S, alpha)

    def test_below_estimate_and_gap_shrinks(self):
        gaps = [0.9 - clopper_lower(0.9, S, 0.01) for S in (50, 200, 1000)]
        assert all(g > 0 for g in gaps) and gaps[0] > gaps[1] > gaps[2]

    def test_matches_scipy(self):
        from scipy.stats import beta
        assert clopper_lower(0.93, 1000, 0.01) == pytest.approx(beta.ppf(0.01, 930, 71), abs=1e-10)

    def test_coverage(self):
        rng = np.random.default_rng(0)
        k = rng.binomial(200, 0.9, 2000)
        covered = np.mean([clopper_lower(ki / 200, 200, 0.01) <= 0.9 for ki in k])
        assert covered >= 1 - 0.01 - 0.02

    def test_non_count(self):
        with pytest.raises(DomainError):
            clopper_lower(0.1234567, 10, 0.01)


class TestInitialBackoffs:
    def test_no_spread(self):
        nom = np.random.default_rng(0).standard_normal((4, 2))
        assert np.array_equal(initial_backoffs(np.repeat(nom[None], 10, 0), nom, 0.1), np.zeros((4, 2)))

    def test_counting_oracle(self):
        # row 0 is the measured initial state and stays zero
        nom = np.zeros((2, 1))
        samples = nom + np.arange(10.0)[:, None, None]
        b = initial_backoffs(samples, nom, 0.1)
        assert b[1, 0] == 8.0 and b[0, 0] == 0.0

    def test_floor_and_terminal_rows(self):
        rng = np.random.default_rng(1)
        samples = rng.standard_normal((50, 4, 3)) - 5.0
        samples[:, :3, 2] = 0.0
        nom = np.zeros((4, 3))
        b = initial_backoffs(samples, nom, 0.1)
        assert np.all(b >= 0.0) and np.all(b[:3, 2] == 0.0)


class TestTable:
    def test_scaling_and_round_trip(self, tmp_path):
        bt = np.arange(12.0).reshape(4, 3)
        tab = BackoffTable(bt, 0.0).scaled(1.5)
        assert np.array_equal(tab.b, 1.5 * bt)
        tab.write(tmp_path / "b.csv", tmp_path / "b.json", {"epsilon": 0.1})
        back = BackoffTable.read(tmp_path / "b.csv", tmp_path / "b.json")
        assert back.gamma == 1.5 and np.array_equal(back.b_tilde, bt)
        assert (tmp_path / "b.csv").read_text().splitlines()[0] == "t,j,b,b_tilde"
        assert json.loads((tmp_path / "b.json").read_text())["gamma"] == 1.5

    def test_zeros(self):
        assert np.array_equal(BackoffTable.zeros(12, 3).b, np.zeros((13, 3)))


class TestStreams:
    def test_frozen_ignores_iteration(self):
        assert sample_stream_id(7, 0) == sample_stream_id(7, 5)

    def test_fresh_and_attempts_distinct(self):
        ids = {sample_stream_id(s, it, a, True) for s in range(5) for it in range(4) for a in range(3)}
        assert len(ids) == 60


class TestBisection:
    @pytest.fixture(scope="class")
    @staticmethod
    def run():
        loop = LinearGaussianLoop(S=500)
        cfg = ChanceConfig(S=500, n_b=12)
        return loop, run_backoff_iterations(loop, loop.nominal, cfg)

    def test_target_reached(self, run):
        loop, rep = run
        assert rep.converged and not rep.no_sign_change
        assert 0.89 <= rep.beta_lb <= 0.93

    def test_analytic_probability(self, run):
        loop, rep = run
        p = loop.probability(rep.table.b)
        # MC estimate at the chosen gamma within 4 standard errors of the exact value
        assert abs(rep.beta_hat - p) <= 4 * np.sqrt(p * (1 - p) / 500)

    def test_bracket_and_records(self, run):
        _, rep = run
        assert rep.records[0].gamma == 0.0 and len(rep.records) == 13
        widths = [r.b_gamma - r.a_gamma for r in rep.records[1:]]
        assert all(abs(w2 - w1 / 2) <= 1e-12 for w1, w2 in zip(widths, widths[1:]))
        assert np.all(rep.table.b_tilde >= 0) and np.all(rep.table.b[0] == 0)

    def test_monotone_in_gamma_on_frozen_samples(self, run):
        _, rep = run
        pairs = sorted((r.gamma, r.beta_hat) for r in rep.records)
        assert all(b1 <= b2 for (_, b1), (_, b2) in zip(pairs, pairs[1:]))

    def test_initial_backoff_matches_gaussian_quantile(self, run):
        loop, rep = run
        # 0.9-quantile of N(0, sigma^2) is 1.2816 sigma; MC error at S=500 is about 0.08 sigma
        assert np.allclose(rep.table.b_tilde[1:, 0], 1.2816 * loop.sigma, atol=0.25 * loop.sigma)

    def test_no_sign_change(self):
        loop = LinearGaussianLoop(S=100)
        always_ok = lambda b, it: (loop(b, it)[0] - 10.0, 0)
        rep = run_backoff_iterations(always_ok, loop.nominal, ChanceConfig(S=100, n_b=4))
        assert rep.no_sign_change and not rep.converged and rep.table.gamma == 0.0
        assert len(rep.records) == 1

    def test_fresh_samples_mode(self):
        loop = LinearGaussianLoop(S=200, fresh=True)
        rep = run_backoff_iterations(loop, loop.nominal, ChanceConfig(S=200, n_b=6, fresh_samples=True))
        assert rep.converged and rep.beta_lb >= 0.9

    def test_config_validation(self):
        with pytest.raises(DomainError):
            ChanceConfig(epsilon=1.5)
