import numpy as np
import pytest

from partial_bsde import (
    Claim,
    DriftLoading,
    Grid,
    InformationModel,
    MarkDistribution,
    MarketConfig,
    cost_process,
    fs_decompose,
    mean_self_financing_strategy,
    mmm_density,
    mmm_price,
    optimal_strategy,
    perturbation_battery,
    risk_process,
    risk_quotient,
    simulate_market,
)
from partial_bsde import checks

from conftest import brownian

FULL = InformationModel.full()
DELAYED = InformationModel.delayed(0.25)
SQUARE = Claim.power(2.0, "W")
PARTITION = [0, 4, 8, 12, 16]


@pytest.fixture(scope="module")
def ens():
    return brownian(n_paths=20_000, seed=51, alpha=0.3)


@pytest.fixture(scope="module")
def delayed_optimal(ens):
    return optimal_strategy(ens, DELAYED, SQUARE)


class TestStrategy:
    @pytest.mark.parametrize("info", [FULL, DELAYED])
    def test_exact_identities(self, small_drift, info):
        s = optimal_strategy(small_drift, info, SQUARE)
        assert s.replication_error() == 0.0
        assert s.cost_identity_error() == 0.0
        assert cost_process(s) is s.cost

    def test_holdings_split(self, small_drift):
        s = optimal_strategy(small_drift, FULL, SQUARE)
        theta = np.concatenate([s.theta, s.theta[:, -1:]], axis=1)
        np.testing.assert_allclose(theta * small_drift.S + s.eta, s.value, atol=1e-12)

    def test_reuses_decomposition(self, small_drift):
        dec = fs_decompose(small_drift, DELAYED, SQUARE)
        s = optimal_strategy(small_drift, DELAYED, SQUARE, decomposition=dec)
        np.testing.assert_array_equal(s.theta, dec.integrand)

    def test_rejects_gkw(self, small_drift):
        from partial_bsde import gkw_decompose

        with pytest.raises(ValueError, match="FS"):
            optimal_strategy(small_drift, FULL, SQUARE, decomposition=gkw_decompose(small_drift, FULL, SQUARE))

    def test_optimal_cost_is_f_martingale(self, ens, delayed_optimal):
        z = checks.conditional_mean_zscores(ens, delayed_optimal.d_cost)
        assert np.max(np.abs(z)) <= checks.Z_LIMIT

    def test_optimal_cost_weakly_orthogonal(self, ens, delayed_optimal):
        z = checks.orthogonality_zscores(ens, DELAYED, delayed_optimal.d_cost)
        assert max(abs(v) for v in z.values()) <= checks.Z_LIMIT

    def test_mean_self_financing_for_any_theta(self, ens):
        lagged = np.stack([ens.M[:, max(i - 4, 0)] for i in range(ens.n_steps)], axis=1)
        s = mean_self_financing_strategy(ens, DELAYED, SQUARE, np.tanh(lagged))
        assert s.replication_error() == 0.0
        z = checks.conditional_mean_zscores(ens, s.d_cost)
        assert np.max(np.abs(z)) <= checks.Z_LIMIT

    def test_theta_shape_checked(self, small_drift):
        with pytest.raises(ValueError, match="shape"):
            mean_self_financing_strategy(small_drift, FULL, SQUARE, np.zeros((2, 2)))


class TestRisk:
    def test_risk_process(self, ens, delayed_optimal):
        r = risk_process(delayed_optimal, ens, DELAYED)
        np.testing.assert_array_equal(r.values[:, -1], 0.0)
        assert np.all(r.values >= 0)
        assert r.clipped >= 0 and r.min_raw <= 0

    def test_optimal_survives_battery(self, ens, delayed_optimal):
        battery = perturbation_battery(ens, DELAYED, PARTITION)
        assert set(battery) >= {"constant", "sign_lagged_M", "bump_cell_0"}
        for name, delta in battery.items():
            q = risk_quotient(delayed_optimal, ens, DELAYED, delta, PARTITION)
            assert q.min_value >= -checks.Z_LIMIT * q.pooled_se, name

    def test_falsifier_catches_perturbed_strategy(self, ens, delayed_optimal):
        d = np.full(ens.dM.shape, 0.5)
        bad = mean_self_financing_strategy(ens, DELAYED, SQUARE, delayed_optimal.theta + d)
        q = risk_quotient(bad, ens, DELAYED, -d, PARTITION)
        assert q.min_value < -checks.Z_LIMIT * q.pooled_se

    def test_bump_skips_other_cells(self, ens, delayed_optimal):
        delta = perturbation_battery(ens, DELAYED, PARTITION)["bump_cell_0"]
        q = risk_quotient(delayed_optimal, ens, DELAYED, delta, PARTITION)
        assert list(q.skipped) == [False, True, True, True]
        assert q.cells == ((0, 4), (4, 8), (8, 12), (12, 16))

    def test_input_validation(self, small_drift):
        s = optimal_strategy(small_drift, FULL, SQUARE)
        P, N = small_drift.dM.shape
        with pytest.raises(ValueError, match="partition"):
            risk_quotient(s, small_drift, FULL, np.zeros((P, N)), [0, 8, 8, 16])
        with pytest.raises(ValueError, match="shape"):
            risk_quotient(s, small_drift, FULL, np.zeros((P, 3)), PARTITION)
        with pytest.raises(ValueError, match="vanish"):
            risk_quotient(s, small_drift, FULL, np.ones((P, N + 1)), PARTITION)
        with pytest.raises(ValueError, match="bounded"):
            risk_quotient(s, small_drift, FULL, np.full((P, N), np.inf), PARTITION)


class TestMmm:
    def test_density_is_a_martingale(self, ens):
        w = mmm_density(ens)
        L = w.density[:, -1]
        assert w.valid.all() and w.n_invalid == 0
        assert abs(checks.zscore(L - 1.0)) <= checks.Z_LIMIT
        assert abs(checks.zscore(L * ens.S[:, -1] - ens.config.s0)) <= checks.Z_LIMIT

    def test_price_matches_fs_value(self, ens):
        price = mmm_price(ens, SQUARE, weights=mmm_density(ens))
        fs = optimal_strategy(ens, FULL, SQUARE)
        assert checks.rms(price, fs.value) < 0.1
        np.testing.assert_array_equal(price[:, -1], SQUARE.evaluate(ens))
        np.testing.assert_array_equal(mmm_price(ens, SQUARE, step=3), price[:, 3])

    def test_zero_drift_price_is_conditional_mean(self, small_bm):
        from partial_bsde import cond_expect

        xi = SQUARE.evaluate(small_bm)
        price = mmm_price(small_bm, SQUARE, step=5)
        np.testing.assert_allclose(price, cond_expect(small_bm, 5, FULL, xi).values, atol=1e-10)

    def test_rejects_partial_information(self, small_drift):
        with pytest.raises(ValueError, match="full-information"):
            mmm_price(small_drift, SQUARE, info=DELAYED)

    def test_positivity_with_small_alpha_and_jumps(self):
        cfg = MarketConfig(
            sigma_bar=0.5, jump_intensity=3.0, jump_marks=MarkDistribution.uniform(-0.4, 0.4),
            alpha=DriftLoading.constant(0.2), seed=5, n_paths=5000,
        )
        ens = simulate_market(cfg, Grid(1.0, 32))
        assert np.all(1.0 - ens.alpha * ens.dM > 0)
        w = mmm_density(ens)
        assert w.valid.mean() == 1.0 and np.all(w.density > 0)

    def test_invalid_paths_rejected_or_flagged(self):
        cfg = MarketConfig(
            sigma_bar=0.1, jump_intensity=2.0, jump_marks=MarkDistribution.constant(0.6),
            alpha=DriftLoading.constant(2.0), seed=6, n_paths=500,
        )
        ens = simulate_market(cfg, Grid(1.0, 8))
        with pytest.raises(ValueError, match="not equivalent"):
            mmm_density(ens)
        w = mmm_density(ens, max_invalid_fraction=1.0)
        assert 0 < w.n_invalid < 500
