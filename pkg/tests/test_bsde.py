import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partial_bsde import (
    Claim,
    Driver,
    DriverContext,
    Grid,
    InformationModel,
    block_count,
    classical_norm,
    p_norm,
    picard_step,
    reduce_full_to_partial,
    solve_bsde_delayed_blocks,
    solve_bsde_full,
    solve_bsde_partial,
)
from partial_bsde.bsde import MAX_BLOCKS, SolutionDelta, solution_delta

from conftest import brownian
from test_information import coupled_ensemble

FULL = InformationModel.full()
DELAYED = InformationModel.delayed(0.25)
SQUARE = Claim.power(2.0, "W")


def rms(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


class TestDriver:
    def test_factories_evaluate(self):
        ctx = DriverContext(0, np.full(3, 0.5))
        y, z = np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, -1.0])
        np.testing.assert_allclose(Driver.discount(0.5)(0.0, y, z, ctx), -0.5 * y)
        np.testing.assert_allclose(Driver.linear(1.0, 2.0, 3.0)(0.0, y, z, ctx), y + 2 * z + 3)
        np.testing.assert_allclose(Driver.follmer_schweizer(0.5, True)(0.0, y, z, ctx), -0.5 * z)
        np.testing.assert_allclose(Driver.zero()(0.0, y, z, ctx), 0.0)
        assert Driver.constant(2.0)(0.0, y, z, ctx).shape == (3,)

    @pytest.mark.parametrize(
        "driver",
        [Driver.zero(), Driver.constant(1.0), Driver.discount(0.5), Driver.linear(0.3, -0.7, 1.0),
         Driver.lipschitz_z(0.8), Driver.follmer_schweizer(0.3, True)],
    )
    def test_declared_lipschitz_holds(self, driver):
        assert driver.lipschitz_ratio(alpha_bound=0.3) <= driver.lipschitz * (1 + 1e-9) + 1e-12
        driver.check_lipschitz(alpha_bound=0.3)

    def test_underdeclared_lipschitz_rejected(self):
        d = Driver(lambda t, y, z, c: 2.0 * y, 1.0, name="liar")
        with pytest.raises(ValueError, match="exceeds"):
            d.check_lipschitz()

    def test_growth_checks(self):
        Driver.lipschitz_z(0.5).check_growth()
        with pytest.raises(ValueError, match="z-only"):
            Driver.discount(0.5).check_growth()
        with pytest.raises(ValueError, match="growth"):
            Driver(lambda t, y, z, c: z, 1.0, depends_on_y=False).check_growth()

    def test_negative_lipschitz_rejected(self):
        with pytest.raises(ValueError):
            Driver(lambda t, y, z, c: 0.0, -1.0)

    def test_integrability(self, small_bm):
        assert Driver.constant(2.0).integrability(small_bm) == pytest.approx(4.0)
        assert Driver.discount(1.0).integrability(small_bm) == 0.0


class TestClaim:
    def test_payoffs(self, small_drift):
        S = small_drift.S[:, -1]
        np.testing.assert_array_equal(Claim.call(1.0).evaluate(small_drift), np.maximum(S - 1, 0))
        np.testing.assert_array_equal(Claim.put(1.0).evaluate(small_drift), np.maximum(1 - S, 0))
        np.testing.assert_array_equal(Claim.identity().evaluate(small_drift), S)
        np.testing.assert_allclose(
            SQUARE.evaluate(small_drift), small_drift.dW.sum(axis=1) ** 2
        )
        assert Claim.constant(3.0).second_moment(small_drift) == 9.0

    def test_bad_underlying(self):
        with pytest.raises(ValueError, match="underlying"):
            Claim.call(1.0, "X")

    def test_bad_payoff(self, small_bm):
        with pytest.raises(ValueError, match="shape"):
            Claim("bad", lambda e: np.zeros(3)).evaluate(small_bm)
        with pytest.raises(ValueError, match="finite"):
            Claim("inf", lambda e: np.full(e.n_paths, np.inf)).evaluate(small_bm)


CASES = [
    (FULL, Driver.zero()),
    (FULL, Driver.discount(0.5)),
    (DELAYED, Driver.lipschitz_z(0.5)),
    (DELAYED, Driver.linear(0.2, 0.3, 0.1)),
    (DELAYED, Driver.follmer_schweizer(0.3, True)),
]


class TestExactIdentities:
    @pytest.mark.parametrize("info,driver", CASES)
    @pytest.mark.parametrize("scheme", ["joint", "ratio"])
    def test_recursion_and_terminal(self, small_drift, info, driver, scheme):
        sol = solve_bsde_partial(small_drift, info, driver, SQUARE, scheme=scheme)
        assert sol.terminal_error() == 0.0
        assert sol.recursion_error(small_drift) == 0.0

    def test_full_solver_identities(self, small_bm):
        sol = solve_bsde_full(small_bm, Driver.discount(0.5), SQUARE)
        assert sol.terminal_error() == 0.0
        assert sol.recursion_error(small_bm) == 0.0

    def test_block_solver_identities(self, small_bm):
        sol = solve_bsde_delayed_blocks(small_bm, DELAYED, Driver.lipschitz_z(0.5), SQUARE)
        assert sol.terminal_error() == 0.0
        assert sol.recursion_error(small_bm) == 0.0

    def test_outputs_read_only(self, small_bm):
        sol = picard_step(small_bm, FULL, Driver.zero(), SQUARE)
        with pytest.raises(ValueError):
            sol.Y[0, 0] = 0.0


class TestPicard:
    def test_zero_driver_one_iteration(self, small_bm):
        sol = solve_bsde_partial(small_bm, DELAYED, Driver.zero(), SQUARE)
        assert sol.iterations == 1 and sol.converged

    def test_constant_driver_oracle(self, small_bm):
        # Y_t = E[xi | F_t] + c (<M>_T - <M>_t)
        c = 0.7
        sol = solve_bsde_partial(small_bm, FULL, Driver.constant(c), SQUARE)
        base = picard_step(small_bm, FULL, Driver.zero(), SQUARE)
        t = small_bm.grid.times
        np.testing.assert_allclose(sol.Y - base.Y, np.broadcast_to(c * (1.0 - t), sol.Y.shape), atol=1e-9)
        assert sol.iterations == 1

    def test_discount_oracle(self):
        ens = brownian(n_paths=20_000, seed=31)
        t = ens.grid.times
        sol = solve_bsde_partial(ens, FULL, Driver.discount(0.5), SQUARE)
        exact = np.exp(-0.5 * (1.0 - t)) * (ens.W**2 + 1.0 - t)
        assert rms(sol.Y, exact) < 0.05
        assert sol.converged and sol.iterations <= 8
        assert all(r <= 0.6 for r in sol.ratio_history[1:])

    def test_non_convergence_reported(self, small_bm):
        sol = solve_bsde_partial(small_bm, FULL, Driver.lipschitz_z(0.5), SQUARE, max_iter=1)
        assert not sol.converged and sol.iterations == 1

    def test_bad_arguments(self, small_bm):
        with pytest.raises(ValueError, match="max_iter"):
            solve_bsde_partial(small_bm, FULL, Driver.zero(), SQUARE, max_iter=0)
        with pytest.raises(ValueError, match="scheme"):
            picard_step(small_bm, FULL, Driver.zero(), SQUARE, scheme="euler")
        with pytest.raises(ValueError, match="prev"):
            picard_step(small_bm, FULL, Driver.zero(), SQUARE, prev=(np.zeros(3), np.zeros(3)))

    def test_lipschitz_checked_before_solving(self, small_bm):
        d = Driver(lambda t, y, z, c: 5.0 * z, 1.0, depends_on_y=False, name="liar")
        with pytest.raises(ValueError, match="Lipschitz"):
            solve_bsde_partial(small_bm, FULL, d, SQUARE)


class TestMeasurability:
    def test_delayed_integrand_depends_on_lagged_state_only(self):
        ens = coupled_ensemble(split_step=6)
        sol = solve_bsde_partial(ens, DELAYED, Driver.lipschitz_z(0.5), SQUARE)
        L = DELAYED.lag_steps(ens.grid)
        for i in range(ens.n_steps):
            same = np.array_equal(sol.Z[0::2, i], sol.Z[1::2, i])
            if i - L <= 6:
                assert same, i
        assert not np.array_equal(sol.Z[0::2, -1], sol.Z[1::2, -1])

    def test_full_integrand_sees_current_state(self):
        ens = coupled_ensemble(split_step=6)
        sol = solve_bsde_partial(ens, FULL, Driver.zero(), SQUARE)
        assert np.array_equal(sol.Z[0::2, 6], sol.Z[1::2, 6])
        assert not np.array_equal(sol.Z[0::2, 7], sol.Z[1::2, 7])


class TestNorms:
    def test_block_count_degenerate(self):
        assert block_count(1.0, 0.0, 1.0) == 1
        assert block_count(1.0, 0.01, 1.0) == 1

    @given(K=st.floats(0.05, 3.0), C=st.floats(0.1, 5.0), T=st.floats(0.1, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_block_condition_holds(self, K, C, T):
        m = block_count(T, K, C)
        r = T / m
        rho = C * r
        assert 42 * K * K * max(rho * rho, rho) <= 1 / 6 * (1 + 1e-9)
        if m > 1:
            r_prev = T / (m - 1)
            assert 42 * K * K * max((C * r_prev) ** 2, C * r_prev) >= 1 / 6 * (1 - 1e-9)

    def test_block_count_callable_rho(self):
        assert block_count(1.0, 0.5, lambda r: 2.0 * r) == block_count(1.0, 0.5, 2.0)

    @given(seed=st.integers(0, 1000), K=st.floats(0.05, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_p_norm_sandwich(self, seed, K):
        rng = np.random.default_rng(seed)
        P, N = 50, 16
        g = Grid(1.0, N)
        d = SolutionDelta(
            rng.normal(size=(P, N + 1)), rng.normal(size=(P, N)), rng.normal(size=(P, N)),
            np.full((P, N), g.dt),
        )
        m = block_count(1.0, K, 1.0)
        c = classical_norm(d)
        p = p_norm(d, g, K, 1.0)
        weights = sum(210.0**k for k in range(m))
        assert c * (1 - 1e-12) <= p <= weights * c * (1 + 1e-12)

    def test_single_block_equals_sum(self):
        rng = np.random.default_rng(1)
        P, N = 40, 8
        g = Grid(1.0, N)
        d = SolutionDelta(rng.normal(size=(P, N + 1)), rng.normal(size=(P, N)),
                          rng.normal(size=(P, N)), np.full((P, N), g.dt))
        assert p_norm(d, g, 0.0, 1.0) == pytest.approx(classical_norm(d), rel=1e-12)

    def test_too_many_blocks(self):
        g = Grid(50.0, 64)
        d = SolutionDelta(np.zeros((2, 65)), np.zeros((2, 64)), np.zeros((2, 64)), np.ones((2, 64)))
        assert block_count(50.0, 3.0, 1.0) > MAX_BLOCKS
        with pytest.raises(OverflowError):
            p_norm(d, g, 3.0, 1.0)

    def test_solution_delta(self, small_bm):
        a = picard_step(small_bm, FULL, Driver.zero(), SQUARE)
        d = solution_delta(a, a, small_bm)
        assert classical_norm(d) == 0.0
        assert math.isclose(classical_norm(solution_delta(a, None, small_bm)),
                            classical_norm(SolutionDelta(a.Y, a.Z, a.dO, small_bm.d_bracket)))


class TestReduction:
    def test_matches_delayed_gkw(self):
        ens = brownian(n_paths=20_000, seed=32)
        full = solve_bsde_full(ens, Driver.zero(), SQUARE)
        red = reduce_full_to_partial(full, ens, DELAYED)
        direct = solve_bsde_partial(ens, DELAYED, Driver.zero(), SQUARE)
        assert rms(red.Z, direct.Z) < 0.1
        assert rms(red.Y, direct.Y) < 0.05
        assert red.recursion_error(ens) == 0.0
        assert red.diagnostics["z_norm_projected"] <= red.diagnostics["z_norm_full"]

    def test_rejects_z_dependent(self, small_bm):
        full = solve_bsde_partial(small_bm, FULL, Driver.lipschitz_z(0.5), SQUARE)
        with pytest.raises(NotImplementedError):
            reduce_full_to_partial(full, small_bm, DELAYED)

    def test_rejects_partial_input(self, small_bm):
        sol = picard_step(small_bm, DELAYED, Driver.zero(), SQUARE)
        with pytest.raises(ValueError, match="full-information"):
            reduce_full_to_partial(sol, small_bm, DELAYED)


class TestBlocks:
    def test_agrees_with_picard(self):
        ens = brownian(n_paths=20_000, seed=33)
        d = Driver.lipschitz_z(0.5)
        blocks = solve_bsde_delayed_blocks(ens, DELAYED, d, SQUARE)
        picard = solve_bsde_partial(ens, DELAYED, d, SQUARE)
        assert rms(blocks.Y, picard.Y) < 0.05
        assert rms(blocks.Z, picard.Z) < 0.1

    def test_rejections(self, small_bm, small_drift):
        with pytest.raises(ValueError, match="delayed"):
            solve_bsde_delayed_blocks(small_bm, FULL, Driver.zero(), SQUARE)
        with pytest.raises(ValueError, match="z-only"):
            solve_bsde_delayed_blocks(small_bm, DELAYED, Driver.discount(0.1), SQUARE)
        with pytest.raises(ValueError, match="integer multiple"):
            solve_bsde_delayed_blocks(
                small_bm, InformationModel.delayed(0.375), Driver.zero(), SQUARE
            )
        with pytest.raises(ValueError, match="deterministic"):
            solve_bsde_delayed_blocks(
                small_drift, DELAYED, Driver.follmer_schweizer(0.3, False), SQUARE
            )
