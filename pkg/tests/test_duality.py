import json
import math

import numpy as np
import pytest
from scipy import integrate

from dualscope import TimeGrid, matrix_exponential, nonlinear_closure, unobservable_directions, validate_model
from dualscope.duality import (
    AdaptedControl,
    constant_control,
    control_from_dict,
    empirical_reachable_span,
    estimator_terminal,
    feature_count,
    features,
    feedback_control,
    parse_control,
    random_feedback_control,
    solve_backward_ode,
    solve_bsde_lsmc,
    verify_adjoint_identity,
    y0_forward_representation,
    zero_control,
)

GRID = TimeGrid(1.0, 1e-3)


def m1_closed_form():
    e = (1 - math.exp(-2)) / 2
    return np.array([1 + e, 1 - e])


class TestFeaturesAndControls:
    def test_feature_library(self):
        phi = features(np.array([[2.0, 3.0]]))
        np.testing.assert_array_equal(phi, [[1, 2, 3, 4, 6, 9]])
        assert feature_count(2) == 6 and feature_count(1) == 3

    def test_feedback_is_clipped(self):
        U = feedback_control([[0.0, 1.0, 0.0]], clip=5.0)
        np.testing.assert_array_equal(U.at(0, np.array([[7.0], [-2.0]])), [[5.0], [-2.0]])

    def test_feedback_reads_only_current_value(self):
        rng = np.random.default_rng(0)
        U = random_feedback_control(2, rng)
        Z = rng.normal(size=(10, 50, 2))
        before = U.at(20, Z[:, 20])
        Z[:, 21:] += 100.0
        np.testing.assert_array_equal(U.at(20, Z[:, 20]), before)

    def test_table_must_be_finite(self):
        with pytest.raises(ValueError):
            AdaptedControl("deterministic", 1, table=np.array([np.nan]))

    def test_parse_const(self):
        U = parse_control("const:1.0,2", 2)
        assert U.deterministic
        np.testing.assert_array_equal(U.table, [1.0, 2.0])

    def test_parse_zero(self):
        np.testing.assert_array_equal(parse_control("zero", 3).table, 0.0)

    def test_parse_feedback_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"kind": "feedback", "theta": [[0, 1, 0]], "clip": 2.0}))
        U = parse_control(f"feedback:{p}", 1)
        assert not U.deterministic and U.clip == 2.0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            control_from_dict({"kind": "const", "value": [1.0, 2.0]}, 1)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            parse_control("bang:1", 1)

    def test_roundtrip(self):
        U = feedback_control(np.ones((1, 3)), clip=3.0)
        V = control_from_dict(U.to_dict(), 1)
        np.testing.assert_array_equal(U.theta, V.theta)


class TestBackwardOde:
    def test_zero_control_constant_terminal(self, m2):
        sol = solve_backward_ode(m2, zero_control(1), 3.0, GRID)
        np.testing.assert_allclose(sol.Y0, 3.0, rtol=1e-12)
        np.testing.assert_array_equal(sol.Y[-1], 3.0)
        np.testing.assert_array_equal(sol.V, 0.0)

    def test_two_state_closed_form(self, m1):
        # closed form against quadrature of e^{At} H
        quad = np.array(
            [integrate.quad(lambda t, i=i: (matrix_exponential(m1.A, t) @ m1.H[:, 0])[i], 0, 1)[0] for i in range(2)]
        )
        exact = matrix_exponential(m1.A, 1.0) @ np.ones(2) + quad
        np.testing.assert_allclose(exact, m1_closed_form(), rtol=1e-10)
        sol = solve_backward_ode(m1, constant_control([1.0]), 1.0, GRID)
        assert np.max(np.abs(sol.Y0 - exact)) < 10 * GRID.dt

    def test_terminal_function(self, m2):
        f = np.array([1.0, -2.0, 0.5])
        sol = solve_backward_ode(m2, zero_control(1), f, GRID)
        assert np.max(np.abs(sol.Y0 - matrix_exponential(m2.A, 1.0) @ f)) < 10 * GRID.dt

    def test_rejects_feedback(self, m1):
        with pytest.raises(ValueError):
            solve_backward_ode(m1, feedback_control(np.ones((1, 3))), 1.0, GRID)


class TestLsmc:
    def test_deterministic_control_collapses(self, m1):
        U = constant_control([1.0])
        sol = solve_bsde_lsmc(m1, U, 1.0, GRID, 2000, seed=1)
        ode = solve_backward_ode(m1, U, 1.0, GRID)
        assert np.all(np.abs(sol.Y0 - ode.Y0) <= 3 * sol.Y0_std_err + 1e-12)
        assert np.all(np.abs(sol.V_bar) <= 3 * sol.V_bar_std_err + 1e-12)
        np.testing.assert_array_equal(sol.Y[-1], [1.0, 1.0])

    def test_zero_control(self, m2):
        sol = solve_bsde_lsmc(m2, zero_control(1), 2.0, GRID, 2000, seed=1)
        assert np.all(np.abs(sol.Y0 - 2.0) <= 3 * sol.Y0_std_err + 1e-12)

    def test_feedback_matches_forward(self, m1):
        U = feedback_control([[0.0, 1.0, 0.0]])
        lsmc = solve_bsde_lsmc(m1, U, 1.0, GRID, 5000, seed=2)
        fwd = y0_forward_representation(m1, U, 1.0, GRID, 5000, seed=3)
        se = np.hypot(lsmc.Y0_std_err, fwd.std_err)
        assert np.all(np.abs(lsmc.Y0 - fwd.Y0) < 3 * se)

    def test_needs_batches(self, m1):
        with pytest.raises(ValueError):
            solve_bsde_lsmc(m1, zero_control(1), 1.0, GRID, 5, seed=0)


class TestForwardRepresentation:
    def test_zero_control_unit_terminal(self, m2):
        est = y0_forward_representation(m2, zero_control(1), 1.0, GRID, 4000, seed=5)
        assert np.all(np.abs(est.Y0 - 1.0) < 3 * est.std_err)

    def test_zero_everything(self, m2):
        est = y0_forward_representation(m2, zero_control(1), 0.0, GRID, 100, seed=5)
        np.testing.assert_array_equal(est.Y0, 0.0)

    def test_deterministic_matches_ode(self, m1):
        U = constant_control([0.7])
        est = y0_forward_representation(m1, U, 1.0, GRID, 4000, seed=6)
        ode = solve_backward_ode(m1, U, 1.0, GRID)
        assert np.all(np.abs(est.Y0 - ode.Y0) < 3 * est.std_err)


class TestAdjointIdentity:
    def test_zero_control(self, m1):
        chk = verify_adjoint_identity(m1, [0.3, 0.7], zero_control(1), 2.0, GRID, 2000, seed=1)
        assert chk.lhs == pytest.approx(2.0) and chk.rhs == pytest.approx(2.0)
        assert chk.residual < 1e-12

    def test_unobservable_direction_pairs_to_zero(self, m2):
        v = unobservable_directions(m2).basis[0]
        U = feedback_control([[0.3, 1.0, -0.5]])
        chk = verify_adjoint_identity(m2, v, U, 0.0, GRID, 2000, seed=2)
        assert abs(chk.rhs) < 3 * chk.rhs_std_err + 1e-10
        assert abs(chk.lhs) < 3 * chk.lhs_std_err + 1e-10

    def test_feedback_control_two_state(self, m1):
        U = feedback_control([[0.5, -1.0, 0.2]])
        chk = verify_adjoint_identity(m1, [0.2, 0.8], U, 1.0, GRID, 5000, seed=4)
        assert chk.residual < 3 * chk.std_err

    def test_to_dict_keys(self, m1):
        chk = verify_adjoint_identity(m1, [1, 0], zero_control(1), 1.0, TimeGrid(0.1, 1e-2), 10, seed=0)
        assert set(chk.to_dict()) == {"lhs", "rhs", "residual", "std_err", "n_paths", "dt"}


class TestReachableSpan:
    def test_two_state_full(self, m1):
        est = empirical_reachable_span(m1, 8, GRID, 4000, seed=0)
        assert est.rank == 2

    def test_m2_matches_closure(self, m2):
        est = empirical_reachable_span(m2, 12, GRID, 4000, seed=1)
        C = nonlinear_closure(m2)
        assert est.rank == 2
        assert est.subspace.distance(C) < 5 * est.angle_floor

    def test_null_pairing(self, m2):
        est = empirical_reachable_span(m2, 6, GRID, 2000, seed=2)
        v = unobservable_directions(m2).basis[0]
        pairing = est.Y0 @ v
        assert np.all(np.abs(pairing) < 3 * np.sqrt(np.mean(est.std_err**2, axis=1)) * est.noise_floor)

    def test_deterministic_controls_zero_generator(self, m4):
        # with A = 0 and constant controls, Y0 = c 1 + (int U dt) h
        est = empirical_reachable_span(m4, 8, GRID, 4000, seed=0, deterministic=True)
        assert est.rank == 2
        assert est.subspace.contains(np.ones(3) / math.sqrt(3), atol=0.05)

    def test_needs_enough_controls(self, m2):
        with pytest.raises(ValueError):
            empirical_reachable_span(m2, 2, GRID, 100, seed=0)


class TestEstimator:
    def test_zero_control_prior_variance(self, m1):
        f = np.array([2.0, -1.0])
        mu = np.array([0.9, 0.1])
        res = estimator_terminal(m1, mu, zero_control(1), f, GRID, 10_000, seed=3)
        law = mu @ matrix_exponential(m1.A, 1.0)
        var = law @ f**2 - (law @ f) ** 2
        assert np.max(np.abs(res.S_T - law @ f)) < 10 * GRID.dt
        assert abs(res.mse - var) < 3 * res.mse_std_err

    def test_single_state(self):
        model = validate_model([[0.0]], [[1.0]])
        res = estimator_terminal(model, [1.0], zero_control(1), [4.0], GRID, 200, seed=0)
        np.testing.assert_allclose(res.S_T, 4.0)
        assert res.mse == pytest.approx(0.0, abs=1e-20)

    def test_family_contains_zero_control(self, m1):
        f = m1.H[:, 0]
        mu = [0.5, 0.5]
        grid = TimeGrid(1.0, 1e-2)
        base = estimator_terminal(m1, mu, zero_control(1), f, grid, 4000, seed=1)
        rng = np.random.default_rng(0)
        family = [random_feedback_control(1, rng, scale=0.1) for _ in range(20)]
        mses = [estimator_terminal(m1, mu, U, f, grid, 4000, seed=1).mse for U in family]
        assert min(mses) <= base.mse + 3 * base.mse_std_err
