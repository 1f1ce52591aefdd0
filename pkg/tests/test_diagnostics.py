import numpy as np
import pytest

from dualscope import TimeGrid, analyze, validate_model
from dualscope.diagnostics import (
    EPS_ENTROPY,
    DistinguishConfig,
    distinguish,
    in_unobservable_span,
    o3_experiment,
    perturb_along,
    relative_entropy_estimate,
)

from conftest import NAMED, named_model, random_model

M2_MU = np.array([0.5, 0.3, 0.2])
M2_NU = np.array([0.7, 0.1, 0.2])
M1_MU = np.array([0.9, 0.1])
M1_NU = np.array([0.5, 0.5])
FINE = TimeGrid(1.0, 1e-4)


class TestO3:
    def test_equal_priors(self, m1):
        res = o3_experiment(m1, M1_MU, M1_MU, TimeGrid(1, 1e-3), 20, seed=0)
        np.testing.assert_array_equal(res.sup_discrepancy, 0.0)

    def test_unobservable_pair(self, m2):
        np.testing.assert_allclose(M2_NU - M2_MU, 0.2 * np.array([1, -1, 0]), atol=1e-15)
        res = o3_experiment(m2, M2_MU, M2_NU, FINE, 100, seed=1)
        assert res.sup_discrepancy[0] < 1e-2
        assert res.trace.shape == (FINE.n_steps + 1, 1)

    def test_observable_pair_starts_apart(self, m1):
        res = o3_experiment(m1, M1_MU, M1_NU, TimeGrid(1, 1e-3), 20, seed=2)
        # pi_0 of h is 0.8 versus 0.0
        assert res.trace[0, 0] == pytest.approx(0.8)
        assert res.sup_discrepancy[0] > 0.1

    def test_unobservable_gap_stays_at_rounding_level(self, m2):
        coarse = o3_experiment(m2, M2_MU, M2_NU, TimeGrid(1, 1e-3), 50, seed=3)
        fine = o3_experiment(m2, M2_MU, M2_NU, FINE, 50, seed=3)
        # the discrete filters agree exactly up to rounding at both step sizes
        assert coarse.sup_discrepancy[0] < 1e-12 and fine.sup_discrepancy[0] < 1e-12


class TestRelativeEntropy:
    def test_equal_priors_exactly_zero(self, m2):
        est = relative_entropy_estimate(m2, M2_MU, M2_MU, TimeGrid(1, 1e-3), 20, seed=0)
        assert est.estimate == 0.0

    def test_unobservable_pair(self, m2):
        est = relative_entropy_estimate(m2, M2_MU, M2_NU, FINE, 100, seed=1)
        assert est.estimate < 1e-4

    def test_observable_pair(self, m1):
        est = relative_entropy_estimate(m1, M1_MU, M1_NU, FINE, 100, seed=2)
        # one-sided 99% lower bound
        assert est.estimate - 2.326 * est.std_err > 0.01

    def test_nonnegative(self, m1):
        est = relative_entropy_estimate(m1, [0.6, 0.4], [0.5, 0.5], TimeGrid(1, 1e-3), 50, seed=4)
        assert est.estimate >= -3 * est.std_err

    def test_longer_horizon_does_not_lose_information(self, m1):
        short = relative_entropy_estimate(m1, M1_MU, M1_NU, TimeGrid(1, 1e-3), 200, seed=5)
        long = relative_entropy_estimate(m1, M1_MU, M1_NU, TimeGrid(2, 1e-3), 200, seed=5)
        assert long.estimate >= short.estimate - 3 * np.hypot(short.std_err, long.std_err)


class TestPerturbAlong:
    def test_margin_respected(self):
        nu = perturb_along([0.5, 0.3, 0.2], [1, -1, 0])
        assert nu.min() == pytest.approx(0.05)
        assert nu.sum() == pytest.approx(1.0)
        # |eps| = 0.45 downwards beats 0.25 upwards
        np.testing.assert_allclose(nu, [0.05, 0.75, 0.2])

    def test_rejects_mass_change(self):
        with pytest.raises(ValueError):
            perturb_along([0.5, 0.5], [1, 1])

    def test_rejects_prior_outside_margin(self):
        with pytest.raises(ValueError):
            perturb_along([0.99, 0.01], [1, -1])


class TestDistinguish:
    def test_m2_pair(self, m2):
        res = distinguish(m2, M2_MU, M2_NU)
        assert res.verdict == "indistinguishable" and res.consistent
        assert res.expected == "indistinguishable"

    def test_m1_pair(self, m1):
        res = distinguish(m1, M1_MU, M1_NU)
        assert res.verdict == "distinguishable" and res.consistent

    @pytest.mark.parametrize("name", sorted(NAMED))
    def test_equal_priors(self, name):
        model = named_model(name)
        mu = np.full(model.d, 1 / model.d)
        res = distinguish(model, mu, mu, DistinguishConfig(dt=1e-3, n_paths=20))
        assert res.verdict == "indistinguishable"

    def test_records_thresholds(self, m1):
        res = distinguish(m1, M1_MU, M1_NU, DistinguishConfig(dt=1e-3, n_paths=20))
        out = res.to_dict()
        assert out["thresholds"]["eps_entropy"] == 1e-3 and out["thresholds"]["eps_sup"] == 1e-2
        assert out["budgets"]["n_paths"] == 20

    def test_flags_contradiction(self, m2):
        # a threshold no Euler run can meet forces a disagreement with the algebra
        res = distinguish(m2, M2_MU, M2_NU, DistinguishConfig(dt=1e-3, n_paths=10, eps_sup=-1.0))
        assert not res.consistent and "contradicts" in res.warning

    def test_algebraic_prediction(self, m2, m1):
        assert in_unobservable_span(m2, M2_MU, M2_NU)
        assert not in_unobservable_span(m1, M1_MU, M1_NU)

    def test_fast_mixing_pair_is_below_resolution(self):
        """Observable and ||mu - nu||_1 = 0.2, yet the information content is
        below eps_entropy: the verdict can only be inconclusive."""
        fast = validate_model(50 * np.array([[-1.0, 1.0], [1.0, -1.0]]), [[1.0], [-1.0]])
        res = distinguish(fast, [0.6, 0.4], [0.5, 0.5])
        assert analyze(fast).observable
        assert res.entropy.estimate < EPS_ENTROPY
        assert res.verdict == "inconclusive" and res.consistent


def _random_pairs(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        d, m = int(rng.integers(2, 6)), int(rng.integers(1, 3))
        model = random_model(rng, d, m)
        report = analyze(model)
        mu = 0.05 + (1 - 0.05 * d) * rng.dirichlet(np.ones(d))
        if report.unobservable_basis.dim:
            nu = perturb_along(mu, report.unobservable_basis.basis[0])
        else:
            nu = rng.dirichlet(np.ones(d))
            while np.abs(mu - nu).sum() <= 0.1:
                nu = rng.dirichlet(np.ones(d))
        out.append((i, model, report, mu, nu))
    return out


@pytest.fixture(scope="module")
def runs():
    res = []
    for i, model, report, mu, nu in _random_pairs(50, 2024):
        r = distinguish(model, mu, nu, DistinguishConfig(dt=1e-3, n_paths=100, seed=i))
        res.append((model, report, mu, nu, r))
    return res


@pytest.mark.slow
class TestThm1Consistency:
    """Fifty random models with d <= 5 at dt = 1e-3."""

    def test_unobservable_pairs_indistinguishable(self, runs):
        checked = 0
        for model, report, mu, nu, r in runs:
            if in_unobservable_span(model, mu, nu):
                assert r.verdict == "indistinguishable"
                checked += 1
        assert checked > 0

    def test_observable_pairs_never_indistinguishable(self, runs):
        for model, report, mu, nu, r in runs:
            if report.observable:
                assert r.verdict != "indistinguishable"
                assert r.consistent

    def test_observable_pairs_with_visible_gap_distinguishable(self, runs):
        checked = 0
        for model, report, mu, nu, r in runs:
            if report.observable and np.linalg.norm((mu - nu) @ model.H) >= 0.1:
                assert r.verdict == "distinguishable"
                checked += 1
        assert checked > 10
