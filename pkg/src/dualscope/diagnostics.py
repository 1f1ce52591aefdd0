"""Behavioural distinguishability of two priors.

Two Wonham filters, one started from ``mu`` and one from ``nu``, are run on
the same observation paths drawn under the ``mu`` law. If the filters'
estimates of ``h`` agree along every path the priors cannot be told apart
from the observations; the expected integrated squared gap between the
estimates is the relative entropy of the two observation laws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .filtering import propagate_zakai
from .model import DEFAULT_RANK_TOL, Model, ProbabilityMeasure, as_weights
from .observability import unobservable_directions
from .simulate import TimeGrid, simulate_physical

EPS_ENTROPY = 1e-3
EPS_SUP = 1e-2
PRIOR_MARGIN = 0.05


@dataclass(frozen=True)
class DistinguishConfig:
    T: float = 1.0
    dt: float = 1e-4
    n_paths: int = 100
    seed: int = 0
    eps_entropy: float = EPS_ENTROPY
    eps_sup: float = EPS_SUP
    tol: float = DEFAULT_RANK_TOL
    threads: int = 0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.dt)


@dataclass(frozen=True, eq=False)
class O3Result:
    sup_discrepancy: np.ndarray  # (m,)
    trace: np.ndarray  # (n+1, m) path-averaged |pi^mu(h) - pi^nu(h)|
    n_paths: int


@dataclass(frozen=True, eq=False)
class EntropyEstimate:
    estimate: float
    std_err: float
    n_paths: int


@dataclass(frozen=True, eq=False)
class DistinguishabilityResult:
    sup_discrepancy: np.ndarray
    entropy: EntropyEstimate
    verdict: str
    expected: str
    consistent: bool
    warning: str
    thresholds: dict
    budgets: dict
    trace: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "sup_discrepancy": self.sup_discrepancy.tolist(),
            "entropy": {"estimate": self.entropy.estimate, "std_err": self.entropy.std_err},
            "verdict": self.verdict,
            "expected": self.expected,
            "consistent": self.consistent,
            "warning": self.warning,
            "thresholds": self.thresholds,
            "budgets": self.budgets,
        }


def _paired_gaps(model, mu, nu, grid, n_paths, seed, threads):
    """``|pi^mu_k(h) - pi^nu_k(h)|`` per path, step and channel: ``(P, n+1, m)``."""
    ProbabilityMeasure(mu)
    ProbabilityMeasure(nu)

    def run(start, count):
        b = simulate_physical(model, mu, grid, seed, count, start)
        pm = propagate_zakai(model, mu, b.dZ, grid, signed=False).pi
        pn = propagate_zakai(model, nu, b.dZ, grid, signed=False).pi
        return np.abs((pm - pn) @ model.H)

    return np.concatenate(streams.map_batches(run, n_paths, threads or None), axis=0)


def _o3_from_gaps(gaps) -> O3Result:
    return O3Result(gaps.max(axis=(0, 1)), gaps.mean(axis=0), gaps.shape[0])


def _entropy_from_gaps(gaps, dt) -> EntropyEstimate:
    per_path = (gaps[:, :-1] ** 2).sum(axis=(1, 2)) * dt
    n = per_path.size
    se = float(per_path.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return EntropyEstimate(float(per_path.mean()), se, n)


def o3_experiment(model: Model, mu, nu, grid: TimeGrid, n_paths: int, seed: int, threads=None) -> O3Result:
    """Sup over grid and paths of the gap between the two filters' estimates of ``h``."""
    mu, nu = as_weights(mu, model.d), as_weights(nu, model.d)
    return _o3_from_gaps(_paired_gaps(model, mu, nu, grid, n_paths, seed, threads))


def relative_entropy_estimate(
    model: Model, mu, nu, grid: TimeGrid, n_paths: int, seed: int, threads=None
) -> EntropyEstimate:
    """Monte Carlo ``E^mu sum_k |pi^mu_k(h) - pi^nu_k(h)|^2 dt``."""
    mu, nu = as_weights(mu, model.d), as_weights(nu, model.d)
    return _entropy_from_gaps(_paired_gaps(model, mu, nu, grid, n_paths, seed, threads), grid.dt)


def in_unobservable_span(model: Model, mu, nu, tol: float = DEFAULT_RANK_TOL) -> bool:
    diff = as_weights(nu, model.d) - as_weights(mu, model.d)
    unobs = unobservable_directions(model, tol)
    return unobs.residual(diff) < tol * max(1.0, float(np.linalg.norm(diff)))


def perturb_along(mu, direction, margin: float = PRIOR_MARGIN) -> np.ndarray:
    """``mu + eps * direction`` with the largest ``|eps|`` keeping every entry >= margin.

    ``direction`` must sum to zero so the result stays a probability vector.
    """
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(direction, dtype=float)
    if np.any(mu < margin):
        raise ValueError("mu must already satisfy the margin")
    if abs(v.sum()) > 1e-9 * max(1.0, np.abs(v).max()):
        raise ValueError("direction must have zero total mass")

    def reach(sign):
        w = sign * v
        neg = w < 0
        if not neg.any():
            return math.inf
        return float(np.min((mu[neg] - margin) / -w[neg]))

    up, down = reach(1.0), reach(-1.0)
    eps = up if up >= down else -down
    if not math.isfinite(eps):
        raise ValueError("direction is zero")
    nu = mu + eps * v
    nu[np.abs(nu - margin) < 1e-15] = margin
    return nu


def distinguish(model: Model, mu, nu, config: DistinguishConfig = DistinguishConfig()) -> DistinguishabilityResult:
    """Run both behavioural experiments and compare with the algebraic prediction.

    Verdict: ``indistinguishable`` when the entropy estimate is below
    ``eps_entropy`` and the sup gap below ``eps_sup``; ``distinguishable``
    when the entropy estimate exceeds ``eps_entropy`` by three standard
    errors; otherwise ``inconclusive``. The algebraic prediction is
    ``indistinguishable`` exactly when ``nu - mu`` lies in the unobservable
    subspace.
    """
    mu, nu = as_weights(mu, model.d), as_weights(nu, model.d)
    grid = config.grid
    gaps = _paired_gaps(model, mu, nu, grid, config.n_paths, config.seed, config.threads)
    o3 = _o3_from_gaps(gaps)
    ent = _entropy_from_gaps(gaps, grid.dt)

    if ent.estimate < config.eps_entropy and np.all(o3.sup_discrepancy < config.eps_sup):
        verdict = "indistinguishable"
    elif ent.estimate - 3 * ent.std_err > config.eps_entropy:
        verdict = "distinguishable"
    else:
        verdict = "inconclusive"

    expected = "indistinguishable" if in_unobservable_span(model, mu, nu, config.tol) else "distinguishable"
    if expected == "indistinguishable":
        consistent = verdict == "indistinguishable"
    else:
        consistent = verdict != "indistinguishable"
    warning = "" if consistent else (
        f"behavioural verdict '{verdict}' contradicts algebraic prediction '{expected}'"
    )
    thresholds = {"eps_entropy": config.eps_entropy, "eps_sup": config.eps_sup, "tol": config.tol}
    budgets = {"n_paths": config.n_paths, "T": grid.T, "dt": grid.dt, "seed": config.seed}
    return DistinguishabilityResult(
        o3.sup_discrepancy, ent, verdict, expected, consistent, warning, thresholds, budgets, o3.trace
    )
