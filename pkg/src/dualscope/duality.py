"""Dual backward equation, adjoint identity and reachable-span experiments.

The dual equation for a finite-state model is the vector BSDE

    -dY = (A Y + H U + diag(H V^T)) dt - V dZ,    Y_T = terminal,

driven by a control ``U`` adapted to the observations. Its time-0 value
``Y_0`` paired with a signed measure equals the expected control/filter
inner product computed from the Zakai equation; the routines here check
that numerically from both sides.

Controls are evaluated at grid step ``k`` from ``Z_{t_k}`` only, so every
control built here is adapted by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import streams
from .errors import NumericalOverflow, SingularRegression
from .filtering import PHI_LIMIT, zakai_step
from .model import DEFAULT_RANK_TOL, Model, Subspace, as_weights
from .simulate import TimeGrid, sample_reference_brownian, simulate_physical

DEFAULT_CLIP = 5.0
RIDGE_SCALE = 1e-6
MAX_GRAM_COND = 1e12
SPAN_NOISE_FACTOR = 1.5


def feature_count(m: int) -> int:
    return 1 + m + m * (m + 1) // 2


def features(Z) -> np.ndarray:
    """Regression/feedback library ``[1, Z_i, Z_i Z_j (i <= j)]`` along the last axis."""
    Z = np.asarray(Z, dtype=float)
    m = Z.shape[-1]
    iu, ju = np.triu_indices(m)
    quad = Z[..., iu] * Z[..., ju]
    return np.concatenate([np.ones(Z.shape[:-1] + (1,)), Z, quad], axis=-1)


@dataclass(frozen=True, eq=False)
class AdaptedControl:
    """Control rule evaluated on a grid.

    ``kind == "deterministic"``: ``table`` is an m-vector (constant in time)
    or an ``(n_steps, m)`` array. ``kind == "feedback"``: ``theta`` is
    ``(m, p)`` or ``(n_steps, m, p)`` and ``U_k = theta_k @ features(clip(Z_k))``.
    """

    kind: str
    m: int
    table: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    clip: float = DEFAULT_CLIP
    description: str = ""

    def __post_init__(self):
        if self.kind == "deterministic":
            t = np.asarray(self.table, dtype=float)
            if t.shape[-1] != self.m or t.ndim not in (1, 2) or not np.all(np.isfinite(t)):
                raise ValueError(f"control table must be finite with last axis {self.m}")
            object.__setattr__(self, "table", t)
        elif self.kind == "feedback":
            th = np.asarray(self.theta, dtype=float)
            p = feature_count(self.m)
            if th.shape[-2:] != (self.m, p) or th.ndim not in (2, 3) or not np.all(np.isfinite(th)):
                raise ValueError(f"feedback theta must have trailing shape ({self.m}, {p})")
            object.__setattr__(self, "theta", th)
        else:
            raise ValueError(f"unknown control kind {self.kind!r}")

    @property
    def deterministic(self) -> bool:
        return self.kind == "deterministic"

    def at(self, k: int, Z_k) -> np.ndarray:
        """Control values at step ``k`` for observation values ``Z_k`` of shape ``(P, m)``."""
        Z_k = np.asarray(Z_k, dtype=float)
        P = Z_k.shape[0]
        if self.deterministic:
            row = self.table if self.table.ndim == 1 else self.table[k]
            return np.broadcast_to(row, (P, self.m))
        th = self.theta if self.theta.ndim == 2 else self.theta[k]
        phi = features(np.clip(Z_k, -self.clip, self.clip))
        return phi @ th.T

    def table_for(self, grid: TimeGrid) -> np.ndarray:
        if not self.deterministic:
            raise ValueError("only deterministic controls have a time table")
        if self.table.ndim == 1:
            return np.broadcast_to(self.table, (grid.n_steps, self.m))
        if self.table.shape[0] != grid.n_steps:
            raise ValueError(f"control table has {self.table.shape[0]} rows, grid has {grid.n_steps} steps")
        return self.table

    def to_dict(self) -> dict:
        if self.deterministic:
            return {"kind": "const" if self.table.ndim == 1 else "table", "value": self.table.tolist()}
        return {"kind": "feedback", "theta": self.theta.tolist(), "clip": self.clip}


def zero_control(m: int) -> AdaptedControl:
    return AdaptedControl("deterministic", m, table=np.zeros(m), description="zero")


def constant_control(value) -> AdaptedControl:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return AdaptedControl("deterministic", v.size, table=v, description=f"const {v.tolist()}")


def feedback_control(theta, clip: float = DEFAULT_CLIP) -> AdaptedControl:
    th = np.asarray(theta, dtype=float)
    return AdaptedControl("feedback", th.shape[-2], theta=th, clip=clip, description="feedback")


def random_feedback_control(m: int, rng: np.random.Generator, scale: float = 1.0, clip: float = DEFAULT_CLIP):
    theta = scale * rng.standard_normal((m, feature_count(m)))
    return feedback_control(theta, clip)


def control_from_dict(raw: dict, m: int) -> AdaptedControl:
    kind = raw.get("kind")
    if kind == "const":
        ctrl = constant_control(raw["value"])
    elif kind == "table":
        ctrl = AdaptedControl("deterministic", m, table=np.asarray(raw["value"], dtype=float))
    elif kind == "zero":
        ctrl = zero_control(m)
    elif kind == "feedback":
        ctrl = feedback_control(raw["theta"], float(raw.get("clip", DEFAULT_CLIP)))
    else:
        raise ValueError(f"unknown control kind {kind!r}")
    if ctrl.m != m:
        raise ValueError(f"control has {ctrl.m} channels, model has {m}")
    return ctrl


def parse_control(spec: str, m: int) -> AdaptedControl:
    """Parse ``const:v1,v2``, ``zero`` or ``feedback:<json file>``."""
    head, _, rest = spec.partition(":")
    if head == "const":
        return control_from_dict({"kind": "const", "value": [float(x) for x in rest.split(",")]}, m)
    if head == "zero":
        return zero_control(m)
    if head == "feedback":
        with open(Path(rest)) as fh:
            raw = json.load(fh)
        raw.setdefault("kind", "feedback")
        return control_from_dict(raw, m)
    raise ValueError(f"cannot parse control spec {spec!r}")


def _terminal_vector(terminal, d: int) -> np.ndarray:
    t = np.asarray(terminal, dtype=float)
    if t.ndim == 0:
        return float(t) * np.ones(d)
    if t.shape != (d,):
        raise ValueError(f"terminal must be a scalar or length-{d} vector")
    return t


@dataclass(frozen=True, eq=False)
class BSDESolution:
    """Solution summary of the dual backward equation.

    ``Y`` is ``(n+1, d)`` and ``V`` is ``(n, d, m)``; for Monte Carlo
    solvers these are cross-path means. ``V_bar`` is the path-averaged
    time integral of ``V`` with its standard error.
    """

    grid: TimeGrid
    Y: np.ndarray
    V: np.ndarray
    Y0: np.ndarray
    terminal: np.ndarray
    Y0_std_err: np.ndarray
    V_bar: np.ndarray
    V_bar_std_err: np.ndarray
    n_paths: int = 0
    batch_Y0: np.ndarray = field(default=None, repr=False)


def solve_backward_ode(model: Model, U: AdaptedControl, terminal, grid: TimeGrid) -> BSDESolution:
    """Explicit Euler for ``-dY/dt = A Y + H U_t`` backwards from ``Y_T``.

    With a deterministic control the martingale part vanishes, so this is
    the exact BSDE solution up to time discretization.
    """
    f = _terminal_vector(terminal, model.d)
    table = U.table_for(grid)
    n, dt = grid.n_steps, grid.dt
    Y = np.empty((n + 1, model.d))
    Y[n] = f
    for k in range(n - 1, -1, -1):
        Y[k] = Y[k + 1] + dt * (model.A @ Y[k + 1] + model.H @ table[k])
    zeros_dm = np.zeros((model.d, model.m))
    return BSDESolution(
        grid, Y, np.zeros((n, model.d, model.m)), Y[0].copy(), f,
        np.zeros(model.d), zeros_dm, zeros_dm.copy(),
    )


class _BatchedRidge:
    """Ridge regressions sharing one design per batch; ``F`` has shape ``(B, P, p)``.

    Non-constant feature columns are standardized per batch; zero-variance
    columns (every feature at ``t = 0``) are dropped. The ridge penalty
    applies to the standardized columns only, never to the intercept.
    """

    def __init__(self, F, ridge_scale):
        B, P, _ = F.shape
        rest = F[..., 1:]
        mean = rest.mean(axis=1, keepdims=True)
        sd = rest.std(axis=1, keepdims=True)
        keep = np.all(sd[:, 0] > 1e-12 * np.maximum(1.0, np.abs(mean[:, 0])), axis=0)
        cols = (rest[..., keep] - mean[..., keep]) / sd[..., keep]
        self.X = np.concatenate([np.ones((B, P, 1)), cols], axis=2)
        q = self.X.shape[2]
        G = np.matmul(self.X.transpose(0, 2, 1), self.X)
        lam = ridge_scale * np.trace(G, axis1=1, axis2=2) / q
        # the intercept is left unpenalized; with centered columns it is the plain mean
        pen = np.eye(q)
        pen[0, 0] = 0.0
        G += lam[:, None, None] * pen
        ev = np.linalg.eigvalsh(G)
        if np.any(ev[:, -1] > MAX_GRAM_COND * ev[:, 0]):
            raise SingularRegression("feature Gram matrix is singular; raise the ridge or trim features")
        self.G = G

    def fit(self, targets):
        """Fitted values for ``targets`` of shape ``(B, P, r)``."""
        coef = np.linalg.solve(self.G, np.matmul(self.X.transpose(0, 2, 1), targets))
        return np.matmul(self.X, coef)


def _lsmc_backward(model, U, f, grid, Z, dZ, ridge_scale):
    """Backward LSMC recursion on batched paths ``Z: (B, P, n+1, m)``.

    Returns per-batch cross-path means ``Y: (B, n+1, d)`` and ``V: (B, n, d, m)``.
    """
    B, P = Z.shape[:2]
    n, dt = grid.n_steps, grid.dt
    d, m = model.d, model.m
    A, H = model.A, model.H
    y = np.broadcast_to(f, (B, P, d)).copy()
    Ymean = np.empty((B, n + 1, d))
    Vmean = np.empty((B, n, d, m))
    Ymean[:, n] = f
    for k in range(n - 1, -1, -1):
        Zk = Z[:, :, k]
        reg = _BatchedRidge(features(Zk), ridge_scale)
        yhat = reg.fit(y)
        # subtracting the F_k-measurable fit leaves E[. dZ | F_k] unchanged
        resid = y - yhat
        target = (resid[..., None] * dZ[:, :, k, None, :]).reshape(B, P, d * m) / dt
        V = reg.fit(target).reshape(B, P, d, m)
        Uk = U.at(k, Zk.reshape(B * P, m)).reshape(B, P, m)
        y = yhat + dt * (yhat @ A.T + Uk @ H.T + (V * H).sum(axis=3))
        Ymean[:, k] = y.mean(axis=1)
        Vmean[:, k] = V.mean(axis=1)
    return Ymean, Vmean


def _mean_and_se(samples):
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full_like(mean, np.inf)
    return mean, se


def solve_bsde_lsmc(
    model: Model,
    U: AdaptedControl,
    terminal,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    ridge: float = RIDGE_SCALE,
    n_batches: int = 10,
    threads=None,
) -> BSDESolution:
    """Least-squares Monte Carlo solution of the dual BSDE on reference paths.

    Backward recursion:
    ``V_k = E[Y_{k+1} dZ_k^T | F_k] / dt`` and
    ``Y_k = E[Y_{k+1} + dt (A Y_{k+1} + H U_k + diag(H V_k^T)) | F_k]``,
    with conditional expectations replaced by ridge regressions on
    ``features(Z_k)``. Paths are split into ``n_batches`` equal, independent
    batches (a remainder of ``n_paths % n_batches`` paths is not used);
    ``Y0`` is the mean of the batch estimates and ``Y0_std_err`` their
    standard error, so regression noise is part of the error bar.
    """
    f = _terminal_vector(terminal, model.d)
    per = n_paths // n_batches
    if per < 2 or n_batches < 2:
        raise ValueError("need at least 2 batches of 2 paths")

    def gen(start, count):
        return sample_reference_brownian(grid, model.m, seed, count, start, streams.LSMC)

    parts = streams.map_batches(gen, per * n_batches, threads, batch_size=per)
    Z = np.stack([p[0] for p in parts])
    dZ = np.stack([p[1] for p in parts])
    Ys, Vs = _lsmc_backward(model, U, f, grid, Z, dZ, ridge)
    V_bars = Vs.sum(axis=1) * grid.dt
    Y0, Y0_se = _mean_and_se(Ys[:, 0])
    V_bar, V_bar_se = _mean_and_se(V_bars)
    return BSDESolution(
        grid, Ys.mean(axis=0), Vs.mean(axis=0), Y0, f, Y0_se, V_bar, V_bar_se,
        per * n_batches, Ys[:, 0],
    )


def _stacked_controls(controls):
    """Evaluator returning all controls at step ``k`` as ``(P, J, m)``."""
    if all(not U.deterministic and U.theta.ndim == 2 for U in controls) and len(
        {U.clip for U in controls}
    ) == 1:
        theta = np.stack([U.theta for U in controls])  # (J, m, p)
        clip = controls[0].clip

        def at(k, Zk):
            phi = features(np.clip(Zk, -clip, clip))
            return np.tensordot(phi, theta, axes=([1], [2]))

        return at
    return lambda k, Zk: np.stack([U.at(k, Zk) for U in controls], axis=1)


def _forward_samples(model, controls, terminals, Z, dZ, dt):
    """Per-path ``Phi_T^T f_j + sum_k dt Phi_k^T H U_k^(j)`` for several controls.

    Propagates ``Psi = Phi^T`` directly, whose Euler step
    ``Psi + dt Psi A + Psi diag(H dZ)`` is a single flat matrix product.
    Returns shape ``(P, J, d)``.
    """
    P, n, _ = dZ.shape
    d = model.d
    A, H = model.A, model.H
    at = _stacked_controls(controls)
    acc = np.zeros((P, d, len(controls)))
    Psi = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    for k in range(n):
        g = at(k, Z[:, k]) @ H.T  # (P, J, d)
        for j in range(d):
            acc += dt * Psi[:, :, j, None] * g[:, None, :, j]
        Psi = Psi + dt * (Psi.reshape(P * d, d) @ A).reshape(P, d, d) + Psi * (dZ[:, k] @ H.T)[:, None, :]
        if np.abs(Psi).max() >= PHI_LIMIT or not np.all(np.isfinite(Psi)):
            raise NumericalOverflow(f"fundamental matrix overflow at step {k + 1}")
    acc += np.matmul(Psi, np.array(terminals).T)
    return acc.transpose(0, 2, 1)


@dataclass(frozen=True, eq=False)
class Y0Estimate:
    Y0: np.ndarray
    std_err: np.ndarray
    n_paths: int


def _forward_estimate(model, controls, terminals, grid, n_paths, seed, threads):
    def run(start, count):
        Z, dZ = sample_reference_brownian(grid, model.m, seed, count, start, streams.REFERENCE)
        return _forward_samples(model, controls, terminals, Z, dZ, grid.dt)

    samples = np.concatenate(streams.map_batches(run, n_paths, threads), axis=0)
    return _mean_and_se(samples)


def y0_forward_representation(
    model: Model, U: AdaptedControl, terminal, grid: TimeGrid, n_paths: int, seed: int, threads=None
) -> Y0Estimate:
    """``Y_0`` from the forward side: ``Y0_i = E~[(Phi_T^T f)_i + sum_k dt (Phi_k^T H U_k)_i]``.

    Pairing ``Y_0`` with the Dirac measure at state ``i`` gives the
    expected control/filter product of the Zakai flow started at ``e_i``.
    """
    f = _terminal_vector(terminal, model.d)
    mean, se = _forward_estimate(model, [U], [f], grid, n_paths, seed, threads)
    return Y0Estimate(mean[0], se[0], n_paths)


@dataclass(frozen=True, eq=False)
class AdjointCheck:
    lhs: float
    rhs: float
    residual: float
    std_err: float
    n_paths: int
    dt: float
    lhs_std_err: float = 0.0
    rhs_std_err: float = 0.0

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "residual": self.residual,
            "std_err": self.std_err,
            "n_paths": self.n_paths,
            "dt": self.dt,
        }


def _zakai_pairing_samples(model, w, U, c, Z, dZ, dt):
    P, n, _ = dZ.shape
    sigma = np.broadcast_to(w, (P, model.d)).copy()
    acc = np.full(P, c * w.sum())
    for k in range(n):
        Uk = U.at(k, Z[:, k])
        acc += dt * np.einsum("pm,pm->p", Uk, sigma @ model.H)
        sigma = zakai_step(sigma, model.A, model.H, dZ[:, k], dt)
    return acc


def verify_adjoint_identity(
    model: Model,
    pi0,
    U: AdaptedControl,
    c: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    threads=None,
) -> AdjointCheck:
    """Compare ``pi0 . Y_0`` (backward side) with the Zakai side.

    The right-hand side is ``E~[sum_k dt U_k . sigma_k(H)] + c pi0(1)`` with
    ``sigma`` the signed Zakai flow from ``pi0``. The two sides use
    independent path streams.
    """
    w = as_weights(pi0, model.d)
    if U.deterministic:
        sol = solve_backward_ode(model, U, c, grid)
        lhs, lhs_se = float(w @ sol.Y0), 0.0
    else:
        sol = solve_bsde_lsmc(model, U, c, grid, n_paths, seed, threads=threads)
        vals = sol.batch_Y0 @ w
        lhs = float(vals.mean())
        lhs_se = float(vals.std(ddof=1) / math.sqrt(len(vals)))

    def run(start, count):
        Z, dZ = sample_reference_brownian(grid, model.m, seed, count, start, streams.REFERENCE)
        return _zakai_pairing_samples(model, w, U, c, Z, dZ, grid.dt)

    samples = np.concatenate(streams.map_batches(run, n_paths, threads))
    rhs, rhs_se = _mean_and_se(samples)
    se = math.hypot(lhs_se, float(rhs_se))
    return AdjointCheck(lhs, float(rhs), abs(lhs - float(rhs)), se, n_paths, grid.dt, lhs_se, float(rhs_se))


@dataclass(frozen=True, eq=False)
class SpanEstimate:
    """Result of :func:`empirical_reachable_span`.

    ``singular_values`` belong to the whitened estimate matrix (each
    control's ``Y_0`` divided by its RMS standard error) and are compared
    with ``noise_floor`` in the same units. ``angle_floor`` is the matching
    sine-of-angle scale for comparing ``subspace`` with another subspace.
    """

    rank: int
    subspace: Subspace
    singular_values: np.ndarray
    noise_floor: float
    angle_floor: float
    Y0: np.ndarray
    std_err: np.ndarray

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "basis": self.subspace.to_list(),
            "singular_values": self.singular_values.tolist(),
            "noise_floor": self.noise_floor,
            "angle_floor": self.angle_floor,
        }


def empirical_reachable_span(
    model: Model,
    n_controls: int,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    tol: float = DEFAULT_RANK_TOL,
    deterministic: bool = False,
    threads=None,
) -> SpanEstimate:
    """Estimate the controllable space from ``Y_0`` of random controls.

    Draws ``n_controls`` random controls (feedback on the feature library,
    or constants when ``deterministic``) and random terminal constants and
    estimates each ``Y_0`` on shared reference paths. Each estimate is
    divided by its own RMS standard error, so the Monte Carlo error matrix
    has roughly unit-variance entries and its spectral norm is about
    ``sqrt(n_controls) + sqrt(d)``. Singular values above
    ``1.5 * (sqrt(n_controls) + sqrt(d))`` and above ``tol * s_max`` count
    toward the rank.
    """
    if n_controls < model.d:
        raise ValueError("need at least d controls")
    rng = streams.path_rng(seed, 0, streams.CONTROL)
    controls, terminals = [], []
    for _ in range(n_controls):
        if deterministic:
            controls.append(constant_control(rng.standard_normal(model.m)))
        else:
            controls.append(random_feedback_control(model.m, rng))
        terminals.append(rng.standard_normal() * np.ones(model.d))
    mean, se = _forward_estimate(model, controls, terminals, grid, n_paths, seed, threads)
    scale = np.sqrt(np.mean(se**2, axis=1))
    # deterministic estimates with zero spread are left unscaled
    scale = np.where(scale > 0, scale, 1.0)
    left, s, _ = np.linalg.svd((mean / scale[:, None]).T, full_matrices=False)
    floor = SPAN_NOISE_FACTOR * (math.sqrt(n_controls) + math.sqrt(model.d))
    if np.all(se == 0):
        floor = 0.0
    threshold = max(floor, tol * (s[0] if s.size else 0.0))
    rank = int(np.sum(s > threshold))
    angle = floor / s[rank - 1] if rank else math.inf
    sub = Subspace(left[:, :rank].T, model.d, tol)
    return SpanEstimate(rank, sub, s, floor, float(angle), mean, se)


@dataclass(frozen=True, eq=False)
class EstimatorResult:
    S_T: np.ndarray
    mse: float
    mse_std_err: float
    Y0: np.ndarray


def estimator_terminal(
    model: Model,
    mu,
    U: AdaptedControl,
    f,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    threads=None,
) -> EstimatorResult:
    """Samples of ``S_T = mu(Y_0) - sum_k U_k . dZ_k`` and their squared error against ``f(X_T)``.

    ``Y_0`` comes from the backward ODE for deterministic controls and from
    the forward representation otherwise; ``S_T`` is evaluated on paths
    drawn under the physical law started from ``mu``.
    """
    w = as_weights(mu, model.d)
    fv = _terminal_vector(f, model.d)
    if U.deterministic:
        Y0 = solve_backward_ode(model, U, fv, grid).Y0
    else:
        Y0 = y0_forward_representation(model, U, fv, grid, n_paths, seed, threads).Y0
    base = float(w @ Y0)

    def run(start, count):
        b = simulate_physical(model, w, grid, seed, count, start)
        pay = np.zeros(count)
        for k in range(grid.n_steps):
            pay += np.einsum("pm,pm->p", U.at(k, b.Z[:, k]), b.dZ[:, k])
        S = base - pay
        return np.stack([S, fv[b.states[:, -1]]], axis=1)

    out = np.concatenate(streams.map_batches(run, n_paths, threads), axis=0)
    S, target = out[:, 0], out[:, 1]
    sq = (S - target) ** 2
    mse, mse_se = _mean_and_se(sq)
    return EstimatorResult(S, float(mse), float(mse_se), Y0)
