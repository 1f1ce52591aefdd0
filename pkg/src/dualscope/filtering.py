"""Zakai and Wonham filters for finite-state models, Euler-Maruyama in time.

The un-normalized measure obeys
``sigma_{k+1} = sigma_k + dt A^T sigma_k + sum_c diag(H[:, c]) sigma_k dZ_k^c``.
For nonnegative initial measures each step is renormalized and the removed
log-mass is kept in ``log_norm``; signed initial measures run the raw
linear recursion, which is what the duality computations need.

All propagators accept ``dZ`` with shape ``(n, m)`` for one path or
``(P, n, m)`` for a batch; outputs carry the same leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DegenerateMass, FilterInstability, NumericalOverflow, ZeroMass
from .model import Model, as_weights
from .simulate import TimeGrid

MIN_MASS = 1e-300
MAX_CLAMP_FRACTION = 1e-3
PHI_LIMIT = 1e300


@dataclass(frozen=True, eq=False)
class FilterTrajectory:
    grid: TimeGrid
    sigma: np.ndarray
    pi: np.ndarray
    log_norm: np.ndarray
    clamp_events: Union[int, np.ndarray]
    signed: bool

    def csv_columns(self):
        d = self.sigma.shape[-1]
        names = [f"sigma_{i + 1}" for i in range(d)] + [f"pi_{i + 1}" for i in range(d)] + ["log_norm"]
        values = np.concatenate([self.sigma, self.pi, self.log_norm[..., None]], axis=-1)
        return names, values


@dataclass(frozen=True, eq=False)
class FundamentalMatrixPath:
    grid: TimeGrid
    Phi: np.ndarray  # (..., n+1, d, d)


def _batched(dZ):
    dZ = np.asarray(dZ, dtype=float)
    if dZ.ndim == 2:
        return dZ[None], True
    return dZ, False


def zakai_step(sigma, A, H, dz, dt):
    """One Euler step for a batch ``sigma`` of shape ``(P, d)``; ``dz`` is ``(P, m)``."""
    return sigma + dt * (sigma @ A) + sigma * (dz @ H.T)


def propagate_zakai(
    model: Model, pi0, dZ, grid: TimeGrid, signed: Optional[bool] = None
) -> FilterTrajectory:
    """Run the Zakai recursion from ``pi0`` along observation increments ``dZ``.

    ``signed`` defaults to whether ``pi0`` has a negative entry. In
    probability mode, negative entries produced by the discretization are
    clamped to zero and counted; more than 0.1% of steps clamped on any
    path raises :class:`FilterInstability`.
    """
    w = as_weights(pi0, model.d)
    dZ, single = _batched(dZ)
    P, n, _ = dZ.shape
    if n != grid.n_steps:
        raise ValueError(f"dZ has {n} steps, grid has {grid.n_steps}")
    if signed is None:
        signed = bool(np.any(w < 0))
    A, H, dt = model.A, model.H, grid.dt

    sigma = np.empty((P, n + 1, model.d))
    sigma[:, 0] = w
    log_norm = np.zeros((P, n + 1))
    clamps = np.zeros(P, dtype=np.int64)
    cur = np.broadcast_to(w, (P, model.d)).copy()
    for k in range(n):
        nxt = zakai_step(cur, A, H, dZ[:, k], dt)
        if not signed:
            neg = nxt < 0
            if neg.any():
                clamps += neg.any(axis=1)
                nxt[neg] = 0.0
            mass = nxt.sum(axis=1)
            if np.any(mass < MIN_MASS):
                raise DegenerateMass(f"filter mass collapsed at step {k + 1}")
            log_norm[:, k + 1] = log_norm[:, k] + np.log(mass)
            nxt /= mass[:, None]
        cur = nxt
        sigma[:, k + 1] = cur

    if signed:
        # no meaningful normalization for signed measures; kept for shape parity
        with np.errstate(divide="ignore", invalid="ignore"):
            pi = sigma / sigma.sum(axis=2, keepdims=True)
    else:
        if np.any(clamps > MAX_CLAMP_FRACTION * n):
            raise FilterInstability(
                f"{int(clamps.max())} clamped steps out of {n}; reduce dt"
            )
        pi = normalize(sigma)

    if single:
        return FilterTrajectory(grid, sigma[0], pi[0], log_norm[0], int(clamps[0]), signed)
    return FilterTrajectory(grid, sigma, pi, log_norm, clamps, signed)


def normalize(sigma) -> np.ndarray:
    """Divide each measure along the last axis by its total mass."""
    sigma = np.asarray(sigma, dtype=float)
    mass = sigma.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0):
        raise ZeroMass("cannot normalize a measure with nonpositive mass")
    return sigma / mass


def fundamental_step(Phi, A, H, dz, dt):
    """Euler step for stacked matrices ``Phi`` of shape ``(P, d, d)``."""
    return Phi + dt * np.matmul(A.T, Phi) + (dz @ H.T)[:, :, None] * Phi


def propagate_fundamental(model: Model, dZ, grid: TimeGrid) -> FundamentalMatrixPath:
    """Zakai recursion started from the identity; column ``i`` is the flow of ``e_i``."""
    dZ, single = _batched(dZ)
    P, n, _ = dZ.shape
    d = model.d
    Phi = np.empty((P, n + 1, d, d))
    cur = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    Phi[:, 0] = cur
    for k in range(n):
        cur = fundamental_step(cur, model.A, model.H, dZ[:, k], grid.dt)
        if not np.all(np.abs(cur) < PHI_LIMIT):
            raise NumericalOverflow(
                f"fundamental matrix overflow at step {k + 1}; use a shorter horizon"
            )
        Phi[:, k + 1] = cur
    return FundamentalMatrixPath(grid, Phi[0] if single else Phi)


def mass_identity_check(model: Model, mu, dZ, grid: TimeGrid) -> float:
    """Max over steps and paths of ``|sigma_k(1) - mu(1) - sum_{j<k} sigma_j(H) . dZ_j|``.

    Uses the raw (un-renormalized) recursion.
    """
    w = as_weights(mu, model.d)
    dZ, _ = _batched(dZ)
    traj = propagate_zakai(model, w, dZ, grid, signed=True)
    sigma = traj.sigma  # (P, n+1, d)
    mass = sigma.sum(axis=2)
    incr = np.einsum("pkd,dm,pkm->pk", sigma[:, :-1], model.H, dZ)
    integral = np.zeros_like(mass)
    np.cumsum(incr, axis=1, out=integral[:, 1:])
    return float(np.max(np.abs(mass - w.sum() - integral)))
