"""Sampling of hidden chains and their observation paths.

Physical paths follow ``dZ = h(X) dt + dW`` with the chain started from a
given law. Reference paths are plain Brownian motion, which is the law of
``Z`` after the Girsanov change of measure; all duality pairings are
computed on those.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import streams
from .model import Model, ProbabilityMeasure, as_weights


@dataclass(frozen=True)
class TimeGrid:
    T: float = 1.0
    dt: float = 1e-3

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError("T must be positive")
        n = max(1, int(round(self.T / self.dt)))
        object.__setattr__(self, "requested_T", self.T)
        object.__setattr__(self, "T", n * self.dt)
        object.__setattr__(self, "n_steps", n)

    @property
    def adjusted(self) -> bool:
        """True when T was moved to the nearest multiple of dt."""
        return self.T != self.requested_T

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True, eq=False)
class PathBundle:
    """A batch of sampled paths; the leading axis indexes paths.

    ``states`` has shape ``(P, n+1)`` (``None`` for reference paths),
    ``Z`` has shape ``(P, n+1, m)`` and ``dZ`` shape ``(P, n, m)``.
    """

    grid: TimeGrid
    states: Optional[np.ndarray]
    Z: np.ndarray
    dZ: np.ndarray
    measure: str  # "physical" or "reference"
    mu: Optional[np.ndarray] = None
    first_index: int = 0

    @property
    def n_paths(self) -> int:
        return self.Z.shape[0]


def _jump_table(A):
    """Row-wise cumulative jump distributions (all zeros for absorbing rows)."""
    J = np.array(A, dtype=float)
    np.fill_diagonal(J, 0.0)
    return np.cumsum(J, axis=1)


def ctmc_events(model: Model, x0: int, T: float, rng: np.random.Generator, _table=None):
    """Exact jump times and visited states of one chain path on ``[0, T]``.

    Holding time in ``i`` is exponential with rate ``-A[i, i]``; the next
    state is ``j`` with probability ``A[i, j] / -A[i, i]``.
    """
    cum = _jump_table(model.A) if _table is None else _table
    rates = -np.diag(model.A)
    times, states = [0.0], [int(x0)]
    t, x = 0.0, int(x0)
    while rates[x] > 0:
        t += rng.exponential(1.0 / rates[x])
        if t > T:
            break
        row = cum[x]
        x = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
        times.append(t)
        states.append(x)
    return np.array(times), np.array(states, dtype=np.int64)


def _grid_states(times, states, grid_times):
    idx = np.searchsorted(times, grid_times, side="right") - 1
    return states[idx]


def sample_ctmc(model: Model, mu, grid: TimeGrid, seed: int, n_paths: int = 1, start: int = 0):
    """Chain paths sampled at grid points, shape ``(n_paths, n_steps+1)``.

    Path ``start + i`` always uses the same stream, so any slice of paths
    can be regenerated independently.
    """
    w = as_weights(mu, model.d)
    ProbabilityMeasure(w)
    out = np.empty((n_paths, grid.n_steps + 1), dtype=np.int64)
    gt = grid.times
    table = _jump_table(model.A)
    cum_w = np.cumsum(w)
    for i in range(n_paths):
        rng = streams.path_rng(seed, start + i, streams.CTMC)
        x0 = min(int(np.searchsorted(cum_w, rng.random() * cum_w[-1], side="right")), model.d - 1)
        times, states = ctmc_events(model, x0, grid.T, rng, table)
        out[i] = _grid_states(times, states, gt)
    return out


def _brownian_increments(grid, m, seed, n_paths, start, stream):
    out = np.empty((n_paths, grid.n_steps, m))
    sq = math.sqrt(grid.dt)
    for i in range(n_paths):
        rng = streams.path_rng(seed, start + i, stream)
        out[i] = sq * rng.standard_normal((grid.n_steps, m))
    return out


def _accumulate(dZ):
    P, n, m = dZ.shape
    Z = np.zeros((P, n + 1, m))
    # sequential cumsum, so Z[k+1] == Z[k] + dZ[k] bit for bit
    np.cumsum(dZ, axis=1, out=Z[:, 1:])
    return Z


def synthesize_observation(model: Model, states, grid: TimeGrid, seed: int, start: int = 0):
    """Observation paths ``dZ_k = H[X_k] dt + sqrt(dt) xi_k`` for given chain paths."""
    states = np.atleast_2d(states)
    noise = _brownian_increments(grid, model.m, seed, states.shape[0], start, streams.OBS_NOISE)
    dZ = model.H[states[:, :-1]] * grid.dt + noise
    return _accumulate(dZ), dZ


def sample_reference_brownian(
    grid: TimeGrid, m: int, seed: int, n_paths: int = 1, start: int = 0, stream: int = streams.REFERENCE
):
    """Standard Brownian observation paths (the reference measure)."""
    dZ = _brownian_increments(grid, m, seed, n_paths, start, stream)
    return _accumulate(dZ), dZ


def simulate_physical(model: Model, mu, grid: TimeGrid, seed: int, n_paths: int, start: int = 0) -> PathBundle:
    states = sample_ctmc(model, mu, grid, seed, n_paths, start)
    Z, dZ = synthesize_observation(model, states, grid, seed, start)
    return PathBundle(grid, states, Z, dZ, "physical", as_weights(mu, model.d).copy(), start)


def simulate_reference(
    grid: TimeGrid, m: int, seed: int, n_paths: int, start: int = 0, stream: int = streams.REFERENCE
) -> PathBundle:
    Z, dZ = sample_reference_brownian(grid, m, seed, n_paths, start, stream)
    return PathBundle(grid, None, Z, dZ, "reference", None, start)


def write_paths_csv(bundle: PathBundle, fh, extra=None):
    """Long-format CSV: ``path_id, t, state, Z_1..Z_m`` plus optional extra columns.

    ``extra`` is ``(names, values)`` with ``values`` shaped ``(P, n+1, len(names))``.
    """
    m = bundle.Z.shape[2]
    names = ["path_id", "t", "state"] + [f"Z_{c + 1}" for c in range(m)]
    if extra is not None:
        names += list(extra[0])
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(names)
    times = bundle.grid.times
    for p in range(bundle.n_paths):
        for k, t in enumerate(times):
            state = "" if bundle.states is None else int(bundle.states[p, k])
            row = [bundle.first_index + p, repr(float(t)), state]
            row += [repr(float(z)) for z in bundle.Z[p, k]]
            if extra is not None:
                row += [repr(float(v)) for v in extra[1][p, k]]
            w.writerow(row)
