"""Algebraic observability tests for finite-state models.

The controllable space of the dual backward equation is the smallest
subspace of R^d that contains the constant vector and is closed under
``g -> A g`` and ``g -> g * H[:, k]`` (element-wise). The model is
observable exactly when that subspace is all of R^d; its orthogonal
complement holds the unobservable signed measures.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import BudgetExceeded, NotInjective
from .model import DEFAULT_RANK_TOL, Model, Subspace, numerical_rank

ROW_COLLISION_ATOL = 1e-12
BRUTE_FORCE_BUDGET = 10**6


class _IncrementalBasis:
    """Orthonormal basis grown by modified Gram-Schmidt with one re-orthogonalization pass."""

    def __init__(self, d, tol):
        self.d = d
        self.tol = tol
        self.vectors = []

    def admit(self, g):
        """Add the normalized residual of ``g`` if it is numerically new; return it or None."""
        g = np.asarray(g, dtype=float)
        scale = max(1.0, float(np.linalg.norm(g)))
        r = g.copy()
        for _ in range(2):
            for q in self.vectors:
                r -= (q @ r) * q
        nr = float(np.linalg.norm(r))
        if nr <= self.tol * scale:
            return None
        q = r / nr
        self.vectors.append(q)
        return q

    def subspace(self):
        return Subspace(np.array(self.vectors).reshape(-1, self.d), self.d, self.tol)


def nonlinear_closure(model: Model, tol: float = DEFAULT_RANK_TOL) -> Subspace:
    """Smallest subspace containing 1 and closed under A and Hadamard products with H columns.

    Breadth-first: every newly admitted basis vector ``g`` is queued and
    later expanded into ``A g`` followed by ``g * H[:, k]`` for k ascending.
    """
    A, H, d = model.A, model.H, model.d
    basis = _IncrementalBasis(d, tol)
    queue = deque()
    first = basis.admit(np.ones(d))
    queue.append(first)
    while queue and len(basis.vectors) < d:
        g = queue.popleft()
        candidates = [A @ g] + [g * H[:, k] for k in range(model.m)]
        for c in candidates:
            q = basis.admit(c)
            if q is not None:
                queue.append(q)
            if len(basis.vectors) == d:
                break
    return basis.subspace()


def brute_force_closure(
    model: Model, depth: int, tol: float = DEFAULT_RANK_TOL, budget: int = BRUTE_FORCE_BUDGET
) -> Subspace:
    """Span of every word of length <= depth in {A, (* H[:, k])} applied to 1.

    Independent reference for :func:`nonlinear_closure`: no incremental
    pruning, just literal enumeration followed by an SVD rank decision.
    Each generated vector is rescaled to unit norm, which leaves the span
    unchanged and keeps long words from swamping short ones; words whose
    norm falls to ``tol`` or below are treated as zero.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    ops = [lambda g: model.A @ g] + [
        (lambda g, k=k: g * model.H[:, k]) for k in range(model.m)
    ]
    level = [np.ones(model.d) / np.sqrt(model.d)]
    everything = list(level)
    for _ in range(depth):
        nxt = []
        for g in level:
            for op in ops:
                v = op(g)
                n = np.linalg.norm(v)
                # inputs are unit vectors, so a norm this small is cancellation
                # noise; the incremental closure never admits such vectors either
                if n > tol:
                    nxt.append(v / n)
        everything.extend(nxt)
        if len(everything) > budget:
            raise BudgetExceeded(f"brute-force enumeration exceeded {budget} vectors")
        level = nxt
    _, sub = numerical_rank(np.array(everything), tol)
    return sub


def linear_observability(model: Model, tol: float = DEFAULT_RANK_TOL) -> Subspace:
    """Span of the columns of H, AH, ..., A^(d-1) H (Kalman observability space)."""
    cols = []
    block = np.array(model.H)
    # round-off columns (e.g. A applied to a constant) must not be normalized up
    floor = tol * max(np.linalg.norm(block), np.finfo(float).tiny)
    for _ in range(model.d):
        for c in block.T:
            n = np.linalg.norm(c)
            if n > floor:
                cols.append(c / n)
        block = model.A @ block
    if not cols:
        return Subspace(np.zeros((0, model.d)), model.d, tol)
    _, sub = numerical_rank(np.array(cols), tol)
    return sub


def injectivity_check(model: Model):
    """Return ``(injective, colliding_pairs)`` for the map state -> H row."""
    H = model.H
    pairs = [
        (i, j)
        for i, j in combinations(range(model.d), 2)
        if np.all(np.abs(H[i] - H[j]) <= ROW_COLLISION_ATOL)
    ]
    return (not pairs), pairs


def _all_distinct(v, rel=1e-9) -> bool:
    if v.size < 2:
        return True
    s = np.sort(v)
    scale = float(np.max(np.abs(v)))
    return scale > 0 and float(np.min(np.diff(s))) > rel * scale


def collapse_vector(model: Model, seed: int = 0, max_draws: int = 1000) -> np.ndarray:
    """Find ``a`` with ``H @ a`` pairwise distinct across states.

    Tries the canonical directions first, then random unit vectors. Such
    an ``a`` avoids finitely many hyperplanes, so a random draw succeeds
    with probability one.
    """
    injective, pairs = injectivity_check(model)
    if not injective:
        raise NotInjective(f"rows of H collide: {pairs}")
    H = model.H
    for k in range(model.m):
        a = np.zeros(model.m)
        a[k] = 1.0
        if _all_distinct(H @ a):
            return a
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        a = rng.standard_normal(model.m)
        a /= np.linalg.norm(a)
        if _all_distinct(H @ a):
            return a
    raise NotInjective("no separating direction found within the draw budget")


def unobservable_directions(model: Model, tol: float = DEFAULT_RANK_TOL) -> Subspace:
    """Orthogonal complement of the controllable space (null space of the adjoint)."""
    return nonlinear_closure(model, tol).complement()


@dataclass(frozen=True, eq=False)
class ObservabilityReport:
    observable: bool
    closure_dim: int
    closure_basis: Subspace
    linear_dim: int
    linear_basis: Subspace
    injective: bool
    colliding_pairs: list
    unobservable_basis: Subspace
    tol: float

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "closure_dim": self.closure_dim,
            "linear_dim": self.linear_dim,
            "injective": self.injective,
            "colliding_pairs": [list(p) for p in self.colliding_pairs],
            "closure_basis": self.closure_basis.to_list(),
            "linear_basis": self.linear_basis.to_list(),
            "unobservable_basis": self.unobservable_basis.to_list(),
            "tol": self.tol,
        }


def analyze(model: Model, tol: float = DEFAULT_RANK_TOL) -> ObservabilityReport:
    closure = nonlinear_closure(model, tol)
    linear = linear_observability(model, tol)
    injective, pairs = injectivity_check(model)
    return ObservabilityReport(
        observable=closure.dim == model.d,
        closure_dim=closure.dim,
        closure_basis=closure,
        linear_dim=linear.dim,
        linear_basis=linear,
        injective=injective,
        colliding_pairs=pairs,
        unobservable_basis=closure.complement(),
        tol=tol,
    )
