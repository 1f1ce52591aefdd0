"""Domain types for finite-state hidden Markov models and the dense
linear algebra shared by the rest of the package.

A model is the pair ``(A, H)``: ``A`` is a ``d x d`` generator acting on
functions, ``(A f)_i = sum_j A_ij f_j``, and ``H`` is ``d x m`` with row
``H[i]`` the observation vector of state ``i``. Functions on the state
space and measures are both plain length-``d`` vectors; the pairing
``mu(f)`` is the dot product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    ModelValidationError,
    NegativeOffDiagonal,
    NonSquareGenerator,
    NumericalOverflow,
    RowSumViolation,
)

ROW_SUM_ATOL = 1e-12
PROB_ATOL = 1e-12
DEFAULT_RANK_TOL = 1e-9
EXPM_NORM_LIMIT = 1e4


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Model:
    A: np.ndarray
    H: np.ndarray
    labels: Optional[tuple] = None

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def ones(self) -> np.ndarray:
        return np.ones(self.d)

    def to_dict(self) -> dict:
        out = {"d": self.d, "m": self.m, "A": self.A.tolist(), "H": self.H.tolist()}
        if self.labels is not None:
            out["labels"] = list(self.labels)
        return out

    def permuted(self, perm: Sequence[int]) -> "Model":
        """Relabel states so that new state ``k`` is old state ``perm[k]``."""
        p = np.asarray(perm)
        labels = None if self.labels is None else tuple(self.labels[i] for i in p)
        return Model(_frozen(self.A[np.ix_(p, p)]), _frozen(self.H[p]), labels)


def validate_model(A, H, labels=None) -> Model:
    """Check generator and observation matrices and build a :class:`Model`.

    ``H`` may be given as a 1-D array for a single observation channel.
    """
    A = np.array(A, dtype=float)
    H = np.array(H, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonSquareGenerator(f"generator must be square, got shape {A.shape}")
    d = A.shape[0]
    if d < 1:
        raise ModelValidationError("state space must have at least one state")
    if H.ndim != 2 or H.shape[0] != d:
        raise DimensionMismatch(f"H must have {d} rows, got shape {H.shape}")
    if H.shape[1] < 1:
        raise DimensionMismatch("H must have at least one observation channel")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(H))):
        raise ModelValidationError("model matrices must be finite")

    off = A - np.diag(np.diag(A))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise NegativeOffDiagonal(f"A[{i},{j}] = {A[i, j]} is negative")
    sums = A.sum(axis=1)
    worst = int(np.argmax(np.abs(sums)))
    if abs(sums[worst]) > ROW_SUM_ATOL:
        raise RowSumViolation(worst, float(sums[worst]))

    if labels is not None:
        labels = tuple(str(s) for s in labels)
        if len(labels) != d:
            raise DimensionMismatch(f"expected {d} labels, got {len(labels)}")
    return Model(_frozen(A), _frozen(H), labels)


_MODEL_KEYS = {"d", "m", "A", "H", "labels"}


def model_from_dict(raw: dict) -> Model:
    if not isinstance(raw, dict):
        raise ModelValidationError("model file must hold a JSON object")
    unknown = set(raw) - _MODEL_KEYS
    if unknown:
        raise ModelValidationError(f"unknown keys in model file: {sorted(unknown)}")
    for key in ("A", "H"):
        if key not in raw:
            raise ModelValidationError(f"model file is missing '{key}'")
    model = validate_model(raw["A"], raw["H"], raw.get("labels"))
    if "d" in raw and raw["d"] != model.d:
        raise DimensionMismatch(f"declared d={raw['d']} but A is {model.d}x{model.d}")
    if "m" in raw and raw["m"] != model.m:
        raise DimensionMismatch(f"declared m={raw['m']} but H has {model.m} columns")
    return model


def load_model(path) -> Model:
    with open(Path(path)) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelValidationError(f"malformed model JSON: {exc}") from exc
    return model_from_dict(raw)


@dataclass(frozen=True, eq=False)
class SignedMeasure:
    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be a finite vector")
        object.__setattr__(self, "weights", w)

    def __call__(self, f) -> float:
        return float(self.weights @ np.asarray(f, dtype=float))


@dataclass(frozen=True, eq=False)
class ProbabilityMeasure(SignedMeasure):
    def __post_init__(self):
        super().__post_init__()
        w = self.weights
        if np.any(w < 0) or abs(w.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"not a probability vector: {w.tolist()}")


def as_weights(mu, d: Optional[int] = None) -> np.ndarray:
    w = mu.weights if isinstance(mu, SignedMeasure) else np.asarray(mu, dtype=float)
    if d is not None and w.shape != (d,):
        raise DimensionMismatch(f"measure must have length {d}, got shape {w.shape}")
    return w


def matrix_exponential(M, t: float = 1.0) -> np.ndarray:
    """Return ``exp(M t)``.

    Backed by the scaling-and-squaring Pade routine in SciPy. Inputs with
    ``||M t||_1 > 1e4`` are rejected rather than squared into overflow.
    """
    Mt = np.asarray(M, dtype=float) * t
    if not np.all(np.isfinite(Mt)):
        raise ValueError("matrix exponential input must be finite")
    if np.abs(Mt).sum(axis=0).max(initial=0.0) > EXPM_NORM_LIMIT:
        raise NumericalOverflow(f"||Mt||_1 exceeds {EXPM_NORM_LIMIT:g}")
    return scipy.linalg.expm(Mt)


@dataclass(frozen=True, eq=False)
class Subspace:
    """Subspace of R^d held as orthonormal rows of ``basis`` (shape ``(k, d)``)."""

    basis: np.ndarray
    d: int
    tol: float = DEFAULT_RANK_TOL

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float).reshape(-1, self.d)
        object.__setattr__(self, "basis", _frozen(b))

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def project(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return (v @ self.basis.T) @ self.basis

    def residual(self, v) -> float:
        """Euclidean norm of the component of ``v`` orthogonal to the subspace."""
        v = np.asarray(v, dtype=float)
        return float(np.linalg.norm(v - self.project(v)))

    def contains(self, v, atol: float = 1e-9) -> bool:
        return self.residual(v) < atol

    def max_residual_of(self, other: "Subspace") -> float:
        """Largest residual of ``other``'s basis vectors after projection here."""
        if other.dim == 0:
            return 0.0
        return max(self.residual(v) for v in other.basis)

    def distance(self, other: "Subspace") -> float:
        """Mutual projection residual; zero iff the subspaces coincide."""
        return max(self.max_residual_of(other), other.max_residual_of(self))

    def complement(self) -> "Subspace":
        if self.dim == 0:
            return Subspace(np.eye(self.d), self.d, self.tol)
        ns = scipy.linalg.null_space(self.basis, rcond=self.tol)
        return Subspace(ns.T, self.d, self.tol)

    def to_list(self) -> list:
        return self.basis.tolist()


def numerical_rank(vectors, tol: float = DEFAULT_RANK_TOL):
    """Numerical rank and span of a collection of d-vectors.

    Singular values at or above ``tol * sigma_max`` count; the returned
    subspace is spanned by the matching left singular vectors.
    """
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    if V.size == 0:
        raise ValueError("numerical_rank needs at least one vector")
    d = V.shape[1]
    # columns are the input vectors
    U, s, _ = np.linalg.svd(V.T, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, Subspace(np.zeros((0, d)), d, tol)
    r = int(np.sum(s >= tol * s[0]))
    return r, Subspace(U[:, :r].T, d, tol)
