"""Entropy and variance based decomposition of predictive uncertainty.

Conventions used throughout the package:

* natural logarithms, so every entropy is in nats;
* ``0 * log 0 == 0`` with no smoothing;
* the probability matrix has one row per label and one column per
  demonstration set.

Naming follows the in-context-learning formulation rather than the usual
Bayesian-network one: the *epistemic* term is the expected entropy of the
per-demonstration-set answer distributions, and the *aleatoric* term is the
mutual information between the answer and the demonstration set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import AllZeroMass, DegenerateGrid, NotADistribution, ShapeMismatch

SUM_TOL = 1e-9

NAMING_NOTE = (
    "epistemic = mean entropy of per-demo-set answer distributions; "
    "aleatoric = mutual information between answer and demo set"
)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AnswerDistribution:
    """Unnormalized per-label probability mass for one demonstration set.

    ``n_skipped`` counts sequences that produced no parseable answer and
    ``fallback`` is set when every sequence failed and the mass was replaced
    by a uniform vector.
    """

    mass: np.ndarray
    n_skipped: int = 0
    fallback: bool = False

    def __post_init__(self):
        mass = _frozen(self.mass)
        if mass.ndim != 1 or mass.size == 0:
            raise ShapeMismatch(f"mass must be a non-empty vector, got shape {mass.shape}")
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise NotADistribution("mass entries must be finite and non-negative")
        if not np.any(mass > 0):
            raise AllZeroMass("answer distribution has no positive mass")
        object.__setattr__(self, "mass", mass)

    @property
    def k_labels(self) -> int:
        return self.mass.size


@dataclass(frozen=True)
class ProbabilityMatrix:
    """K x L matrix; column ``j`` is the answer mass under demo set ``j``."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeMismatch(f"expected a K x L matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise NotADistribution("matrix entries must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_columns(cls, columns: Sequence) -> "ProbabilityMatrix":
        cols = [c.mass if isinstance(c, AnswerDistribution) else np.asarray(c, float) for c in columns]
        if not cols:
            raise ShapeMismatch("need at least one column")
        ks = {c.shape for c in cols}
        if len(ks) != 1:
            raise ShapeMismatch(f"columns disagree on K: {sorted(k[0] for k in ks)}")
        return cls(np.stack(cols, axis=1))

    @property
    def k_labels(self) -> int:
        return self.values.shape[0]

    @property
    def l_demo_sets(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]


@dataclass(frozen=True)
class UncertaintyReport:
    total: float
    epistemic: float
    aleatoric: float
    method: Literal["entropy", "variance"]
    details: dict = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "epistemic": self.epistemic,
            "aleatoric": self.aleatoric,
            "method": self.method,
            **self.details,
        }


def entropy(dist, atol: float = SUM_TOL) -> float:
    """Shannon entropy in nats of a normalized probability vector.

    Raises:
        NotADistribution: if an entry is negative or the entries do not sum
            to one within ``atol``.
    """
    p = np.asarray(dist, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise NotADistribution(f"expected a non-empty vector, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise NotADistribution("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > atol:
        raise NotADistribution(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    # rounding can push a near-uniform vector a few ulp outside [0, ln K]
    return min(max(h, 0.0), math.log(p.size))


def normalize(dist) -> np.ndarray:
    """Scale a non-negative mass vector so that it sums to one."""
    mass = dist.mass if isinstance(dist, AnswerDistribution) else np.asarray(dist, dtype=float)
    if np.any(mass < 0):
        raise NotADistribution("mass entries must be non-negative")
    total = mass.sum()
    if not total > 0:
        raise AllZeroMass("cannot normalize an all-zero mass vector")
    return mass / total


def _normalized_columns(values: np.ndarray) -> np.ndarray:
    sums = values.sum(axis=0)
    bad = np.flatnonzero(~(sums > 0))
    if bad.size:
        raise AllZeroMass(f"column(s) {bad.tolist()} have no probability mass")
    return values / sums


def pooled_distribution(matrix, pooling: str = "uniform") -> np.ndarray:
    """Distribution whose entropy is the total uncertainty.

    ``"uniform"`` averages the normalized columns with weight 1/L.
    ``"raw_sum"`` sums the raw columns before normalizing, which weights each
    demo set by its retained mass.
    """
    values = matrix.values if isinstance(matrix, ProbabilityMatrix) else np.asarray(matrix, float)
    cols = _normalized_columns(values)
    if pooling == "uniform":
        if np.all(cols == cols[:, :1]):
            return cols[:, 0].copy()
        return cols.mean(axis=1)
    if pooling == "raw_sum":
        return normalize(values.sum(axis=1))
    raise ValueError(f"unknown pooling {pooling!r}")


def decompose_entropy(matrix, pooling: str = "uniform") -> UncertaintyReport:
    """Split the entropy of the pooled answer distribution.

    With uniform pooling the aleatoric term is evaluated as the mean
    Kullback-Leibler divergence of each column from the pooled distribution,
    which is the mutual information in closed form: it is non-negative term
    by term and vanishes exactly when all columns coincide. ``total`` is then
    ``epistemic + aleatoric``.
    """
    if not isinstance(matrix, ProbabilityMatrix):
        matrix = ProbabilityMatrix(matrix)
    cols = _normalized_columns(matrix.values)
    k, n_sets = cols.shape
    col_h = np.array([entropy(cols[:, j]) for j in range(n_sets)])
    epistemic = float(col_h.mean())
    pooled = pooled_distribution(matrix, pooling)

    if pooling == "uniform":
        kl = np.zeros(n_sets)
        for j in range(n_sets):
            p = cols[:, j]
            nz = p > 0
            kl[j] = np.sum(p[nz] * (np.log(p[nz]) - np.log(pooled[nz])))
        aleatoric = float(kl.mean())
        total = epistemic + aleatoric
    else:
        total = entropy(pooled)
        aleatoric = total - epistemic

    return UncertaintyReport(
        total=total,
        epistemic=epistemic,
        aleatoric=aleatoric,
        method="entropy",
        details={"pooling": pooling, "naming": NAMING_NOTE},
    )


def decompose_variance(grid, encoding: str = "scalar", k: int | None = None) -> UncertaintyReport:
    """Law-of-total-variance split of an M x L grid of outputs.

    Rows index model configurations and columns index demonstration sets.
    The epistemic term is the variance across configurations of the row means;
    the aleatoric term is the mean within-row variance. Population variances
    (``ddof=0``) are used so that the two terms add up to the variance of the
    flattened grid.

    With ``encoding="onehot"`` the grid holds integer label ids; each of the
    ``k`` indicator grids is decomposed separately and the terms are summed.
    """
    values = np.asarray(grid, dtype=float)
    if values.ndim != 2:
        raise ShapeMismatch(f"expected an M x L grid, got shape {values.shape}")
    if values.size < 2:
        raise DegenerateGrid(f"need at least two values, got {values.size}")

    if encoding == "onehot":
        if k is None:
            raise ValueError("onehot encoding needs k")
        ids = values.astype(int)
        if np.any(ids != values) or np.any(ids < 0) or np.any(ids >= k):
            raise ShapeMismatch("onehot encoding expects label ids in [0, k)")
        parts = [_variance_terms((ids == c).astype(float)) for c in range(k)]
        epistemic = float(sum(p[0] for p in parts))
        aleatoric = float(sum(p[1] for p in parts))
    elif encoding == "scalar":
        epistemic, aleatoric = _variance_terms(values)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    return UncertaintyReport(
        total=epistemic + aleatoric,
        epistemic=epistemic,
        aleatoric=aleatoric,
        method="variance",
        details={"encoding": encoding},
    )


def _variance_terms(values: np.ndarray) -> tuple[float, float]:
    if values.shape[0] == 1:
        between = 0.0
    else:
        between = float(np.var(values.mean(axis=1)))
    if values.shape[1] == 1:
        within = 0.0
    else:
        within = float(np.var(values, axis=1).mean())
    return between, within
