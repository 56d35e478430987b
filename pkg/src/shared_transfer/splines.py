"""Centered B-spline bases, additive design matrices and the penalized ridge fit.

A transfer function of covariate ``j`` is written ``f(z) = s_j(z) @ beta`` where
``s_j`` is the vector of cubic (by default) B-spline basis functions with their
means over a centering sample subtracted.  Centering makes every transfer
function sum to zero over that sample, so the intercept of an additive model
decouples from the spline coefficients and equals the response mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import DegenerateCovariate, ShapeError, SingularSystem

DEFAULT_NUM_FUNCTIONS = 12
DEFAULT_DEGREE = 3


@dataclass(frozen=True)
class SplineBasis:
    """Centered B-spline basis for one covariate.

    Attributes
    ----------
    covariate_index : int
        Zero-based column of the covariate this basis evaluates.
    degree : int
        Polynomial degree of the pieces.
    knots : ndarray
        Full knot vector, boundary knots repeated ``degree + 1`` times.
    column_means : ndarray, shape (num_functions,)
        Mean of each raw basis function over the centering sample.
    domain : tuple of float
        Closed interval spanned by the centering sample.
    """

    covariate_index: int
    degree: int
    knots: np.ndarray
    column_means: np.ndarray
    domain: tuple[float, float]

    @property
    def num_functions(self) -> int:
        return len(self.knots) - self.degree - 1

    def raw(self, z) -> np.ndarray:
        """Uncentered basis values, shape ``(len(z), num_functions)``.

        Points outside the domain are clamped to the nearest endpoint.
        """
        z = np.clip(np.atleast_1d(np.asarray(z, dtype=float)), *self.domain)
        if z.size == 0:
            return np.zeros((0, self.num_functions))
        return BSpline.design_matrix(z, self.knots, self.degree).toarray()

    def __call__(self, z) -> np.ndarray:
        return self.raw(z) - self.column_means


def _interior_knots(samples: np.ndarray, count: int) -> np.ndarray:
    probs = np.arange(1, count + 1) / (count + 1)
    knots = np.quantile(samples, probs)
    lo, hi = samples.min(), samples.max()
    if np.all(np.diff(knots) > 0) and (count == 0 or (knots[0] > lo and knots[-1] < hi)):
        return knots
    # heavy ties: fall back to quantiles of the distinct values
    return np.quantile(np.unique(samples), probs)


def make_basis(samples, num_functions: int = DEFAULT_NUM_FUNCTIONS,
               degree: int = DEFAULT_DEGREE, covariate_index: int = 0) -> SplineBasis:
    """Build a centered B-spline basis with knots at empirical quantiles.

    Parameters
    ----------
    samples : array_like
        Centering sample; also fixes the knot positions and the domain.
    num_functions : int
        Number of basis functions ``T``; must be at least ``degree + 1``.
    degree : int
        Spline degree (3 is cubic).

    Raises
    ------
    DegenerateCovariate
        If the sample has fewer distinct values than distinct knots needed.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if num_functions < degree + 1:
        raise ValueError(f"num_functions must be >= degree + 1 = {degree + 1}")
    if not np.all(np.isfinite(samples)):
        raise DegenerateCovariate(f"covariate {covariate_index} has non-finite samples")

    n_interior = num_functions - degree - 1
    n_distinct = np.unique(samples).size
    if n_distinct < n_interior + 2:
        raise DegenerateCovariate(
            f"covariate {covariate_index}: {n_distinct} distinct values, "
            f"need {n_interior + 2} for {num_functions} functions of degree {degree}")

    lo, hi = float(samples.min()), float(samples.max())
    interior = _interior_knots(samples, n_interior)
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    raw = BSpline.design_matrix(samples, knots, degree).toarray()
    return SplineBasis(covariate_index, degree, knots, raw.mean(axis=0), (lo, hi))


def eval_centered(basis: SplineBasis, z) -> np.ndarray:
    """Centered basis row ``s_j(z)`` for a scalar, or rows for an array."""
    if np.ndim(z) == 0:
        return basis(z)[0]
    return basis(z)


@dataclass(frozen=True)
class DesignMatrix:
    """Dense additive design matrix with one column block per covariate."""

    values: np.ndarray
    blocks: tuple[tuple[int, slice], ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ShapeError("design values must be two-dimensional")
        object.__setattr__(self, "values", values)
        if not self.blocks:
            object.__setattr__(self, "blocks", ((0, slice(0, values.shape[1])),))
        stop = 0
        for _, sl in self.blocks:
            if sl.start != stop:
                raise ShapeError("design blocks must partition the columns")
            stop = sl.stop
        if stop != values.shape[1]:
            raise ShapeError("design blocks must partition the columns")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def widths(self) -> list[int]:
        return [sl.stop - sl.start for _, sl in self.blocks]

    def block(self, j: int) -> np.ndarray:
        """Columns of the ``j``-th block, i.e. ``S_j``."""
        return self.values[:, self.blocks[j][1]]


def build_design(bases, covariates) -> DesignMatrix:
    """Evaluate each basis on its covariate column and stack the blocks."""
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[None, :]
    if covariates.ndim != 2 or covariates.shape[1] != len(bases):
        raise ShapeError(f"expected covariates with {len(bases)} columns, "
                         f"got shape {covariates.shape}")
    parts, blocks, start = [], [], 0
    for j, basis in enumerate(bases):
        parts.append(basis(covariates[:, j]))
        width = basis.num_functions
        blocks.append((basis.covariate_index, slice(start, start + width)))
        start += width
    return DesignMatrix(np.hstack(parts), tuple(blocks))


def solve_spd(A: np.ndarray, b: np.ndarray, allow_jitter: bool = True) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A`` via Cholesky.

    When factorization fails and ``allow_jitter`` is set, ``1e-10 * trace / dim``
    is added to the diagonal and the factorization retried.  Otherwise a
    numerically singular ``A`` raises ``SingularSystem``.
    """
    dim = A.shape[0]
    if dim == 0:
        return np.zeros_like(b, dtype=float)
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
        diag = np.abs(np.diag(factor[0]))
        if diag.min() ** 2 <= np.finfo(float).eps * dim * max(diag.max() ** 2, 1e-300):
            raise np.linalg.LinAlgError("numerically singular")
    except np.linalg.LinAlgError:
        if not allow_jitter:
            raise SingularSystem("normal equations are singular; use nu > 0") from None
        jitter = 1e-10 * max(np.trace(A) / dim, np.finfo(float).tiny)
        factor = linalg.cho_factor(A + jitter * np.eye(dim), lower=True, check_finite=False)
    return linalg.cho_solve(factor, b, check_finite=False)


@dataclass(frozen=True)
class RidgeFit:
    """Penalized additive-model fit ``y ~ intercept + S @ coefficients``."""

    coefficients: np.ndarray
    intercept: float
    regularizer_nu: float
    residual_norm: float


def fit_ridge(design: DesignMatrix, responses, nu: float = 1.0) -> RidgeFit:
    """Minimize ``||y_c - S beta||^2 + nu ||beta||^2`` on centered responses.

    The intercept is the sample mean of the raw responses.
    """
    y = np.asarray(responses, dtype=float).ravel()
    if y.shape[0] != design.rows:
        raise ShapeError(f"responses have length {y.shape[0]}, design has {design.rows} rows")
    if nu < 0:
        raise ValueError("nu must be non-negative")
    intercept = float(np.mean(y)) if y.size else 0.0
    yc = y - intercept
    S = design.values
    A = S.T @ S
    A[np.diag_indices_from(A)] += nu
    beta = solve_spd(A, S.T @ yc, allow_jitter=nu > 0)
    return RidgeFit(beta, intercept, float(nu), float(np.linalg.norm(yc - S @ beta)))


def predict_ridge(fit: RidgeFit, design: DesignMatrix) -> np.ndarray:
    if design.values.shape[1] != fit.coefficients.shape[0]:
        raise ShapeError(f"design has {design.values.shape[1]} columns, "
                         f"fit has {fit.coefficients.shape[0]} coefficients")
    return design.values @ fit.coefficients + fit.intercept
