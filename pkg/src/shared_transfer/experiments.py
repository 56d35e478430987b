"""Synthetic benchmark, baselines, transfer-function matching and model size.

Baselines
---------
IAM
    An independent additive model per task (same spline bases and ridge).
KAM
    K-means on the response vectors, then one additive model per cluster.
LR
    Per-task ridge regression on the raw covariates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .errors import DataError, ShapeError
from .learner import (FitConfig, MultiTaskModel, TaskDataset, fit, fit_iteration, make_bases,
                      predict_dataset, task_designs)
from .sparse_coding import BlockSparseCode
from .splines import (DEFAULT_DEGREE, DEFAULT_NUM_FUNCTIONS, build_design,
                      fit_ridge, make_basis)


@dataclass(frozen=True)
class SyntheticSpec:
    """Settings of the synthetic multi-task problem.

    Weights are drawn from ``weight_scale * U[0.5, 1.5]``.
    """

    n: int = 100
    p: int = 10
    N: int = 200
    L: int = 3
    noise_sigma: float = 1.0
    test_n: int = 400
    weight_scale: float = 1.0
    seed: int = 0
    num_functions: int = DEFAULT_NUM_FUNCTIONS
    degree: int = DEFAULT_DEGREE

    def __post_init__(self):
        if min(self.n, self.p, self.N, self.L, self.test_n) < 1:
            raise ValueError("sizes must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.weight_scale > 0:
            raise ValueError("weight_scale must be positive")


@dataclass
class GroundTruth:
    """True spline bases, transfer functions (``T x L`` per covariate) and codes."""

    bases: list
    coefficient_matrices: list
    codes: list

    def signal(self, covariates) -> np.ndarray:
        """Noise-free centered responses, one row per task, at shared covariates."""
        design = build_design(self.bases, covariates)
        F = [design.block(j) @ B for j, B in enumerate(self.coefficient_matrices)]
        out = np.zeros((len(self.codes), design.rows))
        for m, code in enumerate(self.codes):
            for k, l, c in code.selected:
                out[m] += c * F[k][:, l]
        return out


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator | None = None):
    """Draw train and test sets from a random shared-transfer-function model.

    Covariates are iid ``U[-1, 1]`` and identical for all tasks.  Each true
    function has iid normal spline coefficients rescaled to unit RMS over the
    training covariates (it is centered there by construction of the basis).
    Every task uses one function per covariate with a positive weight.

    Returns
    -------
    train, test : TaskDataset
    truth : GroundTruth
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    X = rng.uniform(-1.0, 1.0, (spec.n, spec.p))
    bases = [make_basis(X[:, j], spec.num_functions, spec.degree, j) for j in range(spec.p)]
    design = build_design(bases, X)
    coeffs = []
    for j in range(spec.p):
        B = rng.standard_normal((spec.num_functions, spec.L))
        rms = np.linalg.norm(design.block(j) @ B, axis=0) / np.sqrt(spec.n)
        coeffs.append(B / rms)
    codes = []
    widths = [spec.L] * spec.p
    for _ in range(spec.N):
        picks = rng.integers(spec.L, size=spec.p)
        weights = spec.weight_scale * rng.uniform(0.5, 1.5, spec.p)
        codes.append(BlockSparseCode.from_selection(
            widths, [(j, int(picks[j]), float(weights[j])) for j in range(spec.p)]))
    truth = GroundTruth(bases, coeffs, codes)

    X_test = rng.uniform(-1.0, 1.0, (spec.test_n, spec.p))
    Y = truth.signal(X) + spec.noise_sigma * rng.standard_normal((spec.N, spec.n))
    Y_test = truth.signal(X_test) + spec.noise_sigma * rng.standard_normal((spec.N, spec.test_n))
    ids = [f"task{m:04d}" for m in range(spec.N)]
    names = [f"x{j + 1}" for j in range(spec.p)]
    return (TaskDataset.from_shared(X, Y, ids, names),
            TaskDataset.from_shared(X_test, Y_test, ids, names), truth)


# -- baselines ---------------------------------------------------------------

@dataclass
class AdditiveBaseline:
    """Additive-model baseline: bases, one ridge fit per group, task -> group map."""

    bases: list
    fits: list
    assignments: np.ndarray

    def predict(self, dataset: TaskDataset) -> np.ndarray:
        out = np.empty_like(dataset.responses)
        shared = build_design(self.bases, dataset.covariates[0]) \
            if dataset.shared_covariates else None
        for m in range(dataset.N):
            design = shared if shared is not None else \
                build_design(self.bases, dataset.covariates[m])
            fit_m = self.fits[self.assignments[m]]
            out[m] = design.values @ fit_m.coefficients + fit_m.intercept
        return out


def fit_iam(dataset: TaskDataset, nu: float = 1.0, num_functions: int = DEFAULT_NUM_FUNCTIONS,
            degree: int = DEFAULT_DEGREE) -> AdditiveBaseline:
    """Independent additive model per task, on the same bases as the joint fit."""
    bases = make_bases(dataset, num_functions, degree)
    designs = task_designs(dataset, bases)
    fits = [fit_ridge(designs[m], dataset.responses[m], nu) for m in range(dataset.N)]
    return AdditiveBaseline(bases, fits, np.arange(dataset.N))


def fit_kam(dataset: TaskDataset, L: int, nu: float = 1.0, rng=None,
            num_functions: int = DEFAULT_NUM_FUNCTIONS,
            degree: int = DEFAULT_DEGREE) -> AdditiveBaseline:
    """Cluster tasks by k-means on their responses, one additive model per centroid.

    Needs covariates shared by all tasks so that response vectors are aligned.
    """
    if not dataset.shared_covariates:
        raise DataError("k-means baseline needs covariates shared by all tasks")
    if not 1 <= L <= dataset.N:
        raise ValueError(f"L must lie in [1, {dataset.N}]")
    rng = np.random.default_rng(0) if rng is None else rng
    km = KMeans(n_clusters=L, init="k-means++", n_init=1, max_iter=100,
                random_state=int(rng.integers(2**31 - 1)))
    labels = km.fit_predict(dataset.responses)
    bases = make_bases(dataset, num_functions, degree)
    design = build_design(bases, dataset.covariates[0])
    fits = [fit_ridge(design, km.cluster_centers_[c], nu) for c in range(L)]
    return AdditiveBaseline(bases, fits, labels)


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    covariate_means: np.ndarray
    response_mean: float

    def predict(self, covariates) -> np.ndarray:
        X = np.atleast_2d(np.asarray(covariates, dtype=float))
        return self.response_mean + (X - self.covariate_means) @ self.coefficients


def fit_linear(dataset: TaskDataset, nu: float = 1.0) -> list[LinearFit]:
    """Per-task ridge regression on centered raw covariates."""
    if nu < 0:
        raise ValueError("nu must be non-negative")
    out = []
    for m in range(dataset.N):
        X = dataset.covariates[m]
        y = dataset.responses[m]
        xm = X.mean(axis=0)
        Xc = X - xm
        A = Xc.T @ Xc + nu * np.eye(dataset.p)
        beta = np.linalg.lstsq(A, Xc.T @ (y - y.mean()), rcond=None)[0]
        out.append(LinearFit(beta, xm, float(y.mean())))
    return out


def predict_linear(fits, dataset: TaskDataset) -> np.ndarray:
    return np.vstack([f.predict(dataset.covariates[m]) for m, f in enumerate(fits)])


def rmse(predictions, truth) -> float:
    a = np.asarray(predictions, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    return float(np.sqrt(np.mean((a - b) ** 2)))


# -- transfer-function matching ----------------------------------------------

@dataclass(frozen=True)
class TransferMatch:
    """Matching for one covariate.

    ``permutation[l]`` is the estimated function paired with true function
    ``l``; ``sign[l]`` the sign of the least-squares scale; ``errors[l]`` the
    relative L2 error after scaling.
    """

    permutation: np.ndarray
    sign: np.ndarray
    errors: np.ndarray


def _relative_errors(F_true: np.ndarray, F_est: np.ndarray):
    """Scale-aligned relative errors for every (true, estimate) pair."""
    cross = F_true.T @ F_est
    est_sq = np.einsum("ij,ij->j", F_est, F_est)
    true_sq = np.einsum("ij,ij->j", F_true, F_true)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(est_sq > 0, cross / est_sq, 0.0)
    # residuals formed explicitly; the closed form loses digits near a perfect match
    diff = F_true[:, :, None] - scale[None, :, :] * F_est[:, None, :]
    resid = np.einsum("gle,gle->le", diff, diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(true_sq[:, None] > 0, np.sqrt(resid / true_sq[:, None]), 0.0)
    return err, scale


def match_transfer_functions(model, truth: GroundTruth, grid) -> list[TransferMatch]:
    """Pair estimated and true functions per covariate on a grid.

    Each pair is compared after the least-squares scale (possibly negative)
    that best aligns the estimate with the truth; pairs are then chosen by
    optimal assignment on the resulting relative L2 errors.  ``model`` is a
    ``MultiTaskModel`` or a ``(bases, coefficient_matrices)`` pair.
    """
    if isinstance(model, MultiTaskModel):
        bases, coeffs = model.bases, model.base_coefficients
    else:
        bases, coeffs = model
    grid = np.asarray(grid, dtype=float).ravel()
    if len(bases) != len(truth.bases):
        raise ShapeError(f"model has {len(bases)} covariates, truth {len(truth.bases)}")
    out = []
    for j in range(len(bases)):
        F_true = truth.bases[j](grid) @ truth.coefficient_matrices[j]
        F_est = bases[j](grid) @ coeffs[j]
        if F_est.shape[1] < F_true.shape[1]:
            raise ShapeError(f"covariate {j}: fewer estimated than true functions")
        err, scale = _relative_errors(F_true, F_est)
        rows, cols = linear_sum_assignment(err)
        order = np.argsort(rows)
        rows, cols = rows[order], cols[order]
        out.append(TransferMatch(cols, np.where(scale[rows, cols] < 0, -1, 1), err[rows, cols]))
    return out


def mean_match_error(matches) -> float:
    return float(np.mean(np.concatenate([m.errors for m in matches])))


# -- model size --------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityReport:
    """Number of stored scalars, raw and divided by ``N * p``."""

    method: str
    raw: int
    normalized: float


def complexity_report(method: str, N: int, p: int, T: int, L: int, n: int) -> ComplexityReport:
    """Scalars needed to store each model family.

    proposed ``p (T L + 2 N)`` (functions plus one index and one weight per
    task and covariate), lr ``N p``, svr ``N n (p + 1)``, iam ``p T N``,
    kam ``p T L``.
    """
    counts = {
        "proposed": p * (T * L + 2 * N),
        "lr": N * p,
        "svr": N * n * (p + 1),
        "iam": p * T * N,
        "kam": p * T * L,
    }
    key = method.lower()
    if key not in counts:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(counts)}")
    raw = counts[key]
    return ComplexityReport(key, raw, raw / (N * p))


# -- study driver ------------------------------------------------------------

GRID = np.linspace(-1.0, 1.0, 201)


def run_synthetic_trial(spec: SyntheticSpec, config: FitConfig | None = None,
                        baselines=("iam", "kam", "lr"), grid=GRID):
    """Fit the joint model and the baselines on one synthetic draw.

    Returns ``(rows, model)`` where each row has keys method, seed, train_rmse,
    test_rmse, tf_match_error (joint model only) and wall_ms.
    """
    config = FitConfig(L=spec.L, seed=spec.seed) if config is None else config
    train, test, truth = generate_synthetic(spec)
    rows = []

    def record(method, train_pred, test_pred, start, match=None):
        rows.append({
            "method": method, "seed": spec.seed,
            "train_rmse": rmse(train_pred, train.responses),
            "test_rmse": rmse(test_pred, test.responses),
            "tf_match_error": match,
            "wall_ms": 1000.0 * (time.perf_counter() - start),
        })

    start = time.perf_counter()
    model = fit(train, config)
    record("proposed", predict_dataset(model, train), predict_dataset(model, test), start,
           mean_match_error(match_transfer_functions(model, truth, grid)))
    for name in baselines:
        start = time.perf_counter()
        if name == "iam":
            b = fit_iam(train, config.nu, config.num_functions, config.degree)
            record(name, b.predict(train), b.predict(test), start)
        elif name == "kam":
            b = fit_kam(train, spec.L, config.nu, np.random.default_rng(spec.seed),
                        config.num_functions, config.degree)
            record(name, b.predict(train), b.predict(test), start)
        elif name == "lr":
            fits = fit_linear(train, config.nu)
            record(name, predict_linear(fits, train), predict_linear(fits, test), start)
        else:
            raise ValueError(f"unknown baseline {name!r}")
    return rows, model


# -- timing ------------------------------------------------------------------

def time_iteration(N: int, L: int, n: int = 200, p: int = 5, T: int = 32, repeats: int = 5,
                   seed: int = 0, gram: str = "dense") -> float:
    """Median wall time in seconds of one full fit iteration on synthetic data.

    Timing starts from a fixed random dictionary so every repeat does the same
    work, after one untimed warm-up run; ``gram="dense"`` forms the Kronecker
    design explicitly.  The defaults put the ``Z^T Z`` product, whose cost
    grows with ``L^2``, in charge of the total.
    """
    spec = SyntheticSpec(n=n, p=p, N=N, L=L, test_n=1, seed=seed, num_functions=T)
    train, _, _ = generate_synthetic(spec)
    config = FitConfig(L=L, num_functions=T, gram=gram, seed=seed)
    bases = make_bases(train, T, config.degree)
    designs = task_designs(train, bases)
    rng = np.random.default_rng(seed)
    coeffs = [rng.standard_normal((T, L)) for _ in range(p)]
    fit_iteration(train, designs, coeffs, config)  # warm-up, not timed
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fit_iteration(train, designs, coeffs, config)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def scaling_ratios(N: int = 200, L: int = 4, **kwargs) -> dict:
    """Iteration-time ratios when doubling ``N`` and when doubling ``L``."""
    base = time_iteration(N, L, **kwargs)
    return {
        "base_seconds": base,
        "N_ratio": time_iteration(2 * N, L, **kwargs) / base,
        "L_ratio": time_iteration(N, 2 * L, **kwargs) / base,
    }
