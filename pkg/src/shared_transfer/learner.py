"""Alternating fit of multi-task additive models with shared transfer functions.

Every task ``m`` is modeled as

    y_m = mean_m + sum_j S_j^(m) @ B_j @ lam_j^(m) + noise

where ``S_j^(m)`` is the centered spline design of covariate ``j`` for that task,
``B_j`` holds the ``L_j`` candidate transfer functions of covariate ``j`` (one per
column, shared by all tasks) and ``lam_j^(m)`` has at most one nonzero entry.

The fit alternates between block-constrained pursuit for the weights (one
independent problem per task) and a ridge solve for the stacked spline
coefficients.  Weights are sign-free during the iterations; at the end every
``B_j`` is doubled to ``[B_j, -B_j]`` so that all weights become non-negative.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dictionary import assemble
from .errors import DataError, ShapeError
from .sparse_coding import BlockSparseCode, bcomp_many, sign_split
from .splines import (DEFAULT_DEGREE, DEFAULT_NUM_FUNCTIONS, DesignMatrix, SplineBasis,
                      build_design, make_basis, solve_spd)

logger = logging.getLogger(__name__)

THREADS_ENV = "SHARED_TRANSFER_THREADS"
# above this many entries in Z the normal equations are accumulated blockwise
DENSE_Z_MAX_ENTRIES = 2_000_000
# rows of Z are formed in chunks of about this many entries
DENSE_CHUNK_ENTRIES = 1_000_000


@dataclass(frozen=True)
class FitConfig:
    """Hyper-parameters of the alternating fit.

    ``L`` is either one integer used for every covariate or one value per
    covariate.  ``gram`` selects how ``Z^T Z`` is formed: ``"dense"``
    multiplies out explicit Kronecker rows (chunk by chunk), ``"blocked"`` accumulates it task by task
    from per-task spline Gram matrices, ``"auto"`` picks by size.

    ``init`` is ``"random"`` (iid normal ``B_j``), ``"spectral"`` (see
    ``spectral_init``; needs shared covariates) or ``"auto"``, which uses the
    spectral start whenever it is well posed.  ``refine_codes`` follows every
    pursuit with single-block swap moves (see ``refine_codes``).
    """

    L: int | tuple = 3
    nu: float = 1.0
    max_iterations: int = 30
    rel_objective_tol: float = 1e-6
    seed: int = 0
    repair_empty: bool = True
    num_functions: int = DEFAULT_NUM_FUNCTIONS
    degree: int = DEFAULT_DEGREE
    gram: str = "auto"
    threads: int = 1
    init: str = "auto"
    refine_codes: bool = True

    def __post_init__(self):
        if isinstance(self.L, (list, tuple)):
            object.__setattr__(self, "L", tuple(int(v) for v in self.L))
            if any(v < 1 for v in self.L):
                raise ValueError("every L_j must be >= 1")
        elif int(self.L) < 1:
            raise ValueError("L must be >= 1")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rel_objective_tol < 0:
            raise ValueError("rel_objective_tol must be >= 0")
        if self.gram not in ("auto", "dense", "blocked"):
            raise ValueError(f"unknown gram strategy {self.gram!r}")
        if self.init not in ("auto", "spectral", "random"):
            raise ValueError(f"unknown init {self.init!r}")

    def widths(self, p: int) -> list[int]:
        if isinstance(self.L, tuple):
            if len(self.L) != p:
                raise ShapeError(f"config has {len(self.L)} L values for {p} covariates")
            return list(self.L)
        return [int(self.L)] * p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["L"] = list(self.L) if isinstance(self.L, tuple) else int(self.L)
        return d


@dataclass
class TaskDataset:
    """Covariates and responses of ``N`` tasks sharing ``n`` and ``p``.

    Attributes
    ----------
    covariates : ndarray, shape (N, n, p)
    responses : ndarray, shape (N, n)
        Raw (uncentered) responses.
    task_ids : list of str
    shared_covariates : bool
        True when every task observes the same covariate matrix.
    """

    covariates: np.ndarray
    responses: np.ndarray
    task_ids: list
    shared_covariates: bool = False
    covariate_names: list | None = None

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        Y = np.asarray(self.responses, dtype=float)
        if X.ndim != 3 or Y.ndim != 2 or X.shape[:2] != Y.shape:
            raise ShapeError(f"covariates {X.shape} and responses {Y.shape} do not agree")
        if len(self.task_ids) != X.shape[0]:
            raise ShapeError(f"{len(self.task_ids)} task ids for {X.shape[0]} tasks")
        if not np.all(np.isfinite(Y)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(Y), axis=1))[0])
            raise DataError(f"task {self.task_ids[bad]!r} has non-finite responses")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates contain non-finite values")
        self.covariates, self.responses = X, Y
        self.task_ids = [str(t) for t in self.task_ids]
        if self.covariate_names is None:
            self.covariate_names = [f"x{j + 1}" for j in range(X.shape[2])]

    @classmethod
    def from_shared(cls, covariates, responses, task_ids=None, covariate_names=None):
        """Build a dataset where all tasks observe the same ``(n, p)`` covariates."""
        X = np.asarray(covariates, dtype=float)
        Y = np.atleast_2d(np.asarray(responses, dtype=float))
        ids = task_ids if task_ids is not None else [str(m) for m in range(Y.shape[0])]
        return cls(np.broadcast_to(X, (Y.shape[0],) + X.shape).copy(), Y, list(ids),
                   True, covariate_names)

    @property
    def N(self) -> int:
        return self.responses.shape[0]

    @property
    def n(self) -> int:
        return self.responses.shape[1]

    @property
    def p(self) -> int:
        return self.covariates.shape[2]

    @property
    def means(self) -> np.ndarray:
        return self.responses.mean(axis=1)

    @property
    def centered(self) -> np.ndarray:
        return self.responses - self.means[:, None]

    def subset(self, tasks) -> "TaskDataset":
        tasks = list(tasks)
        return TaskDataset(self.covariates[tasks], self.responses[tasks],
                           [self.task_ids[m] for m in tasks], self.shared_covariates,
                           self.covariate_names)


@dataclass
class MultiTaskModel:
    """Fitted model.

    ``coefficient_matrices`` are the final ``B_j``; when ``signed_split`` is set
    they are ``[B_j, -B_j]`` and every code weight is non-negative.
    ``objective_history`` holds the penalized objective after each spline update
    and ``pre_update_history`` the value just before it (same weights).
    """

    bases: list
    coefficient_matrices: list
    codes: list
    config: FitConfig
    intercepts: np.ndarray
    task_ids: list
    objective_history: list = field(default_factory=list)
    pre_update_history: list = field(default_factory=list)
    signed_split: bool = True
    covariate_names: list | None = None
    repairs: int = 0

    @property
    def p(self) -> int:
        return len(self.bases)

    @property
    def base_coefficients(self) -> list:
        """Coefficient matrices before the sign split (used by the penalty)."""
        if not self.signed_split:
            return self.coefficient_matrices
        return [B[:, : B.shape[1] // 2] for B in self.coefficient_matrices]

    @property
    def non_monotone_iterations(self) -> int:
        """Iterations whose post-update objective exceeded the previous one."""
        h = np.asarray(self.objective_history)
        return int(np.sum(np.diff(h) > 0))

    def task_index(self, task) -> int:
        if isinstance(task, (int, np.integer)):
            return int(task)
        return self.task_ids.index(str(task))

    def transfer_function(self, j: int, l: int, z) -> np.ndarray:
        """Evaluate candidate function ``l`` of covariate ``j`` at ``z``."""
        return self.bases[j](z) @ self.coefficient_matrices[j][:, l]

    def predict_task(self, task, covariates) -> np.ndarray:
        m = self.task_index(task)
        return predict(self, covariates, self.codes[m], self.intercepts[m])


@dataclass
class FitState:
    """Coefficients, sign-free codes and task designs mid-iteration."""

    coefficients: list
    codes: list
    designs: list


# -- building blocks ---------------------------------------------------------

def make_bases(dataset: TaskDataset, num_functions: int = DEFAULT_NUM_FUNCTIONS,
               degree: int = DEFAULT_DEGREE) -> list[SplineBasis]:
    """One basis per covariate, centered over the training covariate values."""
    bases = []
    for j in range(dataset.p):
        if dataset.shared_covariates:
            sample = dataset.covariates[0, :, j]
        else:
            sample = dataset.covariates[:, :, j].ravel()
        bases.append(make_basis(sample, num_functions, degree, covariate_index=j))
    return bases


def task_designs(dataset: TaskDataset, bases) -> list[DesignMatrix]:
    """Per-task design matrices; shared covariates reuse one object."""
    if dataset.shared_covariates:
        design = build_design(bases, dataset.covariates[0])
        return [design] * dataset.N
    return [build_design(bases, dataset.covariates[m]) for m in range(dataset.N)]


def init_coefficients(config: FitConfig, bases, rng: np.random.Generator) -> list[np.ndarray]:
    """Draw every ``B_j`` (``T_j x L_j``) with iid standard normal entries."""
    widths = config.widths(len(bases))
    return [rng.standard_normal((basis.num_functions, L)) for basis, L in zip(bases, widths)]


def _unit_lines(A: np.ndarray, L: int, rng: np.random.Generator, restarts: int = 5,
                max_iter: int = 50) -> np.ndarray:
    """Fit ``L`` lines through the origin to the columns of ``A``.

    Each column is assigned to the line it has the largest squared projection
    on, and each line is refit as the top singular direction of its members
    (k-means with lines for centers, sign and scale free).  Seeding picks
    columns with probability proportional to their unexplained energy.  The
    best of ``restarts`` runs is returned as unit columns of a ``d x L`` matrix.
    """
    d, count = A.shape
    energy = np.einsum("ij,ij->j", A, A)
    if count == 0 or energy.sum() <= 0:
        U = rng.standard_normal((d, L))
        return U / np.linalg.norm(U, axis=0)
    best_cost, best_U = np.inf, None
    for _ in range(restarts):
        first = rng.choice(count, p=energy / energy.sum())
        U = A[:, [first]] / np.sqrt(energy[first])
        while U.shape[1] < L:
            left = np.maximum(energy - np.max((U.T @ A) ** 2, axis=0), 0.0)
            if left.sum() <= 0:
                extra = rng.standard_normal(d)
            else:
                extra = A[:, rng.choice(count, p=left / left.sum())]
            U = np.column_stack([U, extra / np.linalg.norm(extra)])
        labels = None
        for _ in range(max_iter):
            new = np.argmax((U.T @ A) ** 2, axis=0)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for l in range(L):
                members = A[:, labels == l]
                if members.shape[1]:
                    U[:, l] = np.linalg.svd(members, full_matrices=False)[0][:, 0]
        cost = energy.sum() - np.sum(np.max((U.T @ A) ** 2, axis=0))
        if cost < best_cost:
            best_cost, best_U = cost, U.copy()
    return best_U


def spectral_init(dataset: TaskDataset, designs, L_widths, rng: np.random.Generator):
    """Data-driven starting ``B_j`` for tasks that share one design.

    Noise aside, the centered responses of all tasks lie in the span of the
    ``sum_j L_j`` true function vectors.  The directions of that row space
    closest to the columns of ``S_j`` (principal angles) give the span of
    covariate ``j``'s functions.  Regressing every task on all spans jointly
    yields per-task coordinates inside each span, and lines fitted through
    those coordinates give the individual functions, returned with unit RMS.
    """
    design = designs[0]
    if any(d is not design for d in designs):
        raise DataError("spectral initialization needs covariates shared by all tasks")
    Yc = dataset.centered
    n = design.rows
    rank = min(int(sum(L_widths)), n - 1, dataset.N)
    V = np.linalg.svd(Yc, full_matrices=False)[2][:rank].T
    spans = []
    for j, L in enumerate(L_widths):
        u, sv, _ = np.linalg.svd(design.block(j), full_matrices=False)
        Q = u[:, sv > 1e-10 * sv[0]] if sv.size and sv[0] > 0 else u[:, :0]
        a = np.linalg.svd(Q.T @ V, full_matrices=False)[0][:, :L]
        if a.shape[1] < L:
            a = np.column_stack([a, rng.standard_normal((Q.shape[1], L - a.shape[1]))])
        spans.append(Q @ a)
    coords = np.linalg.lstsq(np.hstack(spans), Yc.T, rcond=None)[0]
    out, start = [], 0
    for j, L in enumerate(L_widths):
        dirs = _unit_lines(coords[start:start + L], L, rng)
        start += L
        B = np.linalg.lstsq(design.block(j), spans[j] @ dirs, rcond=None)[0] * np.sqrt(n)
        out.append(B)
    return out


def _use_spectral(config: FitConfig, dataset: TaskDataset, designs, L_widths) -> bool:
    shared = all(d is designs[0] for d in designs)
    if config.init == "spectral":
        return True
    if config.init == "random":
        return False
    # the span estimate needs room for every function plus one spline block
    return shared and sum(L_widths) + max(designs[0].widths) < designs[0].rows


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if threads == 0:
        threads = os.cpu_count() or 1
    return max(1, int(threads))


def _blocks(design: DesignMatrix) -> list[np.ndarray]:
    return [design.block(j) for j in range(len(design.blocks))]


def weights_update(dataset: TaskDataset, designs, coeffs, threads: int | None = 1,
                   shared: bool | None = None) -> list[BlockSparseCode]:
    """Run block-constrained pursuit on every task's centered response.

    Tasks are independent and are processed by a batched kernel, split into
    contiguous chunks across ``threads`` workers.  Each task's arithmetic does
    not depend on the chunking, so the result is the same for any thread count.
    With shared covariates the dictionary is assembled once and reused.
    """
    shared = dataset.shared_covariates if shared is None else shared
    Y = dataset.centered
    if shared:
        d = assemble(_blocks(designs[0]), coeffs, source="shared design")
        dicts = [d] * dataset.N
    else:
        dicts = [assemble(_blocks(designs[m]), coeffs, source=f"task {dataset.task_ids[m]}")
                 for m in range(dataset.N)]
    workers = min(_resolve_threads(threads), dataset.N)
    if workers == 1:
        return bcomp_many(dicts, Y)
    bounds = np.linspace(0, dataset.N, workers + 1).astype(int)
    chunks = [(dicts[a:b], Y[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda c: bcomp_many(*c), chunks))
    return [code for part in parts for code in part]


def coefficient_layout(T_widths, L_widths) -> np.ndarray:
    """Offsets of ``vec(B_j)`` inside the stacked coefficient vector ``b``."""
    sizes = [T * L for T, L in zip(T_widths, L_widths)]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def pack(coeffs) -> np.ndarray:
    """Stack column-major ``vec(B_j)`` for all covariates."""
    return np.concatenate([np.asarray(B).ravel(order="F") for B in coeffs])


def unpack(b: np.ndarray, T_widths, L_widths) -> list[np.ndarray]:
    offs = coefficient_layout(T_widths, L_widths)
    return [b[offs[j]:offs[j + 1]].reshape((T, L), order="F").copy()
            for j, (T, L) in enumerate(zip(T_widths, L_widths))]


def task_system(design: DesignMatrix, code: BlockSparseCode) -> np.ndarray:
    """``Z^(m) = [lam_1^T kron S_1, ..., lam_p^T kron S_p]`` for one task."""
    parts = [np.kron(lam[None, :], design.block(j)) for j, lam in enumerate(code.weights)]
    return np.hstack(parts)


def _kronecker_rows(codes, designs, T_widths, offs, n: int) -> np.ndarray:
    """Stacked ``Z^(m)`` of the given tasks.

    Only the selected ``(j, l)`` column groups of a task are nonzero, so those
    blocks are written into a zero matrix instead of forming every Kronecker
    product.
    """
    Z = np.zeros((n * len(codes), int(offs[-1])))
    for m, (design, code) in enumerate(zip(designs, codes)):
        rows = slice(m * n, (m + 1) * n)
        for k, l, c in code.selected:
            if c != 0.0:
                start = offs[k] + l * T_widths[k]
                Z[rows, start:start + T_widths[k]] = c * design.block(k)
    return Z


def build_vectorized_system(dataset: TaskDataset, codes, designs):
    """Materialize the stacked Kronecker design ``Z`` and ``vec(Y)``.

    Returns ``Z`` of shape ``(n N, sum_j T_j L_j)`` and the stacked centered
    responses, so that ``Z @ pack(B)`` equals the stacked model fits.
    """
    if len(codes) != dataset.N or len(designs) != dataset.N:
        raise ShapeError(f"expected {dataset.N} codes and designs")
    T_widths = designs[0].widths
    L_widths = [len(w) for w in codes[0].weights]
    offs = coefficient_layout(T_widths, L_widths)
    return _kronecker_rows(codes, designs, T_widths, offs, dataset.n), dataset.centered.ravel()


def weight_matrix(codes, L_widths) -> np.ndarray:
    """Task-by-function matrix of code weights, columns in ``(j, l)`` order."""
    W = np.zeros((len(codes), int(sum(L_widths))))
    for m, code in enumerate(codes):
        if code.weights:
            W[m] = np.concatenate(code.weights)
    return W


def _design_groups(designs):
    """Group task indices by design object, in order of first appearance."""
    groups: dict[int, tuple] = {}
    for m, design in enumerate(designs):
        key = id(design)
        if key not in groups:
            groups[key] = (design, [])
        groups[key][1].append(m)
    return list(groups.values())


def normal_equations(dataset: TaskDataset, codes, designs, L_widths, gram: str = "blocked"):
    """``Z^T Z`` and ``Z^T vec(Y)`` for the spline-coefficient update.

    The blocked strategy never forms ``Z``.  For tasks sharing a design ``S``
    with Gram blocks ``G_jj' = S_j^T S_j'``, the ``(j, j')`` block of ``Z^T Z``
    is ``kron(W_j^T W_j', G_jj')`` where ``W_j`` holds the tasks' weights on
    the functions of covariate ``j``.
    """
    T_widths = designs[0].widths
    offs = coefficient_layout(T_widths, L_widths)
    dim = int(offs[-1])
    Y = dataset.centered
    if gram == "dense":
        # explicit Kronecker rows, a cache-sized chunk of tasks at a time
        chunk = max(1, DENSE_CHUNK_ENTRIES // (dataset.n * dim))
        ZtZ = np.zeros((dim, dim))
        Zty = np.zeros(dim)
        for a in range(0, dataset.N, chunk):
            b = min(a + chunk, dataset.N)
            Z = _kronecker_rows(codes[a:b], designs[a:b], T_widths, offs, dataset.n)
            ZtZ += Z.T @ Z
            Zty += Z.T @ Y[a:b].ravel()
        return ZtZ, Zty
    W = weight_matrix(codes, L_widths)
    l_offs = np.concatenate([[0], np.cumsum(L_widths)]).astype(int)
    t_offs = np.concatenate([[0], np.cumsum(T_widths)]).astype(int)
    p = len(T_widths)
    ZtZ = np.zeros((dim, dim))
    Zty = np.zeros(dim)
    for design, tasks in _design_groups(designs):
        S = design.values
        G = S.T @ S
        Wg = W[tasks]
        M = Wg.T @ Wg
        SY = S.T @ Y[tasks].T @ Wg
        for j in range(p):
            rj, tj, lj = slice(offs[j], offs[j + 1]), slice(t_offs[j], t_offs[j + 1]), \
                slice(l_offs[j], l_offs[j + 1])
            Zty[rj] += SY[tj, lj].ravel(order="F")
            for k in range(j, p):
                rk, tk, lk = slice(offs[k], offs[k + 1]), slice(t_offs[k], t_offs[k + 1]), \
                    slice(l_offs[k], l_offs[k + 1])
                blk = np.kron(M[lj, lk], G[tj, tk])
                ZtZ[rj, rk] += blk
                if k != j:
                    ZtZ[rk, rj] += blk.T
    return ZtZ, Zty


def solve_spline_coefficients(ZtZ: np.ndarray, Zty: np.ndarray, nu: float) -> np.ndarray:
    A = ZtZ.copy()
    A[np.diag_indices_from(A)] += nu
    return solve_spd(A, Zty, allow_jitter=True)


def spline_update(Z: np.ndarray, y_stacked: np.ndarray, nu: float) -> np.ndarray:
    """Closed-form ridge solution ``(Z^T Z + nu I)^{-1} Z^T y``."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    return solve_spline_coefficients(Z.T @ Z, Z.T @ y_stacked, nu)


def code_fit(code: BlockSparseCode, design: DesignMatrix, coeffs) -> np.ndarray:
    """``sum_j S_j B_j lam_j`` for one task."""
    out = np.zeros(design.rows)
    for k, l, c in code.selected:
        if c != 0.0:
            out += c * (design.block(k) @ coeffs[k][:, l])
    return out


def residuals(dataset: TaskDataset, designs, coeffs, codes) -> np.ndarray:
    """Centered responses minus the coded fits, one row per task."""
    L_widths = [B.shape[1] for B in coeffs]
    W = weight_matrix(codes, L_widths)
    l_offs = np.concatenate([[0], np.cumsum(L_widths)]).astype(int)
    R = dataset.centered.copy()
    for design, tasks in _design_groups(designs):
        # per-task spline coefficients sum_l lam_jl B_j[:, l], stacked over j
        beta = np.vstack([coeffs[j] @ W[tasks, l_offs[j]:l_offs[j + 1]].T
                          for j in range(len(coeffs))])
        R[tasks] -= (design.values @ beta).T
    return R


def penalized_objective(dataset, designs, coeffs, codes, nu: float) -> float:
    R = residuals(dataset, designs, coeffs, codes)
    return float(np.sum(R * R) + nu * sum(float(np.sum(B * B)) for B in coeffs))


def objective(state, dataset: TaskDataset, nu: float | None = None) -> float:
    """Penalized sum of squares of a model or an intermediate ``FitState``.

    ``sum_m ||y_m - sum_j S_j B_j lam_j||^2 + nu sum_j ||B_j||_F^2`` on centered
    responses.  For a sign-split model the penalty uses the undoubled ``B_j``.
    """
    if isinstance(state, MultiTaskModel):
        designs = task_designs(dataset, state.bases)
        nu = state.config.nu if nu is None else nu
        R = residuals(dataset, designs, state.coefficient_matrices, state.codes)
        return float(np.sum(R * R) + nu * sum(float(np.sum(B * B))
                                              for B in state.base_coefficients))
    if nu is None:
        raise ValueError("nu is required for a FitState")
    return penalized_objective(dataset, state.designs, state.coefficients, state.codes, nu)


# -- code refinement, repair and finalization ----------------------------------

# a swap must lower the residual energy by this fraction of ||y||^2
REFINE_RTOL = 1e-9


def _solve_stack(A, B):
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        return np.matmul(np.linalg.pinv(A), B)


def _swap_search(G, H, yy, usable, cols, blocks, offs, L_widths, max_sweeps):
    """Greedy single-block swaps for tasks sharing one dictionary; edits ``cols``.

    ``G`` is the atom Gram matrix, ``H`` holds per-task atom correlations and
    ``yy`` the squared signal norms.  With the other selected atoms ``O`` held
    fixed, replacing block ``i``'s atom by ``a`` leaves residual energy
    ``||r_O||^2 - <a_perp, r_O>^2 / ||a_perp||^2`` where ``a_perp`` is ``a``
    projected off ``O``; all candidates of a block share one solve with ``G_OO``.
    """
    tol = REFINE_RTOL * yy
    rows = np.arange(cols.shape[0])
    diag = np.diag(G)
    for _ in range(max_sweeps):
        changed = False
        for i, k in enumerate(blocks):
            if L_widths[k] < 2:
                continue
            cand = offs[k] + np.arange(L_widths[k])
            others = np.delete(cols, i, axis=1)
            h_o = np.take_along_axis(H, others, axis=1)
            G_oc = G[others[:, :, None], cand[None, None, :]]
            if others.shape[1]:
                G_oo = G[others[:, :, None], others[:, None, :]]
                sol = _solve_stack(G_oo, np.concatenate([h_o[:, :, None], G_oc], axis=2))
            else:
                sol = np.zeros((cols.shape[0], 0, 1 + cand.size))
            base = yy - np.einsum("mi,mi->m", h_o, sol[:, :, 0])
            num = H[:, cand] - np.einsum("mic,mi->mc", G_oc, sol[:, :, 0])
            den = diag[cand][None, :] - np.einsum("mic,mic->mc", G_oc, sol[:, :, 1:])
            live = den > 1e-12 * diag[cand][None, :]
            gain = np.where(live, num ** 2 / np.where(live, den, 1.0), 0.0)
            val = base[:, None] - gain
            val[:, ~usable[cand]] = np.inf
            current = val[rows, cols[:, i] - offs[k]]
            best = np.argmin(val, axis=1)
            better = val[rows, best] < current - tol
            if better.any():
                cols[better, i] = cand[best[better]]
                changed = True
        if not changed:
            break


def refine_codes(dataset: TaskDataset, designs, coeffs, codes, max_sweeps: int = 10):
    """Improve pursuit codes by swapping one selected atom at a time.

    For every task and every selected block, all nonzero atoms of that block
    are tried with the other selections fixed and the weights refit by least
    squares; the best is kept if it lowers the residual.  Sweeps over the
    blocks repeat until nothing changes.  The residual never grows, and codes
    that are not changed are returned as they are.

    Returns ``(codes, n_swaps)``.
    """
    L_widths = [B.shape[1] for B in coeffs]
    offs = np.concatenate([[0], np.cumsum(L_widths)]).astype(int)
    Y = dataset.centered
    out = list(codes)
    swaps = 0
    for design, group in _design_groups(designs):
        d = assemble(_blocks(design), coeffs)
        F = d.flat()
        G = F.T @ F
        usable = ~d.zero_flags
        by_blocks: dict[tuple, list] = {}
        for m in group:
            key = tuple(sorted(k for k, _, _ in codes[m].selected))
            by_blocks.setdefault(key, []).append(m)
        for blocks, tasks in by_blocks.items():
            if not blocks:
                continue
            tasks = np.array(tasks)
            cols = np.array([[offs[k] + l for k, l, _ in sorted(codes[m].selected)]
                             for m in tasks])
            start = cols.copy()
            Yt = Y[tasks]
            _swap_search(G, Yt @ F, np.einsum("mi,mi->m", Yt, Yt), usable, cols, blocks,
                         offs, L_widths, max_sweeps)
            for row, m in enumerate(tasks):
                if np.array_equal(cols[row], start[row]):
                    continue
                swaps += int(np.sum(cols[row] != start[row]))
                A = F[:, cols[row]]
                coef = np.linalg.lstsq(A, Y[m], rcond=None)[0]
                by_block = {k: (int(c - offs[k]), float(w))
                            for k, c, w in zip(blocks, cols[row], coef)}
                # keep the pursuit's selection order
                selected = [(k, *by_block[k]) for k, _, _ in codes[m].selected]
                code = BlockSparseCode.from_selection(L_widths, selected,
                                                      float(np.linalg.norm(Y[m] - A @ coef)))
                code.trace = codes[m].trace
                out[m] = code
    return out, swaps


def usage_counts(codes, L_widths) -> list[np.ndarray]:
    counts = [np.zeros(L, dtype=int) for L in L_widths]
    for code in codes:
        for k, l, c in code.selected:
            if c != 0.0:
                counts[k][l] += 1
    return counts


def _refit_task(design: DesignMatrix, coeffs, code: BlockSparseCode, j: int, l: int,
                beta: np.ndarray, y: np.ndarray):
    """Swap block ``j`` of a code to atom ``(j, l)`` with ``B_j[:, l] = beta``
    and re-solve all of the task's coefficients by least squares."""
    atoms, keys = [], []
    for k, lk, c in code.selected:
        if k == j or c == 0.0:
            continue
        atoms.append(design.block(k) @ coeffs[k][:, lk])
        keys.append((k, lk))
    atoms.append(design.block(j) @ beta)
    keys.append((j, l))
    U = np.column_stack(atoms)
    coef = np.linalg.lstsq(U, y, rcond=None)[0]
    resid = y - U @ coef
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    selected = [(keys[i][0], keys[i][1], float(coef[i])) for i in order]
    widths = [B.shape[1] for B in coeffs]
    return BlockSparseCode.from_selection(widths, selected, np.linalg.norm(resid)), resid


def repair_empty_transfer_functions(dataset: TaskDataset, designs, coeffs, codes,
                                    nu: float, enabled: bool = True):
    """Re-seed candidate functions that no task selected.

    For each unused ``(j, l)`` the tasks are scanned from the largest current
    residual norm down.  A task qualifies unless its current atom in block ``j``
    has no other user.  ``B_j[:, l]`` is refit by ridge regression of the task's
    partial residual (its residual with block ``j``'s contribution added back)
    on ``S_j``; the task then switches block ``j`` to ``(j, l)`` and its
    coefficients are re-solved.  The swap is kept only if the task's residual
    norm does not grow; otherwise the next task is tried.  Each unused function
    gets one pass.

    Returns ``(coeffs, codes, n_repaired)``; inputs are not modified.
    """
    if not enabled:
        return coeffs, codes, 0
    L_widths = [B.shape[1] for B in coeffs]
    counts = usage_counts(codes, L_widths)
    if all(np.all(c > 0) for c in counts):
        return coeffs, codes, 0
    coeffs = [B.copy() for B in coeffs]
    codes = list(codes)
    Y = dataset.centered
    R = residuals(dataset, designs, coeffs, codes)
    norms = np.linalg.norm(R, axis=1)
    attempted = set()
    repaired = 0
    while True:
        pending = [(j, l) for j, c in enumerate(counts) for l in np.flatnonzero(c == 0)
                   if (j, int(l)) not in attempted]
        if not pending:
            break
        j, l = pending[0][0], int(pending[0][1])
        attempted.add((j, l))
        for m in np.argsort(-norms, kind="stable"):
            m = int(m)
            if norms[m] == 0.0:
                break
            current = [(lk, c) for k, lk, c in codes[m].selected if k == j and c != 0.0]
            partial = R[m].copy()
            if current:
                l_old, c_old = current[0]
                if counts[j][l_old] < 2:
                    continue
                partial += c_old * (designs[m].block(j) @ coeffs[j][:, l_old])
            S = designs[m].block(j)
            A = S.T @ S
            A[np.diag_indices_from(A)] += nu
            beta = solve_spd(A, S.T @ partial)
            if not np.any(S @ beta):
                continue
            new_code, new_resid = _refit_task(designs[m], coeffs, codes[m], j, l, beta, Y[m])
            new_norm = float(np.linalg.norm(new_resid))
            if new_norm > norms[m]:
                continue
            coeffs[j][:, l] = beta
            if current:
                counts[j][current[0][0]] -= 1
            counts[j][l] += 1
            codes[m] = new_code
            R[m] = new_resid
            norms[m] = new_norm
            repaired += 1
            logger.debug("repaired function (%d, %d) using task %s", j, l, dataset.task_ids[m])
            break
    return coeffs, codes, repaired


def finalize_nonneg(coeffs, codes):
    """Double each ``B_j`` to ``[B_j, -B_j]`` and split weights by sign."""
    new_coeffs = [np.hstack([B, -B]) for B in coeffs]
    widths = [B.shape[1] for B in new_coeffs]
    new_codes = []
    for code in codes:
        weights = [sign_split(w) for w in code.weights]
        selected = []
        for k, l, c in code.selected:
            if c > 0:
                selected.append((k, l, c))
            elif c < 0:
                selected.append((k, l + coeffs[k].shape[1], -c))
        new = BlockSparseCode.from_selection(widths, selected, code.residual_norm)
        new.weights = weights
        new_codes.append(new)
    return new_coeffs, new_codes


# -- top level ---------------------------------------------------------------

def _gram_strategy(config: FitConfig, dataset: TaskDataset, T_widths, L_widths) -> str:
    if config.gram != "auto":
        return config.gram
    cols = sum(T * L for T, L in zip(T_widths, L_widths))
    return "dense" if dataset.N * dataset.n * cols <= DENSE_Z_MAX_ENTRIES else "blocked"


def fit_iteration(dataset, designs, coeffs, config: FitConfig, shared=None):
    """One weights update (+ repair) followed by one spline update.

    Returns ``(coeffs, codes, objective_before, objective_after, n_repaired)``.
    """
    T_widths = designs[0].widths
    L_widths = [B.shape[1] for B in coeffs]
    codes = weights_update(dataset, designs, coeffs, threads=config.threads, shared=shared)
    if config.refine_codes:
        codes, _ = refine_codes(dataset, designs, coeffs, codes)
    coeffs, codes, repaired = repair_empty_transfer_functions(
        dataset, designs, coeffs, codes, config.nu, enabled=config.repair_empty)
    before = penalized_objective(dataset, designs, coeffs, codes, config.nu)
    ZtZ, Zty = normal_equations(dataset, codes, designs, L_widths,
                                _gram_strategy(config, dataset, T_widths, L_widths))
    coeffs = unpack(solve_spline_coefficients(ZtZ, Zty, config.nu), T_widths, L_widths)
    after = penalized_objective(dataset, designs, coeffs, codes, config.nu)
    return coeffs, codes, before, after, repaired


def fit(dataset: TaskDataset, config: FitConfig = FitConfig(), initial_coefficients=None,
        shared: bool | None = None) -> MultiTaskModel:
    """Fit the shared-transfer-function model.

    Parameters
    ----------
    dataset : TaskDataset
    config : FitConfig
    initial_coefficients : list of ndarray, optional
        Starting ``B_j``; overrides ``config.init``.
    shared : bool, optional
        Override ``dataset.shared_covariates`` (the general per-task path is
        taken when False).

    Returns
    -------
    MultiTaskModel
        With sign-split coefficients and non-negative codes.
    """
    bases = make_bases(dataset, config.num_functions, config.degree)
    if dataset.n <= max(b.num_functions for b in bases):
        warnings.warn(f"n = {dataset.n} does not exceed the basis size; "
                      "spline coefficients are weakly determined", stacklevel=2)
    if shared is not None and shared and not dataset.shared_covariates:
        raise ValueError("cannot force the shared path on non-shared covariates")
    designs = task_designs(dataset, bases)
    L_widths = config.widths(dataset.p)
    rng = np.random.default_rng(config.seed)
    if initial_coefficients is None and _use_spectral(config, dataset, designs, L_widths):
        coeffs = spectral_init(dataset, designs, L_widths, rng)
    elif initial_coefficients is None:
        coeffs = init_coefficients(config, bases, rng)
    else:
        coeffs = [np.array(B, dtype=float) for B in initial_coefficients]
        expected = [(b.num_functions, L) for b, L in zip(bases, config.widths(dataset.p))]
        if [B.shape for B in coeffs] != expected:
            raise ShapeError(f"initial coefficients must have shapes {expected}")

    history, pre_history, repairs = [], [], 0
    codes = None
    for it in range(config.max_iterations):
        coeffs, codes, before, after, repaired = fit_iteration(dataset, designs, coeffs,
                                                              config, shared=shared)
        repairs += repaired
        pre_history.append(before)
        history.append(after)
        logger.info("iteration %d: objective %.6g (before spline update %.6g, %d repairs)",
                    it + 1, after, before, repaired)
        if config.rel_objective_tol > 0 and len(history) > 1:
            prev = history[-2]
            if abs(prev - after) <= config.rel_objective_tol * max(abs(prev), 1e-300):
                break

    final_coeffs, final_codes = finalize_nonneg(coeffs, codes)
    return MultiTaskModel(bases, final_coeffs, final_codes, config, dataset.means.copy(),
                          list(dataset.task_ids), history, pre_history, True,
                          list(dataset.covariate_names), repairs)


def predict(model: MultiTaskModel, task_covariates, code: BlockSparseCode,
            task_mean: float = 0.0) -> np.ndarray:
    """``task_mean + sum_j sum_l lam_jl f_jl(x_j)`` at each row of covariates."""
    X = np.asarray(task_covariates, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.p or code.p != model.p:
        raise ShapeError(f"model has {model.p} covariates, got {X.shape[1]} columns "
                         f"and a code over {code.p} blocks")
    design = build_design(model.bases, X)
    out = np.full(X.shape[0], float(task_mean))
    for j, lam in enumerate(code.weights):
        if np.any(lam):
            out += design.block(j) @ (model.coefficient_matrices[j] @ lam)
    return out


def predict_dataset(model: MultiTaskModel, dataset: TaskDataset) -> np.ndarray:
    """Predictions for every task of a dataset, matched to the model by task id."""
    out = np.empty_like(dataset.responses)
    for m, tid in enumerate(dataset.task_ids):
        out[m] = model.predict_task(tid, dataset.covariates[m])
    return out
