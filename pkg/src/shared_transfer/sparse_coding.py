"""Greedy block-constrained sparse coding.

``bcomp`` is orthogonal matching pursuit restricted so that at most one atom is
taken from each block: once an atom of block ``k`` is selected, block ``k`` leaves
the pool of available blocks.  Coefficients are the least-squares projection of
the signal on the selected atoms, maintained through an incrementally updated
QR factorization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .dictionary import TransferDictionary, from_blocks
from .errors import BudgetExceeded, ShapeError

# relative residual below which pursuit stops before using every block
ZERO_RESIDUAL_RTOL = 1e-12
# a new atom whose component outside the current span is below this fraction
# of its norm is treated as linearly dependent
RANK_RTOL = 1e-10
BRUTE_FORCE_BUDGET = 10**6


@dataclass(frozen=True)
class PursuitStep:
    block: int
    atom: int
    score: float
    residual_norm: float
    rank_deficient: bool = False


@dataclass
class PursuitTrace:
    steps: list = field(default_factory=list)

    @property
    def residual_norms(self) -> np.ndarray:
        return np.array([s.residual_norm for s in self.steps])

    @property
    def rank_deficient(self) -> bool:
        return any(s.rank_deficient for s in self.steps)


@dataclass
class BlockSparseCode:
    """One weight vector per block, each with at most one nonzero.

    ``selected`` lists ``(block, atom, coefficient)`` in selection order.
    """

    weights: list
    selected: list
    residual_norm: float
    trace: PursuitTrace | None = None

    @property
    def p(self) -> int:
        return len(self.weights)

    def support(self) -> list[tuple[int, int]]:
        return sorted((k, l) for k, l, _ in self.selected)

    def reconstruct(self, dictionary: TransferDictionary) -> np.ndarray:
        out = np.zeros(dictionary.n)
        for D, w in zip(dictionary.blocks, self.weights):
            out += D @ w
        return out

    @classmethod
    def empty(cls, widths) -> "BlockSparseCode":
        return cls([np.zeros(L) for L in widths], [], 0.0)

    @classmethod
    def from_selection(cls, widths, selected, residual_norm=0.0) -> "BlockSparseCode":
        weights = [np.zeros(L) for L in widths]
        for k, l, c in selected:
            weights[k][l] = c
        return cls(weights, list(selected), float(residual_norm))


def _prepare(dictionary: TransferDictionary, signal) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(signal, dtype=float).ravel()
    if y.shape[0] != dictionary.n:
        raise ShapeError(f"signal has length {y.shape[0]}, dictionary atoms have {dictionary.n}")
    return y, dictionary.flat()


def _inverse_norms(dictionary: TransferDictionary) -> np.ndarray:
    norms = np.concatenate(dictionary.atom_norms)
    zero = dictionary.zero_flags
    inv = np.zeros_like(norms)
    inv[~zero] = 1.0 / norms[~zero]
    return inv


def _norm(v: np.ndarray) -> float:
    return float(np.sqrt(v @ v))


def _pursuit_single(flat, y, inv_norms, labels, n_steps, exclusive_blocks):
    """Unbatched pursuit loop; also the fallback for rank-deficient selections."""
    n = flat.shape[0]
    y_norm = _norm(y)
    stop = ZERO_RESIDUAL_RTOL * y_norm
    eligible = inv_norms > 0
    Q = np.zeros((n, n_steps))
    R = np.zeros((n_steps, n_steps))
    rank = 0
    chosen: list[int] = []
    trace = PursuitTrace()
    deficient = False
    r = y.copy()
    r_norm = y_norm
    for _ in range(n_steps):
        if y_norm == 0 or r_norm <= stop:
            break
        scores = np.abs(r @ flat) * inv_norms
        scores[~eligible] = -1.0
        idx = int(np.argmax(scores))
        if scores[idx] < 0:
            break
        d = flat[:, idx]
        Qk = Q[:, :rank]
        proj = d @ Qk
        v = d - Qk @ proj
        corr = v @ Qk
        v -= Qk @ corr
        proj += corr
        v_norm = _norm(v)
        step_deficient = v_norm <= RANK_RTOL * _norm(d)
        chosen.append(idx)
        if step_deficient:
            deficient = True
        else:
            R[:rank, rank] = proj
            R[rank, rank] = v_norm
            Q[:, rank] = v / v_norm
            rank += 1
            Qk = Q[:, :rank]
            r = y - Qk @ (y @ Qk)
            r_norm = _norm(r)
        if exclusive_blocks:
            eligible &= labels != labels[idx]
        else:
            eligible[idx] = False
        trace.steps.append(PursuitStep(int(labels[idx]), idx, float(scores[idx]),
                                       r_norm, bool(step_deficient)))
    if not chosen:
        return chosen, np.zeros(0), y.copy(), trace
    U = flat[:, chosen]
    if deficient:
        coef = np.linalg.lstsq(U, y, rcond=None)[0]
    else:
        coef = solve_triangular(R[:rank, :rank], y @ Q[:, :rank], check_finite=False)
    return chosen, coef, y - U @ coef, trace


def _pursuit_batch(F, Y, inv_norms, labels, n_steps, exclusive_blocks):
    """Pursuit on ``N`` signals at once.

    ``F`` has shape ``(N, n, K)`` (one atom matrix per signal), ``Y`` is
    ``(N, n)`` and ``inv_norms`` is ``(N, K)`` with zeros marking atoms that
    must not be chosen.  Selection is the first maximum of the normalized
    correlation, i.e. the smallest (block, atom) index wins ties.  Signals that
    hit a linearly dependent atom are redone with the unbatched loop.
    """
    N, n, K = F.shape
    rows = np.arange(N)
    y_norm = np.sqrt(np.einsum("mi,mi->m", Y, Y))
    stop = ZERO_RESIDUAL_RTOL * y_norm
    eligible = inv_norms > 0
    Q = np.zeros((N, n, n_steps))
    Rm = np.zeros((N, n_steps, n_steps))
    chosen = np.full((N, n_steps), -1, dtype=int)
    scores_hist = np.zeros((N, n_steps))
    rnorm_hist = np.zeros((N, n_steps))
    active = y_norm > 0
    deficient = np.zeros(N, dtype=bool)
    R = Y.copy()
    r_norm = y_norm.copy()
    for step in range(n_steps):
        active &= r_norm > stop
        if not active.any():
            break
        scores = np.abs(np.matmul(R[:, None, :], F)[:, 0, :]) * inv_norms
        scores[~eligible] = -1.0
        idx = np.argmax(scores, axis=1)
        best = scores[rows, idx]
        active &= best >= 0
        d = F[rows, :, idx]
        Qk = Q[:, :, :step]
        proj = np.matmul(d[:, None, :], Qk)[:, 0, :]
        v = d - np.matmul(Qk, proj[:, :, None])[:, :, 0]
        corr = np.matmul(v[:, None, :], Qk)[:, 0, :]
        v -= np.matmul(Qk, corr[:, :, None])[:, :, 0]
        proj += corr
        v_norm = np.sqrt(np.einsum("mi,mi->m", v, v))
        d_norm = np.sqrt(np.einsum("mi,mi->m", d, d))
        deficient |= active & (v_norm <= RANK_RTOL * d_norm)
        upd = active & ~deficient
        Rm[upd, :step, step] = proj[upd]
        Rm[upd, step, step] = v_norm[upd]
        Q[upd, :, step] = v[upd] / v_norm[upd, None]
        Qk = Q[upd, :, : step + 1]
        Yu = Y[upd]
        coef = np.matmul(Yu[:, None, :], Qk)[:, 0, :]
        R[upd] = Yu - np.matmul(Qk, coef[:, :, None])[:, :, 0]
        r_norm[upd] = np.sqrt(np.einsum("mi,mi->m", R[upd], R[upd]))
        chosen[active, step] = idx[active]
        scores_hist[active, step] = best[active]
        rnorm_hist[active, step] = r_norm[active]
        if exclusive_blocks:
            eligible &= ~(active[:, None] & (labels[None, :] == labels[idx][:, None]))
        else:
            eligible[rows[active], idx[active]] = False

    results = []
    for m in range(N):
        if deficient[m]:
            results.append(_pursuit_single(F[m], Y[m], inv_norms[m], labels, n_steps,
                                           exclusive_blocks))
            continue
        picks = [int(i) for i in chosen[m] if i >= 0]
        k = len(picks)
        trace = PursuitTrace([PursuitStep(int(labels[i]), i, float(scores_hist[m, s]),
                                          float(rnorm_hist[m, s])) for s, i in enumerate(picks)])
        if k == 0:
            results.append((picks, np.zeros(0), Y[m].copy(), trace))
            continue
        coef = solve_triangular(Rm[m, :k, :k], Y[m] @ Q[m, :, :k], check_finite=False)
        results.append((picks, coef, Y[m] - F[m][:, picks] @ coef, trace))
    return results


def _to_block_code(dictionary_widths, offsets, labels, result) -> BlockSparseCode:
    chosen, coef, resid, trace = result
    selected = []
    for idx, c in zip(chosen, coef):
        k = int(labels[idx])
        selected.append((k, idx - int(offsets[k]), float(c)))
    # report atoms by their index inside the block
    trace.steps = [PursuitStep(k, l, s.score, s.residual_norm, s.rank_deficient)
                   for s, (k, l, _) in zip(trace.steps, selected)]
    code = BlockSparseCode.from_selection(dictionary_widths, selected, _norm(resid))
    code.trace = trace
    return code


def bcomp(dictionary: TransferDictionary, signal) -> BlockSparseCode:
    """Block-constrained orthogonal matching pursuit.

    At every step the atom maximizing ``|<r, d>| / ||d||`` over blocks not yet
    used is added, and the residual is recomputed by orthogonal projection of the
    signal onto all selected atoms.  Pursuit stops after one atom per block, or
    earlier once the residual vanishes.  Zero atoms are never selected.
    """
    y, _ = _prepare(dictionary, signal)
    return bcomp_many([dictionary], y[None, :])[0]


def bcomp_many(dictionaries, signals) -> list[BlockSparseCode]:
    """``bcomp`` for many signals, each with its own (same-shaped) dictionary.

    ``dictionaries`` may hold the same object repeatedly.  Results are identical
    to running ``bcomp`` on each pair.
    """
    Y = np.atleast_2d(np.asarray(signals, dtype=float))
    if len(dictionaries) != Y.shape[0]:
        raise ShapeError(f"{len(dictionaries)} dictionaries for {Y.shape[0]} signals")
    first = dictionaries[0]
    for d in dictionaries:
        if d.widths != first.widths or d.n != first.n:
            raise ShapeError("all dictionaries must share block widths and signal length")
    if Y.shape[1] != first.n:
        raise ShapeError(f"signals have length {Y.shape[1]}, dictionary atoms have {first.n}")
    F = np.stack([d.flat() for d in dictionaries])
    inv = np.stack([_inverse_norms(d) for d in dictionaries])
    results = _pursuit_batch(F, Y, inv, first.labels, first.p, exclusive_blocks=True)
    offsets = first.offsets
    return [_to_block_code(first.widths, offsets, first.labels, r) for r in results]


@dataclass
class SparseCode:
    """Unstructured sparse code over a flat atom matrix."""

    coefficients: np.ndarray
    support: list
    residual_norm: float
    trace: PursuitTrace | None = None


def omp(atoms, signal, sparsity: int) -> SparseCode:
    """Plain orthogonal matching pursuit with normalized-correlation selection."""
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim != 2:
        raise ShapeError("atoms must be a 2-d array")
    d = from_blocks([atoms])
    y, flat = _prepare(d, signal)
    labels = np.arange(flat.shape[1])
    (chosen, coef, resid, trace), = _pursuit_batch(
        flat[None], y[None], _inverse_norms(d)[None], labels,
        min(sparsity, flat.shape[1]), exclusive_blocks=False)
    x = np.zeros(flat.shape[1])
    x[chosen] = coef
    return SparseCode(x, list(chosen), float(np.linalg.norm(resid)), trace)


def augment_signed(dictionary: TransferDictionary) -> TransferDictionary:
    """Append the negation of every atom to its block: ``D_j -> [D_j, -D_j]``."""
    blocks = tuple(np.hstack([D, -D]) for D in dictionary.blocks)
    norms = tuple(np.concatenate([nrm, nrm]) for nrm in dictionary.atom_norms)
    coeffs = None
    if dictionary.coefficient_matrices is not None:
        coeffs = tuple(np.hstack([B, -B]) for B in dictionary.coefficient_matrices)
    return TransferDictionary(blocks, coeffs, norms, dictionary.source + " (sign-augmented)")


def sign_split(weights: np.ndarray) -> np.ndarray:
    """``w -> [max(0, w), max(0, -w)]`` so that ``[D, -D] @ split == D @ w``."""
    w = np.asarray(weights, dtype=float)
    return np.concatenate([np.maximum(w, 0.0), np.maximum(-w, 0.0)])


def fold_signed(weights: np.ndarray) -> np.ndarray:
    """Inverse of the augmentation: weights on ``[D, -D]`` to signed weights on ``D``."""
    w = np.asarray(weights, dtype=float)
    half = w.shape[0] // 2
    return w[:half] - w[half:]


def brute_force_block_code(dictionary: TransferDictionary, signal,
                           budget: int = BRUTE_FORCE_BUDGET) -> BlockSparseCode:
    """Exhaustive search over all one-atom-per-block supports.

    Returns the least-squares code with the smallest residual; ties go to the
    lexicographically smallest support.  Intended as a test oracle.
    """
    y, _ = _prepare(dictionary, signal)
    widths = dictionary.widths
    total = int(np.prod(widths, dtype=float))
    if total > budget:
        raise BudgetExceeded(f"{total} supports exceed the budget of {budget}")
    best = None
    for support in itertools.product(*(range(L) for L in widths)):
        U = np.column_stack([dictionary.blocks[k][:, l] for k, l in enumerate(support)])
        coef = np.linalg.lstsq(U, y, rcond=None)[0]
        res = float(np.linalg.norm(y - U @ coef))
        if best is None or res < best[0]:
            best = (res, support, coef)
    res, support, coef = best
    selected = [(k, l, float(c)) for k, (l, c) in enumerate(zip(support, coef))]
    return BlockSparseCode.from_selection(widths, selected, res)
