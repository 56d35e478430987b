"""Transfer-function subdictionaries and coherence-based recovery certificates.

Each covariate ``j`` owns a block ``D_j = S_j @ B_j`` whose columns (atoms) are
the candidate transfer functions evaluated on the covariate samples.  Coherence
is measured on unit-normalized atoms, separately within blocks (``mu_intra``)
and across blocks (``mu_inter``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ShapeError, ZeroAtom

# atoms with norm below this fraction of the largest atom norm count as zero
ZERO_ATOM_RTOL = 1e-12


@dataclass(frozen=True)
class TransferDictionary:
    """Block dictionary ``[D_1 | ... | D_p]``.

    Attributes
    ----------
    blocks : tuple of ndarray
        Block ``j`` has shape ``(n, L_j)``.
    coefficient_matrices : tuple of ndarray or None
        Spline coefficients ``B_j`` with ``D_j = S_j @ B_j``; ``None`` when the
        dictionary was built from raw atoms.
    atom_norms : tuple of ndarray
        Euclidean norm of every atom, per block.
    source : str
        Free-form note on where the blocks came from.
    """

    blocks: tuple
    coefficient_matrices: tuple | None
    atom_norms: tuple
    source: str = ""

    @property
    def n(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def p(self) -> int:
        return len(self.blocks)

    @property
    def widths(self) -> list[int]:
        return [b.shape[1] for b in self.blocks]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.widths)])

    def flat(self) -> np.ndarray:
        """All atoms side by side, block order preserved."""
        return self._flat

    @cached_property
    def _flat(self) -> np.ndarray:
        return np.hstack(self.blocks)

    @cached_property
    def labels(self) -> np.ndarray:
        """Block index of every column of ``flat()``."""
        return np.repeat(np.arange(self.p), self.widths)

    @cached_property
    def zero_flags(self) -> np.ndarray:
        """Flat boolean mask of numerically zero atoms."""
        norms = np.concatenate(self.atom_norms)
        scale = float(norms.max()) if norms.size else 0.0
        return norms <= ZERO_ATOM_RTOL * max(scale, 1.0)

    def zero_atoms(self) -> list[tuple[int, int]]:
        """``(block, atom)`` pairs whose norm is numerically zero."""
        offsets = self.offsets
        return [(int(self.labels[i]), int(i - offsets[self.labels[i]]))
                for i in np.flatnonzero(self.zero_flags)]

    def zero_mask(self) -> list[np.ndarray]:
        offsets = self.offsets
        return [self.zero_flags[offsets[j]:offsets[j + 1]] for j in range(self.p)]


def from_blocks(blocks, source: str = "raw atoms") -> TransferDictionary:
    """Wrap explicit atom blocks (no spline coefficients) as a dictionary."""
    blocks = tuple(np.asarray(b, dtype=float) for b in blocks)
    if not blocks:
        raise ShapeError("a dictionary needs at least one block")
    n = blocks[0].shape[0]
    for b in blocks:
        if b.ndim != 2 or b.shape[0] != n:
            raise ShapeError("every block must be a 2-d array with the same number of rows")
    norms = tuple(np.linalg.norm(b, axis=0) for b in blocks)
    return TransferDictionary(blocks, None, norms, source)


def assemble(designs, coeffs, source: str = "") -> TransferDictionary:
    """Form ``D_j = S_j @ B_j`` for every covariate.

    Parameters
    ----------
    designs : sequence of ndarray
        Centered spline design blocks ``S_j`` of shape ``(n, T_j)``.
    coeffs : sequence of ndarray
        Coefficient matrices ``B_j`` of shape ``(T_j, L_j)``.

    Zero atoms are allowed here; query them with ``zero_atoms()``.
    """
    if len(designs) != len(coeffs):
        raise ShapeError(f"{len(designs)} design blocks but {len(coeffs)} coefficient matrices")
    blocks = []
    for j, (S, B) in enumerate(zip(designs, coeffs)):
        S = np.asarray(S, dtype=float)
        B = np.asarray(B, dtype=float)
        if S.ndim != 2 or B.ndim != 2 or S.shape[1] != B.shape[0]:
            raise ShapeError(f"block {j}: cannot multiply {S.shape} by {B.shape}")
        blocks.append(S @ B)
    n = {b.shape[0] for b in blocks}
    if len(n) > 1:
        raise ShapeError("design blocks disagree on the number of rows")
    norms = tuple(np.linalg.norm(b, axis=0) for b in blocks)
    return TransferDictionary(tuple(blocks), tuple(np.asarray(B, dtype=float) for B in coeffs),
                              norms, source)


@dataclass(frozen=True)
class CoherenceReport:
    mu_global: float
    mu_intra: float
    mu_inter: float
    omp_condition_max_p: int | None
    bcomp_condition_holds: bool

    def to_json_dict(self) -> dict:
        return {
            "mu_global": self.mu_global,
            "mu_intra": self.mu_intra,
            "mu_inter": self.mu_inter,
            "omp_max_p": self.omp_condition_max_p,
            "bcomp_holds": self.bcomp_condition_holds,
        }


def gram_normalized(dictionary: TransferDictionary) -> np.ndarray:
    """Absolute inner products between unit-normalized atoms."""
    if dictionary.zero_atoms():
        raise ZeroAtom(f"zero atoms at {dictionary.zero_atoms()}")
    flat = dictionary.flat() / np.concatenate(dictionary.atom_norms)
    return np.abs(flat.T @ flat)


def coherence(dictionary: TransferDictionary) -> CoherenceReport:
    """Global, intra-block and inter-block coherence of a dictionary.

    Raises ``ZeroAtom`` if any atom vanishes, since its direction is undefined.
    """
    G = gram_normalized(dictionary)
    labels = dictionary.labels
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(G.shape[0], dtype=bool)
    intra_vals = G[same & off_diag]
    inter_vals = G[~same]
    # rounding can push |<d, d>| of near-duplicates a hair above one
    mu_intra = min(float(intra_vals.max()), 1.0) if intra_vals.size else 0.0
    mu_inter = min(float(inter_vals.max()), 1.0) if inter_vals.size else 0.0
    mu_global = max(mu_intra, mu_inter)
    return CoherenceReport(mu_global, mu_intra, mu_inter, omp_max_sparsity(mu_global),
                           check_bcomp_condition(dictionary.p, mu_intra, mu_inter))


def check_omp_condition(p: int, mu: float) -> bool:
    """Global-coherence recovery condition for OMP: ``p < (1/mu + 1) / 2``.

    ``mu == 0`` (mutually orthogonal atoms) satisfies it for every ``p``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if not 0 <= mu <= 1:
        raise ValueError("mu must lie in [0, 1]")
    if mu == 0:
        return True
    return p < 0.5 * (1.0 / mu + 1.0)


def omp_max_sparsity(mu: float) -> int | None:
    """Largest ``p`` passing ``check_omp_condition``; ``None`` means unbounded."""
    if mu == 0:
        return None
    bound = 0.5 * (1.0 / mu + 1.0)
    return math.ceil(bound) - 1


def check_bcomp_condition(p: int, mu_intra: float, mu_inter: float) -> bool:
    """Block-constrained recovery condition ``mu_intra + 2 (p - 1) mu_inter < 1``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return mu_intra + 2 * (p - 1) * mu_inter < 1
