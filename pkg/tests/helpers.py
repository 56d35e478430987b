"""Random instance generators shared by the test modules."""

import numpy as np

from shared_transfer.dictionary import coherence, from_blocks


def block_dictionary(rng, n, p, L, leak=0.05):
    """Blocks living in nearly orthogonal subspaces.

    Each block spans a random subspace of its own set of orthonormal
    directions, plus a small ``leak`` of shared noise so blocks are not
    exactly orthogonal.
    """
    dim = max(1, min(L, n // p))
    Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    blocks = []
    for j in range(p):
        C = rng.standard_normal((dim, L))
        D = Q[:, j * dim:(j + 1) * dim] @ C + leak * rng.standard_normal((n, L))
        blocks.append(D * rng.uniform(0.5, 2.0, L))
    return from_blocks(blocks)


def condition_instance(rng, n_range=(20, 100), p_range=(2, 6), L_range=(2, 5), max_tries=200):
    """Dictionary satisfying the block recovery condition, with an exact signal.

    Returns ``(dictionary, signal, support, gamma)``.
    """
    for _ in range(max_tries):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        p = int(rng.integers(p_range[0], p_range[1] + 1))
        L = int(rng.integers(L_range[0], L_range[1] + 1))
        d = block_dictionary(rng, n, p, L, leak=rng.uniform(0.0, 0.08))
        if not coherence(d).bcomp_condition_holds:
            continue
        support = [int(rng.integers(L)) for _ in range(p)]
        gamma = rng.uniform(0.5, 2.0, p) * rng.choice([-1.0, 1.0], p)
        y = sum(g * d.blocks[j][:, l] for j, (l, g) in enumerate(zip(support, gamma)))
        return d, y, support, gamma
    raise RuntimeError("no condition-satisfying dictionary found")


def random_instance(rng, n_range=(5, 30), p_range=(1, 4), L_range=(1, 4)):
    """Unstructured Gaussian dictionary and signal."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    p = int(rng.integers(p_range[0], p_range[1] + 1))
    blocks = [rng.standard_normal((n, int(rng.integers(L_range[0], L_range[1] + 1))))
              for _ in range(p)]
    return from_blocks(blocks), rng.standard_normal(n)


def check_pursuit_invariants(d, y, code, tol=1e-8):
    """Assertions every block pursuit result must satisfy."""
    ynorm = np.linalg.norm(y)
    assert all(np.count_nonzero(w) <= 1 for w in code.weights)
    blocks = [k for k, _, _ in code.selected]
    assert len(blocks) == len(set(blocks))
    resid = y - code.reconstruct(d)
    assert abs(np.linalg.norm(resid) - code.residual_norm) <= tol * max(ynorm, 1.0)
    for k, l, _ in code.selected:
        u = d.blocks[k][:, l]
        assert abs(resid @ u) <= tol * ynorm * np.linalg.norm(u) + 1e-300
    norms = code.trace.residual_norms
    assert np.all(np.diff(norms) <= 1e-12 * max(ynorm, 1.0))
