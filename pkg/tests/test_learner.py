import numpy as np
import pytest

from shared_transfer.dataio import model_to_dict
from shared_transfer.dictionary import assemble
from shared_transfer.errors import DataError
from shared_transfer.learner import (FitConfig, FitState, TaskDataset, build_vectorized_system,
                                     finalize_nonneg, fit, init_coefficients, make_bases,
                                     normal_equations, objective, pack, predict, predict_dataset,
                                     refine_codes, repair_empty_transfer_functions, residuals,
                                     spectral_init, spline_update, task_designs, unpack,
                                     usage_counts, weights_update)
from shared_transfer.sparse_coding import BlockSparseCode, bcomp
from shared_transfer.splines import build_design, fit_ridge, make_basis


def random_state(rng, N=6, n=30, p=3, T=6, L=3, shared=True, dense_codes=False):
    """Dataset, designs, coefficients and random block-sparse codes."""
    if shared:
        data = TaskDataset.from_shared(rng.uniform(-1, 1, (n, p)), rng.standard_normal((N, n)))
    else:
        data = TaskDataset(rng.uniform(-1, 1, (N, n, p)), rng.standard_normal((N, n)),
                           [str(m) for m in range(N)])
    bases = make_bases(data, T, 3)
    designs = task_designs(data, bases)
    coeffs = [rng.standard_normal((T, L)) for _ in range(p)]
    codes = []
    for _ in range(N):
        sel = [(j, int(rng.integers(L)), float(rng.standard_normal())) for j in range(p)
               if dense_codes or rng.random() < 0.8]
        codes.append(BlockSparseCode.from_selection([L] * p, sel))
    return data, designs, coeffs, codes


def fits_by_loops(data, designs, coeffs, codes):
    out = np.zeros((data.N, data.n))
    for m in range(data.N):
        for j, lam in enumerate(codes[m].weights):
            for l, c in enumerate(lam):
                out[m] += c * (designs[m].block(j) @ coeffs[j][:, l])
    return out


def test_init_coefficients(rng):
    config = FitConfig(L=(2, 4), seed=5)
    bases = [make_basis(rng.uniform(size=50), 7), make_basis(rng.uniform(size=50), 9)]
    a = init_coefficients(config, bases, np.random.default_rng(5))
    b = init_coefficients(config, bases, np.random.default_rng(5))
    assert [B.shape for B in a] == [(7, 2), (9, 4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    big = init_coefficients(FitConfig(L=1000), [make_basis(rng.uniform(size=50), 10)],
                            np.random.default_rng(0))[0]
    assert abs(big.mean()) < 5 / np.sqrt(big.size)


def test_config_validation():
    for bad in (dict(L=0), dict(nu=0.0), dict(max_iterations=0), dict(gram="x"),
                dict(init="x"), dict(L=(1, 0))):
        with pytest.raises(ValueError):
            FitConfig(**bad)


def test_dataset_rejects_nan():
    Y = np.zeros((2, 5))
    Y[1] = np.nan
    with pytest.raises(DataError):
        TaskDataset(np.zeros((2, 5, 1)), Y, ["a", "b"])


def test_weights_update_single_task(rng):
    data, designs, coeffs, _ = random_state(rng, N=1)
    code, = weights_update(data, designs, coeffs)
    d = assemble([designs[0].block(j) for j in range(data.p)], coeffs)
    one = bcomp(d, data.centered[0])
    assert code.selected == one.selected
    assert code.residual_norm == one.residual_norm


def test_weights_update_shared_equals_per_task(rng):
    data, designs, coeffs, _ = random_state(rng, N=15)
    a = weights_update(data, designs, coeffs, shared=True)
    b = weights_update(data, designs, coeffs, shared=False)
    assert [c.selected for c in a] == [c.selected for c in b]


def test_weights_update_thread_count_invariant(rng):
    data, designs, coeffs, _ = random_state(rng, N=23, shared=False)
    a = weights_update(data, designs, coeffs, threads=1)
    b = weights_update(data, designs, coeffs, threads=4)
    assert [c.selected for c in a] == [c.selected for c in b]


def test_weights_update_zero_responses(rng):
    data, designs, coeffs, _ = random_state(rng)
    zero = TaskDataset.from_shared(data.covariates[0], np.zeros((data.N, data.n)))
    assert all(c.selected == [] for c in weights_update(zero, designs, coeffs))


def test_kronecker_identity(rng):
    for shared in (True, False):
        data, designs, coeffs, codes = random_state(rng, shared=shared)
        Z, y = build_vectorized_system(data, codes, designs)
        direct = fits_by_loops(data, designs, coeffs, codes)
        np.testing.assert_allclose(Z @ pack(coeffs), direct.ravel(), atol=1e-12)
        np.testing.assert_array_equal(y, data.centered.ravel())


def test_kronecker_basis_vector_code(rng):
    data, designs, coeffs, _ = random_state(rng, N=1, p=2, T=5, L=3)
    code = BlockSparseCode.from_selection([3, 3], [(0, 0, 1.0), (1, 0, 1.0)])
    Z, _ = build_vectorized_system(data, [code], designs)
    np.testing.assert_array_equal(Z[:, :5], designs[0].block(0))
    np.testing.assert_array_equal(Z[:, 5:15], 0)
    np.testing.assert_array_equal(Z[:, 15:20], designs[0].block(1))


def test_kronecker_identical_tasks_stack(rng):
    data, designs, coeffs, codes = random_state(rng, N=1)
    two = TaskDataset.from_shared(data.covariates[0], np.vstack([data.responses] * 2))
    Z1, _ = build_vectorized_system(data, codes, designs)
    Z2, _ = build_vectorized_system(two, codes * 2, designs * 2)
    np.testing.assert_array_equal(Z2, np.vstack([Z1, Z1]))


def test_pack_unpack_roundtrip(rng):
    coeffs = [rng.standard_normal((4, 2)), rng.standard_normal((6, 3))]
    back = unpack(pack(coeffs), [4, 6], [2, 3])
    assert all(np.array_equal(a, b) for a, b in zip(coeffs, back))


@pytest.mark.parametrize("shared", [True, False])
def test_blocked_normal_equations_match_dense(rng, shared):
    data, designs, coeffs, codes = random_state(rng, N=9, shared=shared)
    L_widths = [B.shape[1] for B in coeffs]
    Z, y = build_vectorized_system(data, codes, designs)
    dense = normal_equations(data, codes, designs, L_widths, "dense")
    blocked = normal_equations(data, codes, designs, L_widths, "blocked")
    scale = np.abs(Z.T @ Z).max()
    for a, b, ref in zip(dense, blocked, (Z.T @ Z, Z.T @ y)):
        np.testing.assert_allclose(a, ref, atol=1e-12 * scale)
        np.testing.assert_allclose(b, ref, atol=1e-12 * scale)


def test_spline_update_single_task_is_ridge(rng):
    z = rng.uniform(-1, 1, 40)
    basis = make_basis(z, 8, 3)
    S = build_design([basis], z[:, None])
    y = rng.standard_normal(40)
    y -= y.mean()
    b = spline_update(S.values, y, 0.5)
    np.testing.assert_allclose(b, fit_ridge(S, y, 0.5).coefficients, atol=1e-12)
    np.testing.assert_array_equal(spline_update(S.values, np.zeros(40), 0.5), 0)


def test_spline_update_lowers_objective(rng):
    data, designs, coeffs, codes = random_state(rng)
    Z, y = build_vectorized_system(data, codes, designs)
    nu = 1.0

    def obj(b):
        r = y - Z @ b
        return r @ r + nu * b @ b

    b = spline_update(Z, y, nu)
    assert obj(b) <= obj(pack(coeffs))
    rhs = Z.T @ y
    resid = (Z.T @ Z + nu * np.eye(b.size)) @ b - rhs
    assert np.abs(resid).max() < 1e-8 * (1 + np.abs(rhs).max())


def test_objective_matches_double_loop(rng):
    data, designs, coeffs, codes = random_state(rng, shared=False)
    nu = 0.3
    total = 0.0
    for m in range(data.N):
        for i in range(data.n):
            f = sum(lam[l] * (designs[m].block(j)[i] @ coeffs[j][:, l])
                    for j, lam in enumerate(codes[m].weights) for l in range(len(lam)))
            total += (data.centered[m, i] - f) ** 2
    total += nu * sum(np.sum(B ** 2) for B in coeffs)
    value = objective(FitState(coeffs, codes, designs), data, nu)
    assert abs(value - total) <= 1e-10 * total
    zero = [BlockSparseCode.empty([3] * data.p) for _ in range(data.N)]
    assert objective(FitState([0 * B for B in coeffs], zero, designs), data, nu) == \
        pytest.approx(np.sum(data.centered ** 2), rel=1e-12)


def test_finalize_preserves_predictions(rng):
    worst = 0.0
    for _ in range(100):
        data, designs, coeffs, codes = random_state(rng, N=3, n=15, p=2, T=5, L=2)
        new_coeffs, new_codes = finalize_nonneg(coeffs, codes)
        before = fits_by_loops(data, designs, coeffs, codes)
        after = fits_by_loops(data, designs, new_coeffs, new_codes)
        worst = max(worst, np.abs(before - after).max())
        for code in new_codes:
            assert all(np.all(w >= 0) and np.count_nonzero(w) <= 1 for w in code.weights)
    assert worst < 1e-12


def test_finalize_sign_split_example():
    code = BlockSparseCode.from_selection([2], [(0, 0, -2.0)])
    coeffs, (new,) = finalize_nonneg([np.eye(2)], [code])
    np.testing.assert_array_equal(new.weights[0], [0, 0, 2, 0])
    np.testing.assert_array_equal(coeffs[0], np.hstack([np.eye(2), -np.eye(2)]))


def test_refine_never_increases_residual(rng):
    data, designs, coeffs, _ = random_state(rng, N=40, n=40, p=4, L=3)
    codes = weights_update(data, designs, coeffs)
    refined, swaps = refine_codes(data, designs, coeffs, codes)
    before = np.linalg.norm(residuals(data, designs, coeffs, codes), axis=1)
    after = np.linalg.norm(residuals(data, designs, coeffs, refined), axis=1)
    assert np.all(after <= before * (1 + 1e-12) + 1e-12)
    for a, b in zip(codes, refined):
        if a is b:
            continue
        assert sorted(k for k, _, _ in a.selected) == sorted(k for k, _, _ in b.selected)
    assert swaps >= 0


def test_repair_unused_function(rng):
    data, designs, coeffs, _ = random_state(rng, N=10, p=2, L=2)
    coeffs[1][:, 1] = 0.0
    codes = weights_update(data, designs, coeffs)
    assert usage_counts(codes, [2, 2])[1][1] == 0
    before = np.linalg.norm(residuals(data, designs, coeffs, codes), axis=1)
    new_coeffs, new_codes, repaired = repair_empty_transfer_functions(
        data, designs, coeffs, codes, nu=1.0)
    assert repaired >= 1
    assert usage_counts(new_codes, [2, 2])[1][1] >= 1
    after = np.linalg.norm(residuals(data, designs, new_coeffs, new_codes), axis=1)
    changed = [m for m in range(data.N) if new_codes[m] is not codes[m]]
    assert changed and all(after[m] <= before[m] + 1e-12 for m in changed)
    # disabled repair and fully used functions are no-ops
    assert repair_empty_transfer_functions(data, designs, coeffs, codes, 1.0, False)[2] == 0
    _, _, none = repair_empty_transfer_functions(data, designs, new_coeffs, new_codes, 1.0)
    assert none == 0 or all(c.all() for c in usage_counts(new_codes, [2, 2]))


def test_noiseless_fit_from_truth(small_problem):
    train, _, truth = small_problem
    config = FitConfig(L=2, nu=1e-12, max_iterations=1, num_functions=8)
    model = fit(train, config, initial_coefficients=truth.coefficient_matrices)
    Y = train.centered
    assert model.objective_history[0] < 1e-10 * np.sum(Y ** 2)
    np.testing.assert_allclose(predict_dataset(model, train), train.responses, atol=1e-6)


def test_fit_constraints_and_monotone_spline_step(small_problem):
    train, _, _ = small_problem
    model = fit(train, FitConfig(L=2, num_functions=8, max_iterations=8, rel_objective_tol=0))
    assert len(model.objective_history) == 8
    for before, after in zip(model.pre_update_history, model.objective_history):
        assert after <= before * (1 + 1e-12)
    for code in model.codes:
        assert all(np.all(w >= 0) and np.count_nonzero(w) <= 1 for w in code.weights)
    assert model.non_monotone_iterations >= 0
    assert objective(model, train) == pytest.approx(model.objective_history[-1], rel=1e-9)


def dump(model):
    return model_to_dict(model, created="fixed")


def test_fit_deterministic_and_path_invariant(small_problem):
    train, _, _ = small_problem
    config = FitConfig(L=2, num_functions=8, max_iterations=5, seed=11)
    a = dump(fit(train, config))
    assert a == dump(fit(train, config))
    assert a == dump(fit(train, FitConfig(**{**config.to_dict(), "threads": 3, "L": 2})))
    assert a == dump(fit(train, config, shared=False))


def test_random_init_deterministic(small_problem):
    train, _, _ = small_problem
    config = FitConfig(L=2, num_functions=8, max_iterations=3, init="random", seed=4)
    assert dump(fit(train, config)) == dump(fit(train, config))


def test_spectral_init_needs_shared_covariates(rng):
    data, designs, _, _ = random_state(rng, shared=False)
    with pytest.raises(DataError):
        spectral_init(data, designs, [2, 2, 2], rng)


def test_spectral_init_shapes(small_problem, rng):
    train, _, _ = small_problem
    bases = make_bases(train, 8, 3)
    designs = task_designs(train, bases)
    coeffs = spectral_init(train, designs, [2, 3, 1], rng)
    assert [B.shape for B in coeffs] == [(8, 2), (8, 3), (8, 1)]


def test_fit_per_task_covariates(rng):
    N, n, p = 8, 40, 2
    X = rng.uniform(-1, 1, (N, n, p))
    Y = np.sin(3 * X[:, :, 0]) + X[:, :, 1] ** 2 + 0.1 * rng.standard_normal((N, n))
    data = TaskDataset(X, Y, [f"t{m}" for m in range(N)])
    model = fit(data, FitConfig(L=2, num_functions=6, max_iterations=5))
    assert np.sqrt(np.mean((predict_dataset(model, data) - Y) ** 2)) < 0.5


def test_predict(small_problem):
    train, _, _ = small_problem
    model = fit(train, FitConfig(L=2, num_functions=8, max_iterations=3))
    X = train.covariates[0][:7]
    empty = BlockSparseCode.empty([4] * train.p)
    np.testing.assert_array_equal(predict(model, X, empty, 1.25), 1.25)
    code = model.codes[0]
    base = predict(model, X, code, 0.0)
    scaled = [B * 2.5 for B in model.coefficient_matrices]
    lam = BlockSparseCode([w / 2.5 for w in code.weights], code.selected, 0.0)
    model.coefficient_matrices, original = scaled, model.coefficient_matrices
    try:
        np.testing.assert_allclose(predict(model, X, lam, 0.0), base, atol=1e-12)
    finally:
        model.coefficient_matrices = original
