import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixsdr import estim, matops, simbench, sparse
from mixsdr.model import Dataset, build_fy
from mixsdr.sparse import (PenaltySpec, cv_select, fit_multinomial, lambda_max, multinomial_deviance,
                           orthonormalize, penalty_spec, predict_multinomial, selected_variables,
                           solve_penalized)


def factor(b, d):
    parts = estim.svd_truncate(b, d)
    return parts.K1 @ parts.R1.T, parts.U1


def random_problem(rng, kind, p=3, q=3, d=2, r=4, gamma=0.5):
    pen = penalty_spec(kind, p, q, gamma)
    b = rng.normal(size=(pen.m, r))
    B, U1 = factor(b, d)
    return pen, b, B, U1


def pair_rows(p, q):
    """Row of every (i, j) binary pair in the stacked layout, by direct enumeration."""
    where = {(j, j): p + j for j in range(q)}
    k = p + q
    for j in range(q):
        for i in range(j + 1, q):
            where[(i, j)] = where[(j, i)] = k
            k += 1
    return where


KINDS = ["continuous-rows", "binary-overlapping", "mixed"]


# penalty structure -----------------------------------------------------------

def test_continuous_rows_groups():
    pen = penalty_spec("continuous-rows", 5)
    assert pen.m == 5 and pen.groups == tuple((j,) for j in range(5))


def test_binary_two_groups_per_variable():
    q = 4
    pen = penalty_spec("binary-overlapping", 0, q)
    assert pen.m == matops.n_vech(q) and len(pen.groups) == 2 * q
    rows = pair_rows(0, q)
    for j in range(q):
        assert pen.groups[j] == (rows[(j, j)],)
        assert set(pen.groups[q + j]) == {rows[(i, j)] for i in range(q) if i != j}


def test_binary_groups_overlap_on_interactions():
    q = 4
    pen = penalty_spec("binary-overlapping", 0, q)
    inter = [set(g) for g in pen.groups[q:]]
    rows = pair_rows(0, q)
    for i in range(q):
        for j in range(i + 1, q):
            assert inter[i] & inter[j] == {rows[(i, j)]}


@pytest.mark.parametrize("q", [1, 2, 5])
def test_zeroing_variable_groups_zeroes_all_its_entries(rng, q):
    p = 2
    pen = penalty_spec("mixed", p, q, 0.5)
    rows = pair_rows(p, q)
    groups = [set(g) for g in pen.groups]
    for j in range(q):
        tied = {rows[(j, j)]} | {rows[(i, j)] for i in range(q) if i != j}
        main = {rows[(j, j)]}
        inter = tied - main
        assert main in groups and (not inter or inter in groups)
        C = rng.normal(size=(pen.m, 2))
        C[sorted(main | inter)] = 0.0
        assert np.all(C[sorted(tied)] == 0.0)
        assert j not in selected_variables(C, p, q)[1]


def test_mixed_weights():
    pen = penalty_spec("mixed", 3, 2, 0.3)
    assert pen.weights[:3] == (0.3,) * 3
    assert np.allclose(pen.weights[3:], 0.7)
    with pytest.raises(ValueError):
        penalty_spec("mixed", 3, 2, 1.5)


def test_penalty_spec_validation():
    with pytest.raises(ValueError):
        PenaltySpec("continuous-rows", 2, ((0,), (2,)), (1.0, 1.0))
    with pytest.raises(ValueError):
        penalty_spec("lasso", 2)


# lambda_max ----------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_lambda_max_zero_b(kind):
    pen = penalty_spec(kind, 2, 3)
    assert lambda_max(np.zeros((pen.m, 3)), np.ones((1, 3)), pen) == 0.0


def test_lambda_max_single_group_is_gradient_norm(rng):
    pen = penalty_spec("continuous-rows", 1)
    b = rng.normal(size=(1, 5))
    B, _ = factor(b, 1)
    assert np.isclose(lambda_max(b, B, pen), np.linalg.norm(2 * b @ B.T), rtol=1e-14)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(5))
def test_lambda_max_is_the_zero_threshold(kind, seed):
    rng = np.random.default_rng(seed)
    pen, b, B, _ = random_problem(rng, kind)
    lmax = lambda_max(b, B, pen)
    assert np.all(solve_penalized(b, B, 1.01 * lmax, pen) == 0.0)
    assert np.abs(solve_penalized(b, B, 0.98 * lmax, pen)).max() > 0.0


@pytest.mark.parametrize("gamma", [0.0, 1.0])
def test_lambda_max_ignores_unpenalized_block(rng, gamma):
    p, q = 3, 3
    pen, b, B, U1 = random_problem(rng, "mixed", p, q, gamma=gamma)
    lmax = lambda_max(b, B, pen)
    C = solve_penalized(b, B, 1.01 * lmax, pen)
    penalized = slice(0, p) if gamma == 1.0 else slice(p, pen.m)
    free = slice(p, pen.m) if gamma == 1.0 else slice(0, p)
    assert np.all(C[penalized] == 0.0)
    # the free rows solve their own least-squares problem
    ls = b[free] @ B.T @ np.linalg.inv(B @ B.T)
    assert np.allclose(C[free], ls, atol=1e-7)


# solver ----------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("d", [1, 2])
def test_lambda_zero_spans_u1(rng, kind, d):
    pen, b, B, U1 = random_problem(rng, kind, d=d)
    C = solve_penalized(b, B, 0.0, pen)
    assert np.abs(matops.projection(C) - U1 @ U1.T).max() <= 1e-8


def test_diagonal_design_soft_threshold(rng):
    m, r = 6, 4
    b = rng.normal(size=(m, r))
    B = np.zeros((1, r))
    B[0, 0] = 1.7
    pen = penalty_spec("continuous-rows", m)
    lam = 1.3
    C = solve_penalized(b, B, lam, pen, tol=1e-14)
    # row j minimizes k^2 (c - z_j)^2 + lam |c|,  z_j = b_j0 / k
    k = 1.7
    z = b[:, 0] / k
    oracle = np.sign(z) * np.maximum(np.abs(z) - lam / (2 * k ** 2), 0.0)
    assert np.abs(C[:, 0] - oracle).max() <= 1e-8


def test_orthogonal_design_block_soft_threshold(rng):
    m, r, d, k = 5, 6, 2, 2.5
    b = rng.normal(size=(m, r))
    Q, _ = np.linalg.qr(rng.normal(size=(r, d)))
    B = k * Q.T
    pen = penalty_spec("continuous-rows", m)
    lam = 2.0
    C = solve_penalized(b, B, lam, pen, tol=1e-14)
    Z = b @ B.T / k ** 2
    nrm = np.linalg.norm(Z, axis=1, keepdims=True)
    oracle = Z * np.maximum(1 - lam / (2 * k ** 2 * nrm), 0.0)
    assert np.abs(C - oracle).max() <= 1e-8


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(4))
def test_objective_monotone(kind, seed):
    rng = np.random.default_rng(100 + seed)
    pen, b, B, _ = random_problem(rng, kind, p=4, q=4, r=5)
    lam = lambda_max(b, B, pen) * np.array([0.05, 0.3, 0.7])
    _, info = solve_penalized(b, B, lam, pen, full_output=True)
    hist = np.array(info.history)
    assert np.all(np.diff(hist, axis=0) <= 1e-12 * np.abs(hist[:-1]))
    assert info.converged.all()


def test_overlapping_solution_matches_conic_solver(rng):
    cp = pytest.importorskip("cvxpy")
    q, d, r = 4, 2, 5
    pen = penalty_spec("binary-overlapping", 0, q)
    b = rng.normal(size=(pen.m, r))
    B, _ = factor(b, d)
    lam = 0.4 * lambda_max(b, B, pen)
    C = solve_penalized(b, B, lam, pen, tol=1e-13, max_iter=20000)
    X = cp.Variable((pen.m, d))
    reg = sum(w * cp.norm(cp.vec(X[list(g), :]), 2) for g, w in zip(pen.groups, pen.weights))
    cp.Problem(cp.Minimize(cp.sum_squares(b - X @ B) + lam * reg)).solve()
    obj = lambda M: float(((b - M @ B) ** 2).sum() + lam * pen.value(M))
    assert obj(C) <= obj(X.value) + 1e-7 * abs(obj(X.value))
    assert np.abs(C - X.value).max() <= 1e-4


def test_mixed_solution_kkt(rng):
    pen, b, B, _ = random_problem(rng, "mixed", p=3, q=3, d=1, gamma=0.4)
    lam = 0.5 * lambda_max(b, B, pen)
    C = solve_penalized(b, B, lam, pen, tol=1e-14, max_iter=20000)
    # directional derivative of the objective along random directions is non-negative
    obj = lambda M: ((b - M @ B) ** 2).sum() + lam * pen.value(M)
    f0 = obj(C)
    for _ in range(50):
        D = rng.normal(size=C.shape)
        assert obj(C + 1e-6 * D) >= f0 - 1e-9


def test_vector_lambda_batch_matches_scalar(rng):
    pen, b, B, _ = random_problem(rng, "mixed")
    lam = lambda_max(b, B, pen) * np.array([0.1, 0.5])
    batch = solve_penalized(b, B, lam, pen)
    for k, l in enumerate(lam):
        assert np.allclose(batch[k], solve_penalized(b, B, l, pen), atol=1e-12)


def test_solver_rejects_bad_input(rng):
    pen, b, B, _ = random_problem(rng, "continuous-rows")
    with pytest.raises(ValueError):
        solve_penalized(b, B, -1.0, pen)
    with pytest.raises(ValueError):
        solve_penalized(b[:-1], B, 1.0, pen)


# selection -----------------------------------------------------------------

def test_selected_nothing_for_zero():
    assert selected_variables(np.zeros((2 + 6, 2)), 2, 3) == ((), ())


def test_selected_single_x_row():
    C = np.zeros((4 + 3, 1))
    C[2] = 0.5
    assert selected_variables(C, 4, 2) == ((2,), ())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 4), st.integers(0, 5), st.integers(0, 2**31 - 1))
def test_selected_variables_brute_force(p, q, seed):
    rng = np.random.default_rng(seed)
    m = p + matops.n_vech(q)
    C = rng.normal(size=(m, 2)) * (rng.random(m) < 0.3)[:, None]
    rows = pair_rows(p, q)
    alive = np.linalg.norm(C, axis=1) > 1e-8 * max(np.linalg.norm(C, axis=1).max(initial=0.0), 0.0)
    if not alive.any():
        expected = ((), ())
    else:
        expected = (tuple(j for j in range(p) if alive[j]),
                    tuple(j for j in range(q) if any(alive[rows[(i, j)]] for i in range(q))))
    assert selected_variables(C, p, q) == expected


def test_orthonormalize_keeps_span_and_zero_rows(rng):
    C = rng.normal(size=(6, 2))
    C[[1, 4]] = 0.0
    U = orthonormalize(C)
    assert np.allclose(U.T @ U, np.eye(2), atol=1e-12)
    assert np.allclose(matops.projection(U), matops.projection(C), atol=1e-12)
    assert np.all(U[[1, 4]] == 0.0)


def test_orthonormalize_rank_deficient():
    C = np.zeros((4, 2))
    C[0] = [1.0, 2.0]
    U = orthonormalize(C)
    assert np.isclose(np.linalg.norm(U[:, 0]), 1.0) and np.all(U[:, 1] == 0.0)


# downstream predictor --------------------------------------------------------

def test_multinomial_stationary(rng):
    n, k, K = 200, 2, 3
    Z = rng.normal(size=(n, k))
    labels = rng.integers(0, K, n)
    ridge = 1e-3
    W = fit_multinomial(Z[None], labels, K, ridge=ridge)[0]
    X = np.column_stack([np.ones(n), Z])
    eta = np.column_stack([np.zeros(n), X @ W])
    P = np.exp(eta - eta.max(1, keepdims=True))
    P /= P.sum(1, keepdims=True)
    Y = np.eye(K)[labels]
    grad = X.T @ (P - Y)[:, 1:] / n
    grad[1:] += ridge * W[1:]
    assert np.abs(grad).max() <= 1e-8


def test_multinomial_separated_classes_predict_perfectly():
    z = np.linspace(-3, 3, 60)
    labels = (z > 0).astype(int)
    W = fit_multinomial(z[None, :, None], labels, 2)
    assert np.all(predict_multinomial(W, z[None, :, None])[0] == labels)


def test_deviance_matches_direct_formula(rng):
    W = rng.normal(size=(1, 3, 2))
    Z = rng.normal(size=(1, 10, 2))
    labels = rng.integers(0, 3, 10)
    eta = np.concatenate([np.zeros((10, 1)), np.column_stack([np.ones(10), Z[0]]) @ W[0]], axis=1)
    logp = eta - np.log(np.exp(eta).sum(1, keepdims=True))
    assert np.isclose(multinomial_deviance(W, Z, labels)[0], -logp[np.arange(10), labels].mean())


# cross-validation ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_mixed():
    scen = simbench.make_scenario("mixed-d1")
    data = simbench.generate(scen, 300, np.random.default_rng(5))
    return scen, data, build_fy(data.y)


def test_cv_reproducible(small_mixed):
    scen, data, fy = small_mixed
    kw = dict(n_lambda=8, gammas=[0.3, 0.7], folds=4)
    a = cv_select(data, fy, "optimal", 1, rng=11, **kw)
    b = cv_select(data, fy, "optimal", 1, rng=11, **kw)
    assert np.array_equal(a.cv_mean, b.cv_mean) and np.array_equal(a.solutions, b.solutions)
    assert a.best == b.best and a.kept_x == b.kept_x and a.kept_h == b.kept_h


def test_cv_path_shape_and_choice(small_mixed):
    scen, data, fy = small_mixed
    path = cv_select(data, fy, "optimal", 1, rng=3, n_lambda=6, gammas=[0.0, 0.5, 1.0], folds=3)
    assert path.lambdas.shape == (3, 6) and np.all(np.diff(path.lambdas, axis=1) > 0)
    assert path.cv_mean[path.best] == np.nanmin(path.cv_mean)
    assert np.allclose(path.coef, path.solutions[path.best])
    assert np.all(path.solutions[1, -1] == 0.0)
    norms = np.linalg.norm(path.solutions, axis=-1)
    assert np.array_equal(path.zero_rows, norms <= 1e-8 * norms.max(axis=-1, keepdims=True))
    d = path.to_dict()
    assert d["best_gamma"] == path.best_gamma and d["criterion"] == "deviance"


def test_cv_suboptimal_branches(small_mixed):
    scen, data, fy = small_mixed
    path = cv_select(data, fy, "suboptimal", 1, rng=3, n_lambda=5, folds=3)
    assert path.c1.penalty_kind == "continuous-rows" and path.c2.penalty_kind == "binary-overlapping"
    assert set(path.kept_h) >= set(path.c2.kept_h)


def test_cv_pure_noise_zeroes_most_rows():
    hits = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n, p = 300, 20
        y = np.arange(n) % 6
        data = Dataset(y, rng.standard_normal((n, p)), np.zeros((n, 0)))
        path = cv_select(data, build_fy(y), "pfc", 1, rng=rng, n_lambda=50)
        zeroed = p - len(path.kept_x)
        hits += zeroed >= 0.8 * p and path.best_lambda >= 0.5 * path.lambda_max[0]
    assert hits >= 4


def test_cv_errors():
    y = np.arange(6) % 2
    data = Dataset(y, np.random.default_rng(0).normal(size=(6, 2)), np.zeros((6, 0)))
    with pytest.raises(ValueError):
        cv_select(data, build_fy(y), "pfc", 1, folds=10)
    with pytest.raises(ValueError):
        cv_select(data, build_fy(y), "pfc", 1, folds=3, criterion="auc")


def test_cv_skips_fold_with_constant_binary_column():
    rng = np.random.default_rng(2)
    n = 40
    y = np.arange(n) % 2
    H = rng.integers(0, 2, size=(n, 2)).astype(float)
    H[:, 1] = 0.0
    H[0, 1] = 1.0
    data = Dataset(y, rng.normal(size=(n, 2)), H)
    path = cv_select(data, build_fy(y), "optimal", 1, rng=0, folds=4, n_lambda=3, gammas=[0.5])
    # only the fold holding the single H_2 = 1 row loses it from training
    fold = np.random.default_rng(0).permutation(n) % 4
    assert path.skipped_folds == (int(fold[0]),)


@pytest.mark.parametrize("name,gamma", [("cont-d1", None), ("bin-d1", None), ("mixed-d2", 0.5)])
def test_path_zero_patterns_nested(name, gamma):
    scen = simbench.make_scenario(name)
    data = simbench.generate(scen, 750, np.random.default_rng(1))
    fy = build_fy(data.y)
    kind = estim.resolve_kind(scen.kind, data.p, data.q)
    fit = estim.fit_model(estim._restrict(data, kind), fy)
    b = estim.reduction_target(kind, fit)
    B, _ = factor(b, scen.d)
    pk = {"pfc": "continuous-rows", "binary": "binary-overlapping", "optimal": "mixed"}[kind]
    pen = penalty_spec(pk, data.p if kind != "binary" else 0, data.q if kind != "pfc" else 0,
                       0.5 if gamma is None else gamma)
    lam = lambda_max(b, B, pen) * np.geomspace(1e-3, 1, 100)
    C = solve_penalized(b, B, lam, pen)
    norms = np.linalg.norm(C, axis=2)
    zero = norms <= 1e-8 * norms.max(axis=1, keepdims=True)
    nested = [np.all(zero[k] <= zero[k + 1]) for k in range(len(lam) - 1)]
    assert np.mean(nested) >= 0.9
    jumps = np.linalg.norm(np.diff(C, axis=0), axis=(1, 2))
    assert np.all(np.isfinite(jumps)) and jumps.max() <= np.linalg.norm(C[0])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(6))
def test_exactly_zero_at_lambda_max(kind, seed):
    rng = np.random.default_rng(300 + seed)
    pen, b, B, _ = random_problem(rng, kind, p=int(rng.integers(2, 5)), q=int(rng.integers(2, 5)),
                                  d=int(rng.integers(1, 3)), gamma=rng.uniform(0.1, 0.9))
    lmax = lambda_max(b, B, pen)
    C = solve_penalized(b, B, lmax * np.array([1.0, 1.0 + 1e-6, 2.0]), pen)
    assert np.all(C == 0.0)
