import numpy as np
import pytest

from tdv.errors import ContractError, NumericalError, ShapeError
from tdv.operators import (BicubicDown, CallableOp, Identity, MatrixOp, MriOp, RadonOp, bicubic_matrix,
                           cartesian_mask, cg_solve, cubic_kernel, estimate_opnorm, make_operator, op_adjoint,
                           op_apply)


def ip(a, b):
    return float(np.sum(a * b))


def coils(n, H, W, seed=0):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, H, W)) + 1j * r.standard_normal((n, H, W))


OPERATORS = {
    "identity": lambda: Identity((1, 8, 8)),
    "bicubic2": lambda: BicubicDown(2, (1, 12, 12)),
    "bicubic3": lambda: BicubicDown(3, (2, 12, 9)),
    "bicubic4": lambda: BicubicDown(4, (1, 16, 16)),
    "mri": lambda: MriOp(cartesian_mask(8, 10, 3)),
    "mri_coils": lambda: MriOp(cartesian_mask(8, 8, 2), coils(3, 8, 8)),
    "mri_complex": lambda: MriOp(cartesian_mask(8, 8, 2), coils(2, 8, 8), complex_domain=True),
    "radon": lambda: RadonOp(12, n_angles=10),
}


@pytest.mark.parametrize("name", list(OPERATORS))
def test_dot_test(name):
    A = OPERATORS[name]()
    r = np.random.default_rng(hash(name) % 2**32)
    shape = A.domain_shape
    for _ in range(10):
        x = r.standard_normal((2,) + shape)
        y = r.standard_normal(A.apply(x).shape)
        err = abs(ip(A.apply(x), y) - ip(x, A.adjoint(y)))
        assert err <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(y)


@pytest.mark.parametrize("name", list(OPERATORS))
def test_linearity(name):
    A = OPERATORS[name]()
    r = np.random.default_rng(3)
    x, y = r.standard_normal((2, 1) + A.domain_shape)
    a, b = 0.7, -1.3
    np.testing.assert_allclose(A.apply(a * x + b * y), a * A.apply(x) + b * A.apply(y), rtol=1e-12, atol=1e-12)


def test_identity():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(op_apply(Identity(), x), x)
    np.testing.assert_array_equal(op_adjoint(Identity(), x), x)


def test_mri_full_mask_is_unitary():
    A = MriOp(np.ones((8, 8)))
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    assert abs(np.linalg.norm(A.apply(x)) - np.linalg.norm(x)) < 1e-12
    np.testing.assert_allclose(A.adjoint(A.apply(x)), x, atol=1e-10)


def test_mri_rejects_non_binary_mask():
    with pytest.raises(ContractError):
        MriOp(np.full((4, 4), 0.5))
    with pytest.raises(ShapeError):
        MriOp(np.ones((4, 4)), coils(2, 4, 5))


def test_cartesian_mask_has_centre_and_rate():
    m = cartesian_mask(16, 16, 4, 4)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert m[0].all() and m[1].all() and m[-1].all() and m[-2].all()
    assert m[::4].all()


def test_bicubic_constant_image():
    out = BicubicDown(2, (1, 4, 4)).apply(np.ones((1, 1, 4, 4)))
    np.testing.assert_allclose(out, np.ones((1, 1, 2, 2)), atol=1e-15)


def test_bicubic_kernel_properties():
    assert cubic_kernel(0.0) == 1.0
    np.testing.assert_allclose(cubic_kernel([1.0, 2.0, -1.0, 2.5]), 0.0, atol=1e-15)
    # a = -0.5 kernel reproduces linear functions: sum_k k K(t - k) = t
    t = 0.3
    k = np.arange(-3, 5)
    assert abs(np.sum(k * cubic_kernel(t - k)) - t) < 1e-14
    for g in (2, 3, 4):
        np.testing.assert_allclose(bicubic_matrix(12, g).sum(axis=1), 1.0, atol=1e-14)
    with pytest.raises(ShapeError):
        bicubic_matrix(10, 3)


def test_radon_nonnegative_and_mass():
    A = RadonOp(16, n_angles=8)
    x = np.random.default_rng(1).uniform(size=(3, 1, 16, 16))
    s = A.apply(x)
    assert np.all(s >= 0)
    # a centred disk lies inside every view: each view integrates its mass, exactly for
    # axis-aligned views and up to interpolation error for oblique ones
    yy, xx = np.mgrid[:16, :16] - 7.5
    disk = ((xx ** 2 + yy ** 2) < 16).astype(float)[None, None]
    views = A.apply(disk)[0, 0].sum(axis=1)
    np.testing.assert_allclose(views[[0, 4]], disk.sum(), rtol=1e-12)
    np.testing.assert_allclose(views, disk.sum(), rtol=1e-2)


def test_shape_check():
    with pytest.raises(ShapeError):
        BicubicDown(2, (1, 8, 8)).apply(np.zeros((1, 1, 6, 6)))


def test_make_operator():
    assert make_operator({"id": "identity"}).id == "identity"
    A = make_operator({"id": "bicubic_down", "gamma": 3}, (1, 9, 9))
    assert A.codomain_shape == (1, 3, 3)
    R = make_operator({"id": "radon", "n_angles": 32, "undersample": 4}, (1, 16, 16))
    assert len(R.angles) == 8
    assert make_operator({"id": "mri", "acceleration": 4}, (1, 8, 8)).id == "mri"
    with pytest.raises(ContractError):
        make_operator({"id": "wavelet"})


# --------------------------------------------------------------------------
# conjugate gradients


def test_cg_identity_one_iteration():
    b = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
    np.testing.assert_allclose(cg_solve(lambda v: v, b, 1), b, rtol=1e-15)


def test_cg_diagonal_two_iterations():
    d = np.array([2.0, 4.0])
    np.testing.assert_allclose(cg_solve(lambda v: d * v, np.array([2.0, 4.0]), 2), [1.0, 1.0], rtol=1e-14)


def test_cg_against_dense_direct_solve():
    A = BicubicDown(2, (1, 8, 8))
    T, S = 0.4, 5
    r = np.random.default_rng(2)
    rhs = r.standard_normal((1, 1, 8, 8))
    apply_B = lambda v: v + (T / S) * A.normal(v)  # noqa: E731
    x = cg_solve(apply_B, rhs, 30)
    assert np.linalg.norm(apply_B(x) - rhs) / np.linalg.norm(rhs) < 1e-10
    Md = np.kron(A.Mh, A.Mw)
    Bd = np.eye(64) + (T / S) * Md.T @ Md
    np.testing.assert_allclose(x.ravel(), np.linalg.solve(Bd, rhs.ravel()), rtol=1e-10, atol=1e-12)


def test_cg_error_monotone_in_B_norm():
    r = np.random.default_rng(4)
    Q = r.standard_normal((20, 20))
    B = Q @ Q.T + 0.5 * np.eye(20)
    b = r.standard_normal(20)
    xs = np.linalg.solve(B, b)
    errs = []
    cg_solve(lambda v: B @ v, b, 20, callback=lambda x: errs.append((x - xs) @ B @ (x - xs)))
    assert len(errs) > 5
    assert all(e2 <= e1 * (1 + 1e-12) + 1e-20 for e1, e2 in zip(errs, errs[1:]))


def test_cg_per_sample_matches_separate_solves():
    A = RadonOp(8, n_angles=5)
    r = np.random.default_rng(5)
    rhs = r.standard_normal((3, 1, 8, 8))
    B = lambda v: v + 0.3 * A.normal(v)  # noqa: E731
    joint = cg_solve(B, rhs, 12, per_sample=True)
    for i in range(3):
        np.testing.assert_allclose(joint[i:i + 1], cg_solve(B, rhs[i:i + 1], 12), rtol=1e-12, atol=1e-14)


def test_cg_errors():
    with pytest.raises(ContractError):
        cg_solve(lambda v: v, np.ones(3), 0)
    with pytest.raises(NumericalError):
        cg_solve(lambda v: -v, np.ones(3), 3)


# --------------------------------------------------------------------------
# norm estimation


def test_opnorm_identity_and_diag():
    assert abs(estimate_opnorm(Identity(), shape=(1, 1, 4, 4)) - 1.0) < 1e-12
    D = MatrixOp(np.diag([3.0, 1.0]), (1, 1, 2))
    assert abs(estimate_opnorm(D, 50) - 3.0) < 1e-8


def test_opnorm_radon_against_dense_svd():
    A = RadonOp(16, n_angles=8)
    smax = np.linalg.svd(A.M.toarray(), compute_uv=False)[0]
    assert abs(estimate_opnorm(A, 100) - smax) / smax < 0.01


def test_opnorm_nondecreasing():
    A = RadonOp(12, n_angles=6)
    vals = [estimate_opnorm(A, k) for k in (1, 2, 5, 10, 40)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_callable_op():
    M = np.random.default_rng(0).standard_normal((3, 4))
    A = CallableOp(lambda x: x @ M.T, lambda z: z @ M, (4,), (3,))
    x, y = np.ones((1, 4)), np.ones((1, 3))
    assert abs(ip(A.apply(x), y) - ip(x, A.adjoint(y))) < 1e-12
