import numpy as np
import pytest

from conftest import random_theta
from tdv.analysis import (AgdStep, agd_lipschitz_solve, cg_initialization, eigenpair_solve, estimate_curvature,
                          landscape, psnr, psnr_batch, tdv_eigenpair, to_luma, transfer_energy, transfer_reconstruct)
from tdv.errors import ContractError, NumericalError, ShapeError
from tdv.operators import BicubicDown, Identity, MriOp
from tdv.regularizer import tdv_r


# --------------------------------------------------------------------------
# eigenpairs


def test_eigenpair_of_identity_gradient(rng):
    x0 = rng.standard_normal((1, 1, 4, 4))
    e = eigenpair_solve(lambda x: x, x0, steps=20)
    assert abs(e.lambda_bar - 1.0) < 1e-14 and e.residual < 1e-14
    assert e.norm_violation < 1e-14


def test_eigenpair_diagonal_descends_to_smallest():
    # minimizing x1^2 + 3 x2^2 on the unit circle picks the lambda = 1 axis
    D = np.array([1.0, 3.0])
    e = eigenpair_solve(lambda x: D * x, np.array([0.6, 0.8]), steps=500)
    assert abs(e.lambda_bar - 1.0) < 1e-8
    np.testing.assert_allclose(np.abs(e.x_bar), [1.0, 0.0], atol=1e-6)
    assert e.norm_violation < 1e-12


def test_eigenpair_other_axis_is_fixed_point():
    D = np.array([1.0, 3.0])
    e = eigenpair_solve(lambda x: D * x, np.array([0.0, 1.0]), steps=50, step_size=0.2)
    np.testing.assert_allclose(e.x_bar, [0.0, 1.0], atol=1e-15)
    assert abs(e.lambda_bar - 3.0) < 1e-14 and e.residual < 1e-14


def test_eigenpair_errors():
    with pytest.raises(NumericalError):
        eigenpair_solve(lambda x: x, np.zeros(3))
    with pytest.raises(NumericalError):
        eigenpair_solve(lambda x: 2 * x, np.ones(2), steps=3, step_size=0.5)


def test_eigenpair_early_stop(rng):
    D = np.linspace(1, 5, 6)
    e = eigenpair_solve(lambda x: D * x, rng.standard_normal(6), steps=5000, tol=1e-6)
    assert e.steps < 5000 and e.residual < 1e-6


def test_curvature_estimate_diagonal():
    D = np.array([0.5, -4.0, 2.0])
    assert abs(estimate_curvature(lambda x, v: D * v, np.ones(3), iters=200) - 4.0) < 1e-8


def test_tdv_eigenpair_stays_on_sphere(rng):
    th = random_theta(0)
    x0 = rng.uniform(size=(1, 1, 8, 8))
    e = tdv_eigenpair(x0, th, steps=200)
    assert e.norm_violation < 1e-8 and np.isfinite(e.lambda_bar)


# --------------------------------------------------------------------------
# landscapes


def test_landscape_zero_w(rng):
    th = random_theta(1)
    th = th.replace({**th.arrays, "w": np.zeros_like(th["w"])})
    g = landscape(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), 5, 5, th)
    assert not np.any(g.values)


def test_landscape_centre_value_independent_of_inputs(rng):
    th = random_theta(2)
    a = landscape(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), (3, 4), 5, th)
    b = landscape(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), (3, 4), 5, th)
    assert a.values[2, 2] == b.values[2, 2]
    assert a.values[2, 2] == tdv_r(np.zeros((1, 1, 8, 8)), th)[0, 0, 3, 4]


def test_landscape_matches_pointwise_evaluation(rng):
    th = random_theta(3)
    x, n = rng.uniform(size=(8, 8)), 0.1 * rng.standard_normal((8, 8))
    g = landscape(x, n, 19, 33, th)
    assert g.values.shape == (33, 33) and g.index == (2, 3)
    for a in range(0, 33, 4):
        for b in range(0, 33, 4):
            ref = tdv_r((g.xi1_axis[a] * x + g.xi2_axis[b] * n)[None, None], th)[0, 0, 2, 3]
            assert abs(g.values[a, b] - ref) <= 1e-12 * max(1.0, abs(ref))
    assert len(list(g.rows())) == 33 * 33


def test_landscape_swap_symmetry(rng):
    th = random_theta(4)
    x, n = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    np.testing.assert_allclose(landscape(x, n, 7, 9, th).values, landscape(n, x, 7, 9, th).values.T,
                               rtol=1e-13, atol=1e-13)


def test_landscape_errors(rng):
    th = random_theta(5)
    x = rng.standard_normal((8, 8))
    with pytest.raises(ShapeError):
        landscape(x, x, 64, 5, th)
    with pytest.raises(ShapeError):
        landscape(x, x, (8, 0), 5, th)
    with pytest.raises(ShapeError):
        landscape(x, x[:4], 0, 5, th)
    with pytest.raises(ContractError):
        landscape(x, x, 0, 1, th)


# --------------------------------------------------------------------------
# metrics


def test_psnr_examples(rng):
    x = rng.uniform(size=(8, 8))
    assert psnr(x, x) == np.inf
    assert abs(psnr(np.zeros(4), np.full(4, 0.1)) - 20.0) < 1e-12
    assert abs(psnr(np.zeros(4), np.full(4, 25.5), peak=255) - 20.0) < 1e-12
    with pytest.raises(ShapeError):
        psnr(x, x[:4])


def test_psnr_symmetry_and_shift(rng):
    x, y = rng.uniform(size=(2, 8, 8))
    assert psnr(x, y) == psnr(y, x)
    assert abs(psnr(x + 0.3, y + 0.3) - psnr(x, y)) < 1e-10
    np.testing.assert_array_equal(psnr_batch(np.stack([x, y]), np.stack([y, x])), [psnr(x, y)] * 2)


def test_luma():
    rgb = np.zeros((2, 3, 2, 2))
    rgb[0] = 1.0
    rgb[1, 0] = 1.0
    out = to_luma(rgb)
    assert out.shape == (2, 2, 2)
    np.testing.assert_allclose(out[0], 1.0, rtol=1e-12)
    np.testing.assert_allclose(out[1], 0.299, rtol=1e-12)
    with pytest.raises(ShapeError):
        to_luma(np.zeros((1, 2, 4, 4)))


# --------------------------------------------------------------------------
# accelerated gradient descent


def quadratic(seed, n=12):
    r = np.random.default_rng(seed)
    Q = r.standard_normal((n, n))
    Q = Q @ Q.T / n + 0.5 * np.eye(n)
    xs = r.standard_normal(n)
    # residual form: free of the cancellation in x'Qx/2 - b'x near the minimizer
    return (lambda x: 0.5 * (x - xs) @ Q @ (x - xs)), (lambda x: Q @ (x - xs)), xs


def test_agd_quadratic_converges():
    E, g, xs = quadratic(0)
    x = agd_lipschitz_solve(E, g, np.zeros_like(xs), 200)
    assert np.linalg.norm(x - xs) < 1e-8


def test_agd_stationary_start():
    E, g, xs = quadratic(1)
    x = agd_lipschitz_solve(E, g, xs, 10)
    assert np.linalg.norm(x - xs) < 1e-14


def test_agd_accepted_steps_never_increase_relaxed_energy():
    E, g, xs = quadratic(2)
    hist = []
    agd_lipschitz_solve(E, g, np.ones_like(xs) * 3, 100, L0=1e-3, history=hist)
    assert len(hist) == 100 and all(isinstance(h, AgdStep) for h in hist)
    assert all(h.energy <= h.energy_relaxed for h in hist)
    assert any(h.backtracks > 0 for h in hist)


def test_agd_lipschitz_ceiling():
    x0 = np.zeros(3)

    def E(x):
        return 0.0 if not np.any(x) else 1.0

    with pytest.raises(NumericalError):
        agd_lipschitz_solve(E, lambda x: np.ones(3), x0, 5)


def test_agd_full_mask_mri_data_term(rng):
    A = MriOp(np.ones((8, 8)))
    y = rng.uniform(size=(1, 1, 8, 8))
    z = A.apply(y)
    x = transfer_reconstruct(A, z, None, 1.0, x0=np.zeros_like(y), iters=200)
    assert np.max(np.abs(x - A.adjoint(z))) < 1e-8


def test_transfer_large_lambda_follows_data(rng):
    A = MriOp(np.ones((8, 8)))
    y = rng.uniform(size=(1, 1, 8, 8))
    z = A.apply(y)
    x = transfer_reconstruct(A, z, random_theta(6), 1e6, iters=100)
    assert np.max(np.abs(x - y)) < 1e-4


def test_transfer_energy_gradient(rng):
    A = BicubicDown(2, (1, 8, 8))
    th = random_theta(7)
    z = A.apply(rng.uniform(size=(1, 1, 8, 8)))
    E, g = transfer_energy(A, z, th, 3.0)
    x = rng.uniform(size=(1, 1, 8, 8))
    d = rng.standard_normal(x.shape)
    h = 1e-6
    fd = (E(x + h * d) - E(x - h * d)) / (2 * h)
    assert abs(fd - np.sum(g(x) * d)) < 1e-6 * abs(fd)
    with pytest.raises(ContractError):
        transfer_reconstruct(A, z, th, 0.0)


def test_cg_initialization(rng):
    z = rng.standard_normal((1, 1, 4, 4))
    out = cg_initialization(Identity(), z)
    np.testing.assert_array_equal(out, z)
    assert out is not z
    A = MriOp(np.ones((8, 8)))
    zz = A.apply(rng.standard_normal((1, 1, 8, 8)))
    np.testing.assert_array_equal(cg_initialization(A, zz), A.adjoint(zz))
