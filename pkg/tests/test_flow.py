import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import random_theta
from oracles import flow_ref
from tdv.analysis import estimate_curvature
from tdv.errors import ContractError
from tdv.flow import B_apply, FlowConfig, data_energy, rescale_wrap, run_flow, semi_implicit_step
from tdv.operators import BicubicDown, Identity, RadonOp
from tdv.regularizer import evaluate, tdv_energies, tdv_grad


def zero_w(theta):
    return theta.replace({**theta.arrays, "w": np.zeros_like(theta["w"])})


def test_T_zero_step_is_identity(rng):
    th = random_theta(0)
    x = rng.standard_normal((1, 1, 8, 8))
    np.testing.assert_array_equal(semi_implicit_step(x, 0.0, 5, th, x), x)


def test_linear_step_closed_form():
    th = zero_w(random_theta(0))
    out = semi_implicit_step(np.zeros((1, 1, 4, 4)), 1.0, 1, th, np.ones((1, 1, 4, 4)))
    np.testing.assert_array_equal(out, np.full((1, 1, 4, 4), 0.5))


def test_semi_implicit_residual_bicubic(rng):
    th = random_theta(1)
    A = BicubicDown(2, (1, 8, 8))
    x = rng.standard_normal((2, 1, 8, 8))
    z = A.apply(rng.uniform(size=(2, 1, 8, 8)))
    T, S = 0.3, 4
    xn = semi_implicit_step(x, T, S, th, z, A, cg_iters=30)
    rhs = x + (T / S) * (A.adjoint(z) - tdv_grad(x, th))
    assert np.linalg.norm(B_apply(xn, T, S, A) - rhs) < 1e-9 * np.linalg.norm(rhs)


def test_linear_flow_closed_form(rng):
    th = zero_w(random_theta(2))
    x0 = rng.standard_normal((1, 1, 8, 8))
    z = rng.standard_normal((1, 1, 8, 8))
    T, S = 0.6, 3
    traj = run_flow(x0, z, th, FlowConfig(T, S))
    alpha = (T / S) / (1 + T / S)
    for s, xs in enumerate(traj.states):
        ref = (1 - alpha) ** s * x0 + (1 - (1 - alpha) ** s) * z
        np.testing.assert_allclose(xs, ref, rtol=0, atol=1e-12)


def test_flow_matches_reference_loop(rng):
    th = random_theta(3)
    x0 = rng.standard_normal((2, 1, 8, 8))
    z = rng.standard_normal((2, 1, 8, 8))
    traj = run_flow(x0, z, th, FlowConfig(0.4, 6, lam=2.0))
    ref = flow_ref(x0, z, lambda x: tdv_grad(x, th), 0.4, 6, lam=2.0)
    np.testing.assert_allclose(traj.final, ref, rtol=1e-13, atol=1e-13)
    assert len(traj.states) == 7 and len(traj.reg_grads) == 6


def test_T_zero_flow_frozen(rng):
    th = random_theta(4)
    x0 = rng.standard_normal((1, 1, 8, 8))
    traj = run_flow(x0, x0 + 1, th, FlowConfig(0.0, 4))
    assert all(np.array_equal(s, x0) for s in traj.states)


def test_config_validation():
    with pytest.raises(ContractError):
        FlowConfig(-0.1, 3)
    with pytest.raises(ContractError):
        FlowConfig(1.5, 3)
    with pytest.raises(ContractError):
        FlowConfig(0.1, 0)
    assert FlowConfig(0.1, 3, BicubicDown(2, (1, 8, 8))).cg_iters == 7
    assert FlowConfig(0.1, 3, RadonOp(8, n_angles=4)).cg_iters == 10


def test_rescale_wrap(rng):
    th = random_theta(5)
    z = rng.standard_normal((1, 1, 8, 8)) * 0.2
    cfg = FlowConfig(0.3, 5)
    np.testing.assert_array_equal(rescale_wrap(z, 0.1, 0.1, th, cfg), run_flow(z, z, th, cfg).final)
    np.testing.assert_allclose(rescale_wrap(z, 50, 25, th, cfg), 2 * run_flow(z / 2, z / 2, th, cfg).final,
                               rtol=1e-14, atol=1e-15)
    lin = zero_w(th)
    np.testing.assert_allclose(rescale_wrap(z, 50, 25, lin, cfg), run_flow(z, z, lin, cfg).final, rtol=1e-13)
    with pytest.raises(ContractError):
        rescale_wrap(z, 0, 25, th, cfg)


def test_step_consistency(rng):
    th = random_theta(6)
    x0 = rng.standard_normal((1, 1, 8, 8)) * 0.3
    z = x0 + 0.1 * rng.standard_normal(x0.shape)
    T = 0.5
    finals = {S: run_flow(x0, z, th, FlowConfig(T, S)).final for S in (5, 10, 20, 40, 80)}
    d = [np.linalg.norm(finals[S] - finals[2 * S]) for S in (5, 10, 20, 40)]
    ratios = [b / a for a, b in zip(d, d[1:])]
    assert all(0.3 <= r <= 0.7 for r in ratios), ratios


def test_gray_shift_equivariance(rng):
    th = random_theta(7)
    x0 = rng.standard_normal((2, 1, 8, 8))
    z = rng.standard_normal((2, 1, 8, 8))
    cfg = FlowConfig(0.4, 5)
    a = run_flow(x0 + 0.6, z + 0.6, th, cfg).final
    b = run_flow(x0, z, th, cfg).final + 0.6
    assert np.max(np.abs(a - b)) < 1e-8


def test_determinism_across_thread_counts(rng):
    th = random_theta(8, m=16)
    x0 = rng.standard_normal((4, 1, 16, 16))
    cfg = FlowConfig(0.2, 3)
    with threadpool_limits(limits=1):
        a = run_flow(x0, x0, th, cfg).final
    with threadpool_limits(limits=4):
        b = run_flow(x0, x0, th, cfg).final
    assert a.tobytes() == b.tobytes()


def test_per_sample_independence(rng):
    th = random_theta(9)
    A = RadonOp(8, n_angles=6)
    x0 = rng.standard_normal((3, 1, 8, 8))
    z = A.apply(rng.uniform(size=(3, 1, 8, 8)))
    cfg = FlowConfig(0.2, 3, A)
    joint = run_flow(x0, z, th, cfg).final
    single = run_flow(x0[1:2], z[1:2], th, cfg).final
    np.testing.assert_allclose(joint[1:2], single, rtol=1e-12, atol=1e-14)


@pytest.mark.slow
def test_energy_decreases_for_small_steps(toy_model, held_out_images):
    """With T/S <= 1/L for a backtracked local curvature L, E = D + R never increases."""
    th = toy_model.theta
    x0, z = held_out_images.x_init[:3, :, :32, :32], held_out_images.z[:3, :, :32, :32]
    S = 5
    L = estimate_curvature(lambda x, v: evaluate(x, th, v=v).hvp, x0)
    while True:
        T = min(S / L, 1.0)
        traj = run_flow(x0, z, th, FlowConfig(T, S))
        ok = True
        for s in range(S):
            d = traj.states[s + 1] - traj.states[s]
            upper = (tdv_energies(traj.states[s], th) + np.sum(traj.reg_grads[s] * d, axis=(1, 2, 3))
                     + 0.5 * L * np.sum(d * d, axis=(1, 2, 3)))
            ok &= bool(np.all(tdv_energies(traj.states[s + 1], th) <= upper + 1e-12))
        if ok:
            break
        L *= 2
    E = [data_energy(x, z, Identity()) + tdv_energies(x, th) for x in traj.states]
    for a, b in zip(E, E[1:]):
        assert np.all(b <= a + 1e-12)
