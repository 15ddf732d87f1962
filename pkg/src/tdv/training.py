"""Discrete optimal-control training of (theta, T).

The objective is ``J_S(T, theta) = (1/N) sum_i l(x_S^i - y^i)`` subject to the
semi-implicit flow.  Gradients come from the discrete adjoint recursion

    p_S = -(1/N) grad l(x_S - y)
    p_s = (Id - (T/S) H(x_s)) B(T)^{-1} p_{s+1}

where ``H`` is the regularizer Hessian.  With ``q_s = B(T)^{-1} p_{s+1}``:

    grad_theta J = (T/S) sum_s d/dtheta <q_s, grad_x R(x_s, theta)>
    dJ/dT        = -(1/T) sum_s <p_{s+1}, B(T)^{-1} (x_{s+1} - x_s)>

The per-sample 1/N factor lives in the costates, so sums over samples are
plain sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, TrainingDiverged
from .flow import T_MAX, FlowConfig, Trajectory, B_inv, run_flow
from .operators import Identity, LinearOperator, estimate_opnorm
from .regularizer import TdvParams, evaluate, init_params, project_zero_mean, tdv_grad

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossSpec:
    kind: str = "squared_l2"
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("squared_l2", "smooth_l1"):
            raise ContractError(f"unknown loss {self.kind!r}")
        if self.kind == "smooth_l1" and not self.epsilon > 0:
            raise ContractError("smooth_l1 needs epsilon > 0")


def loss_eval(x, spec: LossSpec):
    """Loss of the whole array ``x`` and its gradient."""
    x = np.asarray(x, dtype=float)
    if spec.kind == "squared_l2":
        return 0.5 * float(np.sum(x * x)), x.copy()
    n1 = float(np.sum(np.abs(x)))
    val = np.sqrt(n1 * n1 + spec.epsilon ** 2)
    return float(val), (n1 / val) * np.sign(x)


def batch_loss(diff, spec: LossSpec):
    """Per-sample losses (b,) and gradients for a batched residual."""
    vals, grads = zip(*(loss_eval(d, spec) for d in diff))
    return np.array(vals), np.stack(grads)


# --------------------------------------------------------------------------
# adjoint


@dataclass
class AdjointTrajectory:
    costates: list            # p_0 .. p_S
    terminal_loss_grad: np.ndarray
    loss_values: np.ndarray   # per-sample l(x_S - y)
    param_grad: Optional[dict] = None

    @property
    def J(self):
        return float(np.mean(self.loss_values))


def adjoint_recursion(traj: Trajectory, theta: TdvParams, loss: LossSpec, y,
                      with_param_grads: bool = False) -> AdjointTrajectory:
    """Backward costate sweep; optionally accumulates grad_theta J on the way."""
    cfg = traj.config
    T, S, op = cfg.T, cfg.S, cfg.op
    xs = traj.states
    N = xs[-1].shape[0]
    vals, lgrad = batch_loss(xs[-1] - np.asarray(y), loss)
    p = -lgrad / N
    costates = [None] * (S + 1)
    costates[S] = p
    acc = {n: np.zeros_like(theta[n]) for n in theta.names} if with_param_grads else None
    for s in range(S - 1, -1, -1):
        if T == 0:
            costates[s] = p
            continue
        q = B_inv(p, T, S, op, cfg.lam, cfg.cg_iters, cfg.cg_tol)
        ev = evaluate(xs[s], theta, v=q, param_grads=with_param_grads)
        if acc is not None:
            for n in acc:
                acc[n] += (T / S) * ev.param_hvp[n]
        p = q - (T / S) * ev.hvp
        costates[s] = p
    return AdjointTrajectory(costates, lgrad, vals, acc)


def param_gradients(traj: Trajectory, adj: AdjointTrajectory, theta: TdvParams):
    """(grad_theta J, dJ/dT) from a state trajectory and its costates."""
    cfg = traj.config
    T, S, op, lam = cfg.T, cfg.S, cfg.op, cfg.lam
    xs, ps = traj.states, adj.costates
    if adj.param_grad is not None:
        gtheta = adj.param_grad
    else:
        gtheta = {n: np.zeros_like(theta[n]) for n in theta.names}
        if T > 0:
            for s in range(S):
                q = B_inv(ps[s + 1], T, S, op, lam, cfg.cg_iters, cfg.cg_tol)
                ev = evaluate(xs[s], theta, v=q, param_grads=True)
                for n in gtheta:
                    gtheta[n] += (T / S) * ev.param_hvp[n]
    if T > 0:
        dT = optimality_residual(traj, adj, scaled=True) / T
    else:
        Atz = lam * op.adjoint(traj.z)
        dT = 0.0
        for s in range(S):
            g = traj.reg_grads[s] if traj.reg_grads else tdv_grad(xs[s], theta)
            drift = (Atz - lam * op.normal(xs[s]) - g) / S
            dT -= float(np.sum(ps[s + 1] * drift))
    return gtheta, float(dT)


def optimality_residual(traj: Trajectory, adj: AdjointTrajectory, scaled: Optional[bool] = None):
    """-sum_s sum_i <p_{s+1}, B(T)^{-1} (x_{s+1} - x_s)>.

    Equals ``T * dJ/dT`` when ``scaled``; the costates already carry 1/N.
    ``scaled=False`` drops B(T)^{-1}; that is the default for the identity
    operator, where B is a positive scalar and the zero crossing is unchanged.
    """
    cfg = traj.config
    if scaled is None:
        scaled = not isinstance(cfg.op, Identity)
    total = 0.0
    for s in range(cfg.S):
        dx = traj.states[s + 1] - traj.states[s]
        if scaled:
            dx = B_inv(dx, cfg.T, cfg.S, cfg.op, cfg.lam, cfg.cg_iters, cfg.cg_tol)
        total -= float(np.sum(adj.costates[s + 1] * dx))
    return total


# --------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    patch_size: int = 16
    steps: int = 500
    seed: int = 0
    S: int = 10
    loss: LossSpec = field(default_factory=LossSpec)
    T_init: float = 0.1
    lr_T: Optional[float] = None
    m: int = 8
    l: int = 1
    nu: float = 9.0
    cg_iters: Optional[int] = None
    lam: float = 1.0
    learn_T: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(theta: TdvParams, grad: dict, state: AdamState, cfg: TrainConfig,
              T: Optional[float] = None, dT: Optional[float] = None):
    """Bias-corrected ADAM on every parameter (and on T when given), then project K.

    T is treated as one more scalar parameter under key ``"T"`` and clamped to
    [0, T_MAX].  Returns (theta', T', state').
    """
    params = dict(theta.arrays)
    grads = dict(grad)
    if T is not None and dT is not None:
        params["T"] = np.array(T, dtype=float)
        grads["T"] = np.array(dT, dtype=float)
    t = state.t + 1
    m_new, v_new = {}, {}
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_new[name], v_new[name] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        lr = cfg.lr_T if (name == "T" and cfg.lr_T is not None) else cfg.lr
        params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    T_new = T
    if "T" in params:
        T_new = float(np.clip(params.pop("T"), 0.0, T_MAX))
    params["K"] = project_zero_mean(params["K"])
    return theta.replace(params), T_new, AdamState(m_new, v_new, t)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    theta: TdvParams
    T: float
    history: list
    initial_loss: float
    final_loss: float


def _flow_config(T, cfg: TrainConfig, op):
    return FlowConfig(T, cfg.S, op, cfg.cg_iters, lam=cfg.lam)


def dataset_loss(dataset, theta: TdvParams, T: float, S: int, loss: LossSpec,
                 cg_iters=None, lam=1.0) -> float:
    cfg = FlowConfig(T, S, dataset.op, cg_iters, lam=lam)
    traj = run_flow(dataset.x_init, dataset.z, theta, cfg)
    vals, _ = batch_loss(traj.final - dataset.y, loss)
    return float(np.mean(vals))


def objective_and_gradients(x_init, y, z, theta: TdvParams, T: float, flow_cfg: FlowConfig,
                            loss: LossSpec):
    cfg = flow_cfg.with_T(T)
    traj = run_flow(x_init, z, theta, cfg)
    adj = adjoint_recursion(traj, theta, loss, y, with_param_grads=True)
    gtheta, dT = param_gradients(traj, adj, theta)
    return adj.J, gtheta, dT, traj, adj


def train(dataset, cfg: TrainConfig, theta: Optional[TdvParams] = None, callback=None) -> TrainResult:
    """Minibatch ADAM on (theta, T) with zero-mean projection of K after each step."""
    from .rng import CounterRNG

    if theta is None:
        theta = init_params(cfg.seed, dataset.y.shape[1], cfg.m, cfg.l, cfg.nu)
    T = float(cfg.T_init)
    op = dataset.op
    N = len(dataset.y)
    rng = CounterRNG(cfg.seed + 1)
    flow_cfg = _flow_config(T, cfg, op)
    J0_full = dataset_loss(dataset, theta, T, cfg.S, cfg.loss, cfg.cg_iters, cfg.lam)
    history = []
    state = AdamState()
    J_first = None
    order, pos = np.arange(N), N
    bs = min(cfg.batch_size, N)
    for step in range(cfg.steps):
        if pos + bs > N:
            order = np.argsort(rng.uniform(N), kind="stable")
            pos = 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        J, gtheta, dT, _, _ = objective_and_gradients(
            dataset.x_init[idx], dataset.y[idx], dataset.z[idx], theta, T, flow_cfg, cfg.loss)
        if J_first is None:
            J_first = J
        if not np.isfinite(J) or J > 1e6 * max(J_first, 1e-300):
            raise TrainingDiverged(f"objective {J} at step {step} (initial {J_first})")
        gnorm = float(np.sqrt(sum(np.sum(g * g) for g in gtheta.values()) + dT * dT))
        history.append({"step": step, "J": J, "T": T, "grad_norm": gnorm})
        theta, T_new, state = adam_step(theta, gtheta, state, cfg, T if cfg.learn_T else None,
                                        dT if cfg.learn_T else None)
        T = T if T_new is None else T_new
        if callback is not None:
            callback(step, J, T, theta)
        if step % 50 == 0:
            log.info("step %d  J=%.6g  T=%.5f  |g|=%.3g", step, J, T, gnorm)
    J_final = dataset_loss(dataset, theta, T, cfg.S, cfg.loss, cfg.cg_iters, cfg.lam)
    return TrainResult(theta, T, history, J0_full, J_final)


# --------------------------------------------------------------------------
# sensitivity


@dataclass
class SensitivityReport:
    lhs: np.ndarray
    rhs: np.ndarray
    lipschitz: float
    binv_diff_norm: float
    binv_norm: float


def _binv_norms(T, T2, S, op, lam, opnorm_iters=100):
    """(||B(T)^-1 - B(T2)^-1||, ||B(T2)^-1||).

    B(T) = Id + a A^T A has the eigenvalues of A^T A shifted, so both norms are
    maxima of scalar functions over mu in [0, ||A||^2]; for A = Id the
    spectrum is the single point mu = 1.
    """
    a, b = lam * T / S, lam * T2 / S
    if isinstance(op, Identity):
        return abs(1 / (1 + a) - 1 / (1 + b)), 1 / (1 + b)
    mu_max = estimate_opnorm(op, opnorm_iters) ** 2
    cands = [0.0, mu_max]
    if a > 0 and b > 0:
        star = 1.0 / np.sqrt(a * b)
        if star < mu_max:
            cands.append(star)
    diff = max(abs(1 / (1 + a * mu) - 1 / (1 + b * mu)) for mu in cands)
    return diff, 1.0


def sensitivity_bound(traj: Trajectory, traj2: Trajectory, theta: TdvParams, theta2: TdvParams,
                      T: float, T2: float, op: Optional[LinearOperator] = None, z=None) -> SensitivityReport:
    """Per-step distance between two trajectories and its a-priori upper bound.

    The Lipschitz constant of grad R is estimated from the two sequences as the
    largest ratio ||grad R(x_s) - grad R~(x~_s)|| / ||(x_s - x~_s, theta - theta~)||.
    """
    op = traj.config.op if op is None else op
    z = traj.z if z is None else np.asarray(z)
    S = traj.config.S
    lam = traj.config.lam
    if len(traj.states) != len(traj2.states) or traj2.config.S != S:
        raise ContractError("trajectories have different depths")
    if not np.array_equal(traj.states[0], traj2.states[0]):
        raise ContractError("trajectories must share x_init")
    if not (np.array_equal(traj.z, z) and np.array_equal(traj2.z, z)):
        raise ContractError("trajectories must share the observed data z")
    xs, xt = traj.states, traj2.states
    g = [traj.reg_grads[s] if traj.reg_grads else tdv_grad(xs[s], theta) for s in range(S)]
    gt = [traj2.reg_grads[s] if traj2.reg_grads else tdv_grad(xt[s], theta2) for s in range(S)]
    dtheta = float(np.linalg.norm(theta.flat() - theta2.flat()))
    joint = [float(np.sqrt(np.sum((xs[s] - xt[s]) ** 2) + dtheta ** 2)) for s in range(S)]
    ratios = [float(np.linalg.norm(g[s] - gt[s])) / joint[s] if joint[s] > 0 else 0.0 for s in range(S)]
    L = max(ratios)
    nAz = float(np.linalg.norm(lam * op.adjoint(z)))
    dB, nB2 = _binv_norms(T, T2, S, op, lam)
    lhs, rhs = np.zeros(S), np.zeros(S)
    for s in range(S):
        lhs[s] = np.linalg.norm(xs[s + 1] - xt[s + 1])
        rhs[s] = dB * (np.linalg.norm(xs[s]) + T / S * nAz + T / S * np.linalg.norm(g[s])) + nB2 * (
            np.linalg.norm(xs[s] - xt[s]) + abs(T - T2) / S * nAz + abs(T - T2) / S * np.linalg.norm(gt[s])
            + T / S * L * joint[s])
    return SensitivityReport(lhs, rhs, L, dB, nB2)
