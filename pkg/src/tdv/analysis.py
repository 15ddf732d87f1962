"""Nonlinear eigenpairs, energy landscapes, image metrics and the
accelerated gradient solver used to transfer a trained regularizer to
other linear inverse problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, NumericalError, ShapeError
from .operators import Identity, LinearOperator, cg_solve
from .regularizer import TdvParams, evaluate, tdv_grad, tdv_r
from .rng import CounterRNG

PSNR_INF = float("inf")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
L_CEILING = 1e12


def _dot(a, b):
    return float(np.vdot(a, b).real)


def _norm(a):
    return float(np.sqrt(_dot(a, a)))


# --------------------------------------------------------------------------
# eigenpairs


@dataclass
class Eigenpair:
    x_bar: np.ndarray
    lambda_bar: float
    residual: float
    norm_violation: float = 0.0
    steps: int = 0
    step_size: float = 0.0


def estimate_curvature(hvp_fn: Callable, x, iters: int = 20, seed: int = 0) -> float:
    """Largest |eigenvalue| of the Hessian at x by power iteration on hvp_fn."""
    v = CounterRNG(seed).normal(np.shape(x))
    v /= _norm(v)
    lam = 0.0
    for _ in range(iters):
        w = hvp_fn(x, v)
        lam = _norm(w)
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def _fd_hvp(grad_fn):
    def hvp(x, v):
        eps = 1e-6 * max(1.0, _norm(x))
        return (grad_fn(x + eps * v) - grad_fn(x - eps * v)) / (2 * eps)
    return hvp


def _eig_stats(grad_fn, x, delta):
    g = grad_fn(x)
    lam = _dot(g, x) / _dot(x, x)
    res = _norm(g - lam * x) / max(_norm(g), delta)
    return lam, res


def eigenpair_solve(grad_fn: Callable, x_init, steps: int = 1000, step_size: Optional[float] = None,
                    hvp_fn: Optional[Callable] = None, tol: Optional[float] = None,
                    check_every: int = 10, delta: float = 1e-12) -> Eigenpair:
    """Minimize a functional on the sphere ||x|| = ||x_init|| by accelerated projected gradient.

    x_{k+1} = P(xh_k - tau grad_fn(xh_k)),  xh_k = x_k + (k-1)/(k+2) (x_k - x_{k-1}),
    P(v) = ||x_init|| v / ||v||.  The limit satisfies grad_fn(x) = lambda x.

    step_size defaults to 1/L with L from a power iteration on the Hessian at
    x_init (hvp_fn, or central differences of grad_fn).  With ``tol`` the loop
    stops once the residual drops below it.
    """
    x0 = np.array(x_init, dtype=float)
    radius = _norm(x0)
    if radius == 0.0:
        raise NumericalError("x_init must be nonzero")
    if step_size is None:
        L = estimate_curvature(hvp_fn or _fd_hvp(grad_fn), x0)
        step_size = 1.0 / L if L > 0 else 1.0

    def proj(v):
        nv = _norm(v)
        if nv == 0.0 or not np.isfinite(nv):
            raise NumericalError("projection onto the sphere of a zero or non-finite vector")
        return (radius / nv) * v

    x_prev = x = x0
    k_done = 0
    for k in range(1, steps + 1):
        xh = x + ((k - 1) / (k + 2)) * (x - x_prev)
        x_prev, x = x, proj(xh - step_size * grad_fn(xh))
        k_done = k
        if tol is not None and k % check_every == 0 and _eig_stats(grad_fn, x, delta)[1] < tol:
            break
    lam, res = _eig_stats(grad_fn, x, delta)
    return Eigenpair(x, lam, res, abs(_norm(x) - radius) / radius, k_done, step_size)


def tdv_eigenpair(x_init, theta: TdvParams, steps: int = 5000, step_size=None, tol=None) -> Eigenpair:
    return eigenpair_solve(lambda x: tdv_grad(x, theta), x_init, steps, step_size,
                           hvp_fn=lambda x, v: evaluate(x, theta, v=v).hvp, tol=tol)


# --------------------------------------------------------------------------
# landscapes


@dataclass
class LandscapeGrid:
    xi1_axis: np.ndarray
    xi2_axis: np.ndarray
    values: np.ndarray  # values[a, b] = r(xi1[a] x + xi2[b] n)_i
    index: tuple = field(default=())

    def rows(self):
        for a, s in enumerate(self.xi1_axis):
            for b, t in enumerate(self.xi2_axis):
                yield float(s), float(t), float(self.values[a, b])


def _as_image(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4 and x.shape[0] == 1:
        return x
    raise ShapeError(f"expected a single patch, got shape {x.shape}")


def landscape(x, n, i, grid_res: int, theta: TdvParams, chunk: int = 64) -> LandscapeGrid:
    """r(xi1 x + xi2 n) at pixel i over [-1, 1]^2.

    i is a flat pixel index or a (row, col) pair.
    """
    x, n = _as_image(x), _as_image(n)
    if x.shape != n.shape:
        raise ShapeError(f"x {x.shape} and n {n.shape} differ")
    H, W = x.shape[-2:]
    if np.ndim(i) == 0:
        i = int(i)
        if not 0 <= i < H * W:
            raise ShapeError(f"pixel index {i} outside a {H}x{W} image")
        idx = divmod(i, W)
    else:
        idx = tuple(int(t) for t in i)
        if len(idx) != 2 or not (0 <= idx[0] < H and 0 <= idx[1] < W):
            raise ShapeError(f"pixel index {i} outside a {H}x{W} image")
    if grid_res < 2:
        raise ContractError("grid_res must be at least 2")
    axis = np.linspace(-1.0, 1.0, grid_res)
    s1, s2 = np.meshgrid(axis, axis, indexing="ij")
    s1, s2 = s1.ravel(), s2.ravel()
    vals = np.empty(s1.size)
    for a in range(0, s1.size, chunk):
        b = slice(a, a + chunk)
        batch = s1[b, None, None, None] * x + s2[b, None, None, None] * n
        vals[b] = tdv_r(batch, theta)[:, 0, idx[0], idx[1]]
    if not np.all(np.isfinite(vals)):
        raise NumericalError("non-finite landscape value")
    return LandscapeGrid(axis, axis.copy(), vals.reshape(grid_res, grid_res), idx)


# --------------------------------------------------------------------------
# metrics


def psnr(x, y, peak: float = 1.0) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeError(f"{x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(peak * peak / mse))


def psnr_batch(x, y, peak: float = 1.0) -> np.ndarray:
    return np.array([psnr(a, b, peak) for a, b in zip(x, y)])


def to_luma(rgb, channel_axis: int = -3):
    """BT.601 luma of [0, 1] RGB data; the channel axis must have length 3."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.shape[channel_axis] != 3:
        raise ShapeError(f"expected 3 channels on axis {channel_axis}, got {rgb.shape}")
    w = np.array(LUMA_WEIGHTS)
    return np.tensordot(np.moveaxis(rgb, channel_axis, -1), w, axes=([-1], [0]))


# --------------------------------------------------------------------------
# accelerated gradient descent with Lipschitz backtracking


@dataclass
class AgdStep:
    k: int
    L: float
    energy: float         # E(x_{k+1})
    energy_relaxed: float  # E(xh_k)
    backtracks: int


def agd_lipschitz_solve(energy_fn: Callable, grad_fn: Callable, x0, max_iters: int,
                        L0: float = 1.0, history: Optional[list] = None, tol: float = 0.0):
    """Minimize a smooth energy.

    Each iteration over-relaxes xh = x_k + (x_k - x_{k-1})/sqrt(2), then tries
    x_{k+1} = xh - grad(xh)/L until the quadratic upper model at xh holds
    (accepting halves L, rejecting doubles it).  Accepted steps therefore
    satisfy E(x_{k+1}) <= E(xh).  If ``history`` is a list, one AgdStep is
    appended per iteration.  Stops early once the step norm is <= tol.
    """
    beta = 1.0 / np.sqrt(2.0)
    x_prev = x = np.array(x0, dtype=float)
    L = float(L0)
    for k in range(1, max_iters + 1):
        xh = x + beta * (x - x_prev)
        g = grad_fn(xh)
        e_h = float(energy_fn(xh))
        tries = 0
        while True:
            cand = xh - g / L
            d = cand - xh
            q = _dot(d, g) + 0.5 * L * _dot(d, d)
            e_c = float(energy_fn(cand))
            if e_c <= e_h + q:
                L /= 2.0
                break
            L *= 2.0
            tries += 1
            if L > L_CEILING:
                raise NumericalError(f"Lipschitz estimate exceeded {L_CEILING:g}")
        if history is not None:
            history.append(AgdStep(k, 2.0 * L, e_c, e_h, tries))
        x_prev, x = x, cand
        if _norm(x - x_prev) <= tol:
            break
    return x


def transfer_energy(A: LinearOperator, z, theta: Optional[TdvParams], lam: float):
    """(energy, gradient) callables for (lam/2)||A x - z||^2 + R(x, theta)."""
    z = np.asarray(z)
    Atz = A.adjoint(z)

    def energy(x):
        res = A.apply(x) - z
        e = 0.5 * lam * _dot(res, res)
        if theta is not None:
            e += float(evaluate(x, theta, energy_only=True).energy)
        return e

    def grad(x):
        g = lam * (A.normal(x) - Atz)
        if theta is not None:
            g = g + tdv_grad(x, theta)
        return g

    return energy, grad


def cg_initialization(A: LinearOperator, z, iters: Optional[int] = None):
    """Data-term initialization: zero-filled adjoint for MRI, otherwise CG on A^T A x = A^T z
    (3 iterations for super-resolution, 50 for CT and others by default)."""
    Atz = A.adjoint(z)
    if A.id == "mri" and iters is None:
        return Atz
    if isinstance(A, Identity):
        return np.array(z, dtype=float, copy=True)
    if iters is None:
        iters = 3 if A.id == "bicubic_down" else 50
    return cg_solve(A.normal, Atz, iters, per_sample=True)


def transfer_reconstruct(A: LinearOperator, z, theta: Optional[TdvParams], lam: float, x0=None,
                         iters: int = 200, history: Optional[list] = None, L0: float = 1.0):
    if lam <= 0:
        raise ContractError("lam must be positive")
    if x0 is None:
        x0 = cg_initialization(A, z)
    energy, grad = transfer_energy(A, z, theta, lam)
    return agd_lipschitz_solve(energy, grad, x0, iters, L0=L0, history=history)
