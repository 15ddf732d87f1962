"""Task operators A / A^T, conjugate gradients and operator-norm estimation.

All operators act on batched 4-D tensors.  Complex MRI data is stored as real
tensors with interleaved channels ``[re_1, im_1, re_2, im_2, ...]``, one pair
per coil, so that every inner product in the package is the real Euclidean one.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, NumericalError, ShapeError
from .rng import CounterRNG


class LinearOperator:
    """Forward/adjoint pair.  ``domain_shape``/``codomain_shape`` exclude the batch axis."""

    id = "abstract"
    domain_shape: Optional[tuple] = None
    codomain_shape: Optional[tuple] = None

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, z):
        raise NotImplementedError

    def normal(self, x):
        """A^T A x."""
        return self.adjoint(self.apply(x))

    def _check(self, x, shape, what):
        x = np.asarray(x)
        if x.ndim != 4:
            raise ShapeError(f"{self.id}: {what} must be 4-D, got {x.shape}")
        if shape is not None and tuple(x.shape[1:]) != tuple(shape):
            raise ShapeError(f"{self.id}: {what} shape {x.shape[1:]} != {tuple(shape)}")
        return x

    def describe(self) -> dict:
        return {"id": self.id}


def op_apply(A: LinearOperator, x):
    return A.apply(x)


def op_adjoint(A: LinearOperator, z):
    return A.adjoint(z)


class Identity(LinearOperator):
    id = "identity"

    def __init__(self, shape=None):
        self.domain_shape = self.codomain_shape = None if shape is None else tuple(shape)

    def apply(self, x):
        return np.asarray(x)

    def adjoint(self, z):
        return np.asarray(z)

    def normal(self, x):
        return np.asarray(x)


class MatrixOp(LinearOperator):
    """Dense matrix acting on the flattened per-sample tensor (test fixtures)."""

    id = "matrix"

    def __init__(self, M, domain_shape, codomain_shape=None):
        self.M = np.asarray(M)
        self.domain_shape = tuple(domain_shape)
        self.codomain_shape = tuple(codomain_shape) if codomain_shape else (1, 1, self.M.shape[0])
        if self.M.shape != (int(np.prod(self.codomain_shape)), int(np.prod(self.domain_shape))):
            raise ShapeError("matrix size does not match the declared shapes")

    def apply(self, x):
        x = self._check(x, self.domain_shape, "input")
        return (x.reshape(len(x), -1) @ self.M.T).reshape((len(x),) + self.codomain_shape)

    def adjoint(self, z):
        z = self._check(z, self.codomain_shape, "data")
        return (z.reshape(len(z), -1) @ self.M).reshape((len(z),) + self.domain_shape)


class CallableOp(LinearOperator):
    id = "callable"

    def __init__(self, apply, adjoint, domain_shape, codomain_shape=None):
        self._apply, self._adjoint = apply, adjoint
        self.domain_shape = tuple(domain_shape)
        self.codomain_shape = tuple(codomain_shape or domain_shape)

    def apply(self, x):
        return self._apply(x)

    def adjoint(self, z):
        return self._adjoint(z)


# --------------------------------------------------------------------------
# bicubic downsampling


def cubic_kernel(t, a=-0.5):
    t = np.abs(np.asarray(t, dtype=float))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def bicubic_matrix(n: int, gamma: int, a: float = -0.5) -> np.ndarray:
    """1-D antialiased bicubic decimation matrix (n // gamma, n), replicate boundary.

    Output sample j is centred at input coordinate (j + 0.5) * gamma - 0.5; the
    cubic kernel is stretched by gamma (support 4 gamma) and each row is
    normalized to sum to one.
    """
    if n % gamma:
        raise ShapeError(f"size {n} not divisible by scale factor {gamma}")
    M = np.zeros((n // gamma, n))
    for j in range(n // gamma):
        c = (j + 0.5) * gamma - 0.5
        lo, hi = int(np.floor(c - 2 * gamma)), int(np.ceil(c + 2 * gamma))
        idx = np.arange(lo, hi + 1)
        wts = cubic_kernel((c - idx) / gamma, a) / gamma
        wts /= wts.sum()
        np.add.at(M[j], idx.clip(0, n - 1), wts)
    return M


class BicubicDown(LinearOperator):
    id = "bicubic_down"

    def __init__(self, gamma: int, shape):
        if gamma < 1:
            raise ContractError("scale factor must be >= 1")
        C, H, W = shape
        self.gamma = int(gamma)
        self.domain_shape = (C, H, W)
        self.codomain_shape = (C, H // gamma, W // gamma)
        self.Mh = bicubic_matrix(H, gamma)
        self.Mw = bicubic_matrix(W, gamma)

    def apply(self, x):
        x = self._check(x, self.domain_shape, "input")
        return np.einsum("ih,bchw,jw->bcij", self.Mh, x, self.Mw, optimize=True)

    def adjoint(self, z):
        z = self._check(z, self.codomain_shape, "data")
        return np.einsum("ih,bcij,jw->bchw", self.Mh, z, self.Mw, optimize=True)

    def describe(self):
        return {"id": self.id, "gamma": self.gamma, "shape": list(self.domain_shape)}


# --------------------------------------------------------------------------
# parallel MRI


class MriOp(LinearOperator):
    """x -> {M F C_i x}_i with orthonormal 2-D DFT.

    ``complex_domain=False`` takes real images (b, 1, H, W) and its adjoint
    returns the real part; ``True`` takes (b, 2, H, W) real/imag pairs.
    """

    id = "mri"

    def __init__(self, mask, coils=None, complex_domain=False):
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ShapeError("mask must be 2-D (H, W)")
        if not np.all((mask == 0) | (mask == 1)):
            raise ContractError("mask entries must be 0 or 1")
        H, W = mask.shape
        if coils is None:
            coils = np.ones((1, H, W), dtype=complex)
        coils = np.asarray(coils, dtype=complex)
        if coils.ndim != 3 or coils.shape[1:] != (H, W):
            raise ShapeError(f"coil maps must be (n_coils, {H}, {W}), got {coils.shape}")
        if not np.all(np.isfinite(coils)):
            raise ContractError("coil maps must be finite")
        self.mask = mask.astype(float)
        self.coils = coils
        self.complex_domain = complex_domain
        self.domain_shape = (2 if complex_domain else 1, H, W)
        self.codomain_shape = (2 * len(coils), H, W)

    def _to_complex(self, x):
        return x[:, 0] + 1j * x[:, 1] if self.complex_domain else x[:, 0].astype(complex)

    def apply(self, x):
        x = self._check(x, self.domain_shape, "input")
        img = self._to_complex(x)[:, None]
        k = np.fft.fft2(self.coils[None] * img, norm="ortho") * self.mask
        out = np.empty((len(x), 2 * len(self.coils)) + self.mask.shape)
        out[:, 0::2], out[:, 1::2] = k.real, k.imag
        return out

    def adjoint(self, z):
        z = self._check(z, self.codomain_shape, "data")
        k = (z[:, 0::2] + 1j * z[:, 1::2]) * self.mask
        img = (np.conj(self.coils)[None] * np.fft.ifft2(k, norm="ortho")).sum(axis=1)
        if self.complex_domain:
            return np.stack([img.real, img.imag], axis=1)
        return img.real[:, None]

    def describe(self):
        return {"id": self.id, "n_coils": len(self.coils), "shape": list(self.mask.shape),
                "sampled_fraction": float(self.mask.mean())}


# --------------------------------------------------------------------------
# parallel-beam CT


def radon_matrix(n: int, angles, n_det: Optional[int] = None) -> sp.csr_matrix:
    """Joseph-style parallel-beam projector for an n x n image, unit pixel/detector spacing.

    For each ray the sum runs along the axis the ray is most aligned with;
    in the other coordinate the image is linearly interpolated.  Samples that
    fall outside the image contribute nothing.
    """
    angles = np.asarray(angles, dtype=float)
    n_det = int(np.ceil(n * np.sqrt(2.0))) | 1 if n_det is None else int(n_det)
    centre = (n - 1) / 2.0
    t = np.arange(n_det) - (n_det - 1) / 2.0
    grid = np.arange(n) - centre
    rows, cols, vals = [], [], []
    for a, th in enumerate(angles):
        c, s = np.cos(th), np.sin(th)
        # ray: x c + y s = t
        if abs(s) >= abs(c):
            # step over columns (x), interpolate in y
            X = grid[None, :]
            Y = (t[:, None] - X * c) / s
            step = 1.0 / abs(s)
            pos = Y + centre
            fixed = np.broadcast_to(np.arange(n)[None, :], pos.shape)
            along_rows = True
        else:
            Y = grid[None, :]
            X = (t[:, None] - Y * s) / c
            step = 1.0 / abs(c)
            pos = X + centre
            fixed = np.broadcast_to(np.arange(n)[None, :], pos.shape)
            along_rows = False
        det = np.broadcast_to(np.arange(n_det)[:, None], pos.shape)
        i0 = np.floor(pos).astype(int)
        f = pos - i0
        for idx, wt in ((i0, 1.0 - f), (i0 + 1, f)):
            ok = (idx >= 0) & (idx < n) & (wt > 0)
            if along_rows:
                pix = idx[ok] * n + fixed[ok]
            else:
                pix = fixed[ok] * n + idx[ok]
            rows.append(a * n_det + det[ok])
            cols.append(pix)
            vals.append(step * wt[ok])
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(angles) * n_det, n * n))
    return M.tocsr()


class RadonOp(LinearOperator):
    """Parallel-beam discrete Radon transform; adjoint is unfiltered backprojection."""

    id = "radon"

    def __init__(self, n: int, angles=None, n_angles: int = 32, n_det: Optional[int] = None):
        if angles is None:
            angles = np.linspace(0.0, np.pi, n_angles, endpoint=False)
        self.angles = np.asarray(angles, dtype=float)
        self.n = int(n)
        self.M = radon_matrix(self.n, self.angles, n_det)
        self.n_det = self.M.shape[0] // len(self.angles)
        self.MT = self.M.T.tocsr()
        self.domain_shape = (1, self.n, self.n)
        self.codomain_shape = (1, len(self.angles), self.n_det)

    def apply(self, x):
        x = self._check(x, self.domain_shape, "input")
        return (self.M @ x.reshape(len(x), -1).T).T.reshape((len(x),) + self.codomain_shape)

    def adjoint(self, z):
        z = self._check(z, self.codomain_shape, "data")
        return (self.MT @ z.reshape(len(z), -1).T).T.reshape((len(z),) + self.domain_shape)

    def describe(self):
        return {"id": self.id, "n": self.n, "n_angles": len(self.angles), "n_det": self.n_det}


def make_operator(desc: dict, shape=None) -> LinearOperator:
    """Build an operator from a config record such as ``{"id": "bicubic_down", "gamma": 2}``."""
    kind = desc.get("id", "identity")
    if kind == "identity":
        return Identity()
    if kind == "bicubic_down":
        return BicubicDown(int(desc.get("gamma", 2)), desc.get("shape", shape))
    if kind == "radon":
        n = int(desc.get("n", shape[-1] if shape else 32))
        step = int(desc.get("undersample", 1))
        full = np.linspace(0.0, np.pi, int(desc.get("n_angles", 32)), endpoint=False)
        return RadonOp(n, full[::step], n_det=desc.get("n_det"))
    if kind == "mri":
        H, W = shape[-2:] if shape else desc["shape"]
        mask = cartesian_mask(H, W, int(desc.get("acceleration", 1)), int(desc.get("center_lines", 4)))
        return MriOp(mask)
    raise ContractError(f"unknown operator id {kind!r}")


def cartesian_mask(H: int, W: int, acceleration: int, center_lines: int = 4) -> np.ndarray:
    """Equispaced Cartesian line mask along the phase-encode (row) axis plus a fully sampled centre."""
    mask = np.zeros((H, W))
    mask[::max(acceleration, 1)] = 1.0
    # low frequencies sit at the array corners with an unshifted FFT
    half = center_lines // 2
    mask[:half] = 1.0
    if center_lines - half:
        mask[H - (center_lines - half):] = 1.0
    return mask


# --------------------------------------------------------------------------
# conjugate gradients and power iteration


def _dot(a, b, per_sample):
    if per_sample:
        return np.sum(a * b, axis=tuple(range(1, a.ndim)), keepdims=True)
    return np.sum(a * b)


def cg_solve(apply_B: Callable, rhs, iters: int, tol: float = 0.0, per_sample: bool = False,
             callback: Optional[Callable] = None):
    """Conjugate gradients for B x = rhs from x = 0.

    Stops after ``iters`` iterations or once ||r|| <= tol ||rhs||.  With
    ``per_sample`` every leading-axis slice is an independent system with its
    own step sizes, so results do not depend on batch composition.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    rhs = np.asarray(rhs)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = _dot(r, r, per_sample)
    stop = (tol * tol) * rr
    active = rr > stop if per_sample else None
    if not per_sample and not rr > stop:
        return x
    for _ in range(iters):
        if per_sample and not np.any(active):
            break
        Bp = apply_B(p)
        pBp = _dot(p, Bp, per_sample)
        if per_sample:
            if np.any(pBp[active] <= 0):
                raise NumericalError("CG breakdown: p^T B p <= 0, operator is not SPD")
            alpha = np.where(active, rr / np.where(active, pBp, 1.0), 0.0)
        else:
            if pBp <= 0:
                raise NumericalError("CG breakdown: p^T B p <= 0, operator is not SPD")
            alpha = rr / pBp
        x = x + alpha * p
        r = r - alpha * Bp
        rr_new = _dot(r, r, per_sample)
        if callback is not None:
            callback(x)
        if per_sample:
            active = active & (rr_new > stop)
            beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        else:
            if not rr_new > stop:
                break
            beta = rr_new / rr
        p = r + beta * p
        rr = rr_new
    return x


def estimate_opnorm(A: LinearOperator, iters: int = 50, shape: Optional[Sequence[int]] = None,
                    seed: int = 0) -> float:
    """Spectral norm estimate: power iteration on A^T A, sqrt of the Rayleigh quotient.

    For a PSD matrix the Rayleigh quotient of (A^T A)^k v0 is nondecreasing in k.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    shape = tuple(shape) if shape is not None else A.domain_shape
    if shape is None:
        raise ContractError("operator has no fixed domain; pass shape")
    if len(shape) == 3:
        shape = (1,) + shape
    v = CounterRNG(seed).normal(shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for k in range(iters):
        Av = A.apply(v)
        est = float(np.sum(Av * Av))  # ||A v||^2 with ||v|| = 1
        w = A.adjoint(Av)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    return float(np.sqrt(est))
