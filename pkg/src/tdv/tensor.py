"""Dense tensor kernels with exact adjoints and a small differentiation contract.

Tensors are plain numpy arrays laid out as (batch, channels, height, width).
Every convolution here uses replicate (edge-clamp) padding and is written as
cross-correlation.  Nothing coerces dtypes, so the same code runs on complex
input (used by the complex-step oracles in the test-suite).

The differentiation contract is explicit: each primitive in ``PRIMITIVES``
carries a forward map, a vector-Jacobian product and a Jacobian-vector
product.  The TDV network is built from the dual-number helpers at the
bottom of this module, which lets its hand-written reverse pass be pushed
forward once more (forward-over-reverse) for exact Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "ConvSpec",
    "Dual",
    "blur",
    "blur_adjoint",
    "conv2d",
    "conv2d_adjoint",
    "conv2d_kernel_grad",
    "conv2d_adjoint_kernel_grad",
    "check_tensor",
    "vjp",
    "jvp",
    "register_primitive",
    "PRIMITIVES",
]


def check_tensor(x, name="x"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channels, height, width), got shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    kernel: np.ndarray
    stride: int = 1
    blur: bool = False
    padding_mode: str = "replicate"

    def __post_init__(self):
        k = np.asarray(self.kernel)
        if k.ndim != 4:
            raise ShapeError(f"kernel must be (out, in, kh, kw), got {k.shape}")
        if k.shape[2] != k.shape[3] or k.shape[2] not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {k.shape[2]}x{k.shape[3]}")
        if self.stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {self.stride}")
        if self.blur and self.stride != 2:
            raise ContractError("blur requires stride 2")
        if self.padding_mode != "replicate":
            raise ContractError(f"unsupported padding mode {self.padding_mode!r}")
        object.__setattr__(self, "kernel", k)


# --------------------------------------------------------------------------
# padding and its adjoint


def _pad_edge(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def _pad_edge_adjoint(gp, p):
    """Adjoint of ``_pad_edge``: fold the border rows/cols back onto the edges."""
    g = gp.copy()
    g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
    g[:, :, -p - 1, :] += g[:, :, -p:, :].sum(axis=2)
    g = g[:, :, p:-p, :]
    g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
    g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
    return g[:, :, :, p:-p]


# --------------------------------------------------------------------------
# binomial anti-aliasing filter [1,2,1]x[1,2,1]/16, depthwise


def _blur_axis(x, axis):
    n = x.shape[axis]
    idx = np.arange(-1, n + 1).clip(0, n - 1)
    xp = np.take(x, idx, axis=axis)
    lo = np.take(xp, np.arange(0, n), axis=axis)
    mid = np.take(xp, np.arange(1, n + 1), axis=axis)
    hi = np.take(xp, np.arange(2, n + 2), axis=axis)
    return 0.25 * lo + 0.5 * mid + 0.25 * hi


def _blur_axis_adjoint(g, axis):
    n = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = n + 2
    gp = np.zeros(shape, dtype=g.dtype)

    def sl(a, b):
        s = [slice(None)] * g.ndim
        s[axis] = slice(a, b)
        return tuple(s)

    gp[sl(0, n)] += 0.25 * g
    gp[sl(1, n + 1)] += 0.5 * g
    gp[sl(2, n + 2)] += 0.25 * g
    out = gp[sl(1, n + 1)].copy()
    out[sl(0, 1)] += gp[sl(0, 1)]
    out[sl(n - 1, n)] += gp[sl(n + 1, n + 2)]
    return out


def blur(x):
    return _blur_axis(_blur_axis(x, 2), 3)


def blur_adjoint(g):
    return _blur_axis_adjoint(_blur_axis_adjoint(g, 3), 2)


# --------------------------------------------------------------------------
# raw correlation kernels (kernel array + stride)


def _im2col(x, kh, stride):
    b, c, h, w = x.shape
    p = kh // 2
    xp = _pad_edge(x, p) if p else x
    cols = [xp[:, :, dy:dy + h:stride, dx:dx + w:stride] for dy in range(kh) for dx in range(kh)]
    cols = np.stack(cols, axis=2)  # (b, c, kh*kh, h', w')
    return cols.reshape(b, c * kh * kh, -1)


def _check_conv(x, k, stride):
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("spatial dims must be >= 1")
    if stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"stride 2 needs even spatial dims, got {x.shape[2:]}")


def _corr(x, k, stride):
    _check_conv(x, k, stride)
    b, _, h, w = x.shape
    o, i, kh, _ = k.shape
    cols = _im2col(x, kh, stride)
    y = np.matmul(k.reshape(o, -1), cols)
    return y.reshape(b, o, h // stride, w // stride)


def _corr_adjoint(g, k, stride):
    b, o, ho, wo = g.shape
    if o != k.shape[0]:
        raise ShapeError(f"cotangent has {o} channels, kernel produces {k.shape[0]}")
    _, i, kh, _ = k.shape
    h, w = ho * stride, wo * stride
    p = kh // 2
    cols = np.matmul(k.reshape(o, -1).T, g.reshape(b, o, -1)).reshape(b, i, kh * kh, ho, wo)
    gp = np.zeros((b, i, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    t = 0
    for dy in range(kh):
        for dx in range(kh):
            gp[:, :, dy:dy + h:stride, dx:dx + w:stride] += cols[:, :, t]
            t += 1
    return _pad_edge_adjoint(gp, p) if p else gp


def _corr_kernel_grad(x, g, kh, stride):
    b, c, _, _ = x.shape
    cols = _im2col(x, kh, stride)
    gk = np.tensordot(g.reshape(b, g.shape[1], -1), cols, axes=([0, 2], [0, 2]))
    return gk.reshape(g.shape[1], c, kh, kh)


# --------------------------------------------------------------------------
# public convolution API


def conv2d(x, spec: ConvSpec):
    """Correlate ``x`` with ``spec.kernel``; stride 2 halves each spatial dim.

    With ``spec.blur`` the input is pre-filtered by the binomial filter, so the
    effective kernel is the learned kernel composed with [1,2,1]x[1,2,1]/16.
    """
    x = check_tensor(x)
    if spec.blur:
        _check_conv(x, spec.kernel, spec.stride)
        x = blur(x)
    return _corr(x, spec.kernel, spec.stride)


def conv2d_adjoint(y, spec: ConvSpec):
    """Exact adjoint of :func:`conv2d` (a transposed convolution)."""
    y = check_tensor(y, "y")
    x = _corr_adjoint(y, spec.kernel, spec.stride)
    return blur_adjoint(x) if spec.blur else x


def conv2d_kernel_grad(x, g, spec: ConvSpec):
    """Gradient of <conv2d(x, spec), g> with respect to the kernel."""
    x = check_tensor(x)
    if spec.blur:
        x = blur(x)
    return _corr_kernel_grad(x, g, spec.kernel.shape[2], spec.stride)


def conv2d_adjoint_kernel_grad(y, g, spec: ConvSpec):
    """Gradient of <conv2d_adjoint(y, spec), g> with respect to the kernel."""
    # <A_k^T y, g> = <y, A_k g>
    return conv2d_kernel_grad(g, y, spec)


# --------------------------------------------------------------------------
# dual numbers


@dataclass
class Dual:
    """A (primal, tangent) pair.  ``tangent=None`` stands for an exact zero."""

    primal: np.ndarray
    tangent: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tangent is not None and np.shape(self.tangent) != np.shape(self.primal):
            raise ShapeError(f"tangent shape {np.shape(self.tangent)} != primal shape {np.shape(self.primal)}")

    def full_tangent(self):
        return np.zeros_like(self.primal) if self.tangent is None else self.tangent

    def __add__(self, other):
        return Dual(self.primal + other.primal, _add_opt(self.tangent, other.tangent))

    def __sub__(self, other):
        t = other.tangent if other.tangent is None else -other.tangent
        return Dual(self.primal - other.primal, _add_opt(self.tangent, t))


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def dual_linear(f, a: Dual, *args, **kw) -> Dual:
    return Dual(f(a.primal, *args, **kw), None if a.tangent is None else f(a.tangent, *args, **kw))


def dual_bilinear(f, a: Dual, b: Dual, *args, **kw) -> Dual:
    t1 = None if a.tangent is None else f(a.tangent, b.primal, *args, **kw)
    t2 = None if b.tangent is None else f(a.primal, b.tangent, *args, **kw)
    return Dual(f(a.primal, b.primal, *args, **kw), _add_opt(t1, t2))


def dual_concat(a: Dual, b: Dual) -> Dual:
    p = np.concatenate([a.primal, b.primal], axis=1)
    if a.tangent is None and b.tangent is None:
        return Dual(p)
    return Dual(p, np.concatenate([a.full_tangent(), b.full_tangent()], axis=1))


def dual_split(a: Dual, c: int):
    t = a.tangent
    return (Dual(a.primal[:, :c], None if t is None else t[:, :c]),
            Dual(a.primal[:, c:], None if t is None else t[:, c:]))


# --------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable  # (inputs, cotangent, **params) -> tuple of input cotangents
    jvp: Callable  # (duals, **params) -> Dual


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(tag, forward, vjp_rule, jvp_rule):
    PRIMITIVES[tag] = Primitive(forward, vjp_rule, jvp_rule)


def _lookup(tag):
    try:
        return PRIMITIVES[tag]
    except KeyError:
        raise ContractError(f"unknown primitive {tag!r}; known: {sorted(PRIMITIVES)}") from None


def vjp(op_tag, inputs, output_cotangent, **params):
    """Return J^T g for each input of the primitive ``op_tag``."""
    return _lookup(op_tag).vjp(tuple(inputs), output_cotangent, **params)


def jvp(op_tag, inputs, **params) -> Dual:
    """Push (primal, tangent) pairs through the primitive ``op_tag``."""
    if isinstance(inputs, Dual):
        inputs = (inputs,)
    inputs = tuple(d if isinstance(d, Dual) else Dual(np.asarray(d)) for d in inputs)
    out = _lookup(op_tag).jvp(inputs, **params)
    return Dual(out.primal, out.full_tangent())


def _spec(kernel, stride=1, blur=False):
    return ConvSpec(np.asarray(kernel), stride, blur)


register_primitive(
    "identity",
    lambda x: x,
    lambda inp, g: (g,),
    lambda d: d[0],
)
register_primitive(
    "add",
    lambda a, b: a + b,
    lambda inp, g: (g, g),
    lambda d: d[0] + d[1],
)
register_primitive(
    "square",
    lambda x: x * x,
    lambda inp, g: (2.0 * inp[0] * g,),
    lambda d: Dual(d[0].primal ** 2, None if d[0].tangent is None else 2.0 * d[0].primal * d[0].tangent),
)
register_primitive(
    "conv2d",
    lambda x, k, stride=1, blur=False: conv2d(x, _spec(k, stride, blur)),
    lambda inp, g, stride=1, blur=False: (
        conv2d_adjoint(g, _spec(inp[1], stride, blur)),
        conv2d_kernel_grad(inp[0], g, _spec(inp[1], stride, blur)),
    ),
    lambda d, stride=1, blur=False: dual_bilinear(
        lambda x, k: conv2d(x, _spec(k, stride, blur)), d[0], d[1]),
)
register_primitive(
    "conv2d_adjoint",
    lambda y, k, stride=1, blur=False: conv2d_adjoint(y, _spec(k, stride, blur)),
    lambda inp, g, stride=1, blur=False: (
        conv2d(g, _spec(inp[1], stride, blur)),
        conv2d_adjoint_kernel_grad(inp[0], g, _spec(inp[1], stride, blur)),
    ),
    lambda d, stride=1, blur=False: dual_bilinear(
        lambda y, k: conv2d_adjoint(y, _spec(k, stride, blur)), d[0], d[1]),
)


def _fuse(a, b, k):
    return conv2d(np.concatenate([a, b], axis=1), ConvSpec(k))


def _fuse_vjp(inp, g):
    a, b, k = inp
    spec = ConvSpec(np.asarray(k))
    gc = conv2d_adjoint(g, spec)
    c = a.shape[1]
    return gc[:, :c], gc[:, c:], conv2d_kernel_grad(np.concatenate([a, b], axis=1), g, spec)


def _fuse_jvp(d):
    cat = dual_concat(d[0], d[1])
    return dual_bilinear(lambda x, k: conv2d(x, ConvSpec(k)), cat, d[2])


register_primitive("concat_fuse", _fuse, _fuse_vjp, _fuse_jvp)
