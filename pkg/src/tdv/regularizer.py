"""The total deep variation regularizer R(x, theta) = sum_i r(x, theta)_i.

``r(x) = w^T N(K x)``: a zero-mean 3x3 analysis kernel K lifts the image to
``m`` feature channels, N stacks ``l`` three-scale macro-blocks, and ``w``
contracts the ``m`` output channels to one energy value per pixel.

Each macro-block is wired as follows (``Mi`` is a residual micro-block
``x + K2 phi(K1 x)``, ``down`` a blurred stride-2 convolution, ``up`` its
transposed counterpart, ``fuse`` a 1x1 convolution from 2m to m channels)::

    a1 = Mi1(in1)
    a2 = Mi2(down0(a1) + in2)
    a3 = Mi3(down1(a2) + in3)
    a4 = Mi4(fuse0(cat(up0(a3), a2)))
    out = Mi5(fuse1(cat(up1(a4), a1)))

``out`` feeds the next block's scale-1 input and (a2, a3) its scale-2/3
inputs; the first block receives zeros there.

Derivatives are hand-written: one reverse sweep through the network gives the
image and parameter gradients, and running that sweep on dual numbers
(tangent ``v`` on the image) yields ``H v`` and the mixed derivative
``d/dtheta <grad_x R, v>`` in the same pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError
from .rng import CounterRNG
from .tensor import (
    ConvSpec,
    Dual,
    conv2d,
    conv2d_adjoint,
    conv2d_adjoint_kernel_grad,
    conv2d_kernel_grad,
    dual_bilinear,
    dual_concat,
    dual_linear,
    dual_split,
    register_primitive,
)

# --------------------------------------------------------------------------
# potential


def phi(v, nu):
    """log-student-t potential: (value, first derivative, second derivative)."""
    q = 1.0 + nu * v * v
    return np.log(q) / (2.0 * nu), v / q, (1.0 - nu * v * v) / (q * q)


def _phi_val(v, nu):
    return np.log(1.0 + nu * v * v) / (2.0 * nu)


def _phi_d1(v, nu):
    return v / (1.0 + nu * v * v)


def _phi_d2(v, nu):
    q = 1.0 + nu * v * v
    return (1.0 - nu * v * v) / (q * q)


register_primitive(
    "phi",
    lambda x, nu=9.0: _phi_val(x, nu),
    lambda inp, g, nu=9.0: (_phi_d1(inp[0], nu) * g,),
    lambda d, nu=9.0: Dual(
        _phi_val(d[0].primal, nu),
        None if d[0].tangent is None else _phi_d1(d[0].primal, nu) * d[0].tangent,
    ),
)


def _dphi(u: Dual, nu) -> Dual:
    return Dual(_phi_val(u.primal, nu), None if u.tangent is None else _phi_d1(u.primal, nu) * u.tangent)


def _dphi_bwd(u: Dual, g: Dual, nu) -> Dual:
    """phi'(u) * g on dual numbers."""
    d1 = _phi_d1(u.primal, nu)
    t = None
    if g.tangent is not None:
        t = d1 * g.tangent
    if u.tangent is not None:
        tt = _phi_d2(u.primal, nu) * u.tangent * g.primal
        t = tt if t is None else t + tt
    return Dual(d1 * g.primal, t)


# --------------------------------------------------------------------------
# parameters


def param_names(l: int):
    names = ["K"]
    for i in range(l):
        for j in range(1, 6):
            names += [f"mb{i}.mi{j}.k1", f"mb{i}.mi{j}.k2"]
        names += [f"mb{i}.down0", f"mb{i}.down1", f"mb{i}.up0", f"mb{i}.up1", f"mb{i}.fuse0", f"mb{i}.fuse1"]
    names.append("w")
    return names


def param_shapes(C: int, m: int, l: int) -> dict:
    shapes = {}
    for name in param_names(l):
        if name == "K":
            shapes[name] = (m, C, 3, 3)
        elif name == "w":
            shapes[name] = (m,)
        elif ".fuse" in name:
            shapes[name] = (m, 2 * m, 1, 1)
        else:
            shapes[name] = (m, m, 3, 3)
    return shapes


@dataclass
class TdvParams:
    arrays: dict
    nu: float = 9.0
    m: int = 32
    l: int = 3
    C: int = 1

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def names(self):
        return param_names(self.l)

    def copy(self) -> "TdvParams":
        return TdvParams({k: v.copy() for k, v in self.arrays.items()}, self.nu, self.m, self.l, self.C)

    def replace(self, arrays: dict) -> "TdvParams":
        return TdvParams(dict(arrays), self.nu, self.m, self.l, self.C)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.arrays[n]) for n in self.names])

    def with_flat(self, vec) -> "TdvParams":
        out, pos = {}, 0
        for n in self.names:
            shp = self.arrays[n].shape
            size = int(np.prod(shp))
            out[n] = np.asarray(vec[pos:pos + size]).reshape(shp)
            pos += size
        return self.replace(out)


def parameter_count(theta: TdvParams) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(theta.C, theta.m, theta.l).values()))


def project_zero_mean(K):
    """Euclidean projection onto kernels whose taps sum to zero per output channel."""
    K = np.asarray(K)
    axes = tuple(range(1, K.ndim))
    mean = K.mean(axis=axes, keepdims=True)
    # a mean at rounding level is already zero: this keeps the map bit-idempotent
    scale = np.abs(K).max(axis=axes, keepdims=True)
    mean = np.where(np.abs(mean) <= 16 * np.finfo(float).eps * scale, 0.0, mean)
    return K - mean


def init_params(seed: int, C: int = 1, m: int = 32, l: int = 3, nu: float = 9.0) -> TdvParams:
    """He-style Gaussian init (std sqrt(2 / fan_in)), drawn in ``param_names`` order."""
    if m < 1 or l < 1:
        raise ValueError("m and l must be >= 1")
    rng = CounterRNG(seed)
    arrays = {}
    for name, shape in param_shapes(C, m, l).items():
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        arrays[name] = rng.normal(shape) * np.sqrt(2.0 / fan_in)
    arrays["K"] = project_zero_mean(arrays["K"])
    return TdvParams(arrays, float(nu), m, l, C)


# --------------------------------------------------------------------------
# dual-number building blocks


def _conv(x: Dual, k, stride=1, blur=False) -> Dual:
    return dual_linear(conv2d, x, ConvSpec(k, stride, blur))


def _conv_t(y: Dual, k, stride=1, blur=False) -> Dual:
    return dual_linear(conv2d_adjoint, y, ConvSpec(k, stride, blur))


def _kgrad(x: Dual, g: Dual, k, stride=1, blur=False) -> Dual:
    spec = ConvSpec(k, stride, blur)
    return dual_bilinear(lambda a, b: conv2d_kernel_grad(a, b, spec), x, g)


def _kgrad_t(y: Dual, g: Dual, k, stride=1, blur=False) -> Dual:
    spec = ConvSpec(k, stride, blur)
    return dual_bilinear(lambda a, b: conv2d_adjoint_kernel_grad(a, b, spec), y, g)


def _micro_fwd(x: Dual, k1, k2, nu):
    u = _conv(x, k1)
    v = _dphi(u, nu)
    return x + _conv(v, k2), (x, u, v)


def _micro_bwd(g: Dual, cache, k1, k2, nu, grads, prefix):
    x, u, v = cache
    gu = _dphi_bwd(u, _conv_t(g, k2), nu)
    if grads is not None:
        grads[prefix + ".k2"] = _kgrad(v, g, k2)
        grads[prefix + ".k1"] = _kgrad(x, gu, k1)
    return g + _conv_t(gu, k1)


def micro_block(x, k1, k2, nu=9.0):
    """x + K2 phi(K1 x) for m-channel ``x``."""
    x = np.asarray(x)
    if x.shape[1] != np.shape(k1)[1] or np.shape(k1)[0] != np.shape(k2)[1]:
        raise ShapeError("channel mismatch between input and micro-block kernels")
    return _micro_fwd(Dual(x), np.asarray(k1), np.asarray(k2), nu)[0].primal


def _zeros_like_scale(x: Dual, factor):
    b, c, h, w = x.primal.shape
    return Dual(np.zeros((b, c, h // factor, w // factor), dtype=x.primal.dtype))


def _macro_fwd(p, i, in1: Dual, in2: Optional[Dual], in3: Optional[Dual], nu):
    h, w = in1.primal.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"macro-block needs spatial dims divisible by 4, got {(h, w)}")
    pre = f"mb{i}"
    m = in1.primal.shape[1]
    in2 = _zeros_like_scale(in1, 2) if in2 is None else in2
    in3 = _zeros_like_scale(in1, 4) if in3 is None else in3
    c = {}
    a1, c["mi1"] = _micro_fwd(in1, p[pre + ".mi1.k1"], p[pre + ".mi1.k2"], nu)
    c["a1"] = a1
    d1 = _conv(a1, p[pre + ".down0"], 2, True) + in2
    a2, c["mi2"] = _micro_fwd(d1, p[pre + ".mi2.k1"], p[pre + ".mi2.k2"], nu)
    c["a2"] = a2
    d2 = _conv(a2, p[pre + ".down1"], 2, True) + in3
    a3, c["mi3"] = _micro_fwd(d2, p[pre + ".mi3.k1"], p[pre + ".mi3.k2"], nu)
    c["a3"] = a3
    up3 = _conv_t(a3, p[pre + ".up0"], 2, True)
    cat2 = dual_concat(up3, a2)
    c["a3"], c["cat2"] = a3, cat2
    u2 = _conv(cat2, p[pre + ".fuse0"])
    a4, c["mi4"] = _micro_fwd(u2, p[pre + ".mi4.k1"], p[pre + ".mi4.k2"], nu)
    c["a4"] = a4
    up4 = _conv_t(a4, p[pre + ".up1"], 2, True)
    cat1 = dual_concat(up4, a1)
    c["cat1"] = cat1
    u1 = _conv(cat1, p[pre + ".fuse1"])
    out, c["mi5"] = _micro_fwd(u1, p[pre + ".mi5.k1"], p[pre + ".mi5.k2"], nu)
    c["m"] = m
    return out, (out, a2, a3), c


def _macro_bwd(p, i, g_out: Dual, g_r2: Optional[Dual], g_r3: Optional[Dual], c, nu, grads):
    pre = f"mb{i}"
    m = c["m"]

    def k(name):
        return p[f"{pre}.{name}"]

    g_u1 = _micro_bwd(g_out, c["mi5"], k("mi5.k1"), k("mi5.k2"), nu, grads, pre + ".mi5")
    if grads is not None:
        grads[pre + ".fuse1"] = _kgrad(c["cat1"], g_u1, k("fuse1"))
    g_up4, g_a1 = dual_split(_conv_t(g_u1, k("fuse1")), m)
    if grads is not None:
        grads[pre + ".up1"] = _kgrad_t(c["a4"], g_up4, k("up1"), 2, True)
    g_a4 = _conv(g_up4, k("up1"), 2, True)
    g_u2 = _micro_bwd(g_a4, c["mi4"], k("mi4.k1"), k("mi4.k2"), nu, grads, pre + ".mi4")
    if grads is not None:
        grads[pre + ".fuse0"] = _kgrad(c["cat2"], g_u2, k("fuse0"))
    g_up3, g_a2 = dual_split(_conv_t(g_u2, k("fuse0")), m)
    if grads is not None:
        grads[pre + ".up0"] = _kgrad_t(c["a3"], g_up3, k("up0"), 2, True)
    g_a3 = _conv(g_up3, k("up0"), 2, True)
    if g_r3 is not None:
        g_a3 = g_a3 + g_r3
    g_d2 = _micro_bwd(g_a3, c["mi3"], k("mi3.k1"), k("mi3.k2"), nu, grads, pre + ".mi3")
    if grads is not None:
        grads[pre + ".down1"] = _kgrad(c["a2"], g_d2, k("down1"), 2, True)
    g_a2 = g_a2 + _conv_t(g_d2, k("down1"), 2, True)
    if g_r2 is not None:
        g_a2 = g_a2 + g_r2
    g_d1 = _micro_bwd(g_a2, c["mi2"], k("mi2.k1"), k("mi2.k2"), nu, grads, pre + ".mi2")
    if grads is not None:
        grads[pre + ".down0"] = _kgrad(c["a1"], g_d1, k("down0"), 2, True)
    g_a1 = g_a1 + _conv_t(g_d1, k("down0"), 2, True)
    g_in1 = _micro_bwd(g_a1, c["mi1"], k("mi1.k1"), k("mi1.k2"), nu, grads, pre + ".mi1")
    return g_in1, g_d1, g_d2


def macro_block(inputs_per_scale, theta: TdvParams, index: int = 0):
    """Run macro-block ``index``; returns (output, (output, a2, a3))."""
    in1, in2, in3 = (None if t is None else Dual(np.asarray(t)) for t in inputs_per_scale)
    out, res, _ = _macro_fwd(theta.arrays, index, in1, in2, in3, theta.nu)
    return out.primal, tuple(r.primal for r in res)


# --------------------------------------------------------------------------
# spatial extension for sizes that are not multiples of 4


def _extend(x, hp, wp):
    h, w = x.shape[2:]
    if (hp, wp) == (h, w):
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), mode="edge")


def _extend_adjoint(g, h, w):
    hp, wp = g.shape[2:]
    if (hp, wp) == (h, w):
        return g
    out = g[:, :, :h, :].copy()
    out[:, :, h - 1, :] += g[:, :, h:, :].sum(axis=2)
    res = out[:, :, :, :w].copy()
    res[:, :, :, w - 1] += out[:, :, :, w:].sum(axis=3)
    return res


# --------------------------------------------------------------------------
# evaluation engine


@dataclass
class TdvEval:
    r: np.ndarray                      # pixelwise energy (b, 1, h, w)
    grad: np.ndarray                   # grad_x R
    hvp: Optional[np.ndarray] = None   # grad_x^2 R . v
    param_grad: Optional[dict] = None  # grad_theta R
    param_hvp: Optional[dict] = None   # grad_theta <grad_x R, v>
    energy: float = field(init=False)

    def __post_init__(self):
        self.energy = self.r.sum()


def _check_input(x, theta):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected (batch, channels, height, width), got {x.shape}")
    if x.shape[1] != theta.C:
        raise ShapeError(f"image has {x.shape[1]} channels, parameters expect {theta.C}")
    return x


def _forward(x: Dual, theta: TdvParams):
    p, nu = theta.arrays, theta.nu
    f0 = _conv(x, p["K"])
    s1, s2, s3 = f0, None, None
    caches = []
    for i in range(theta.l):
        out, (_, a2, a3), c = _macro_fwd(p, i, s1, s2, s3, nu)
        caches.append(c)
        s1, s2, s3 = out, a2, a3
    return f0, s1, caches


def evaluate(x, theta: TdvParams, v=None, param_grads=False, energy_only=False) -> TdvEval:
    """Energy, gradient and optionally H v / parameter derivatives in one pass."""
    x = _check_input(x, theta)
    b, C, h, w = x.shape
    hp, wp = -(-h // 4) * 4, -(-w // 4) * 4
    xd = Dual(_extend(x, hp, wp), None if v is None else _extend(np.asarray(v), hp, wp))
    p = theta.arrays
    f0, feat, caches = _forward(xd, theta)
    wv = p["w"]
    r_full = np.tensordot(wv, feat.primal, axes=([0], [1]))[:, None]
    r = r_full[:, :, :h, :w]
    if energy_only:
        return TdvEval(r, None)

    seed = np.zeros((b, theta.m, hp, wp), dtype=np.result_type(feat.primal, wv))
    seed[:, :, :h, :w] = wv[None, :, None, None]
    g = Dual(seed)
    grads = {} if param_grads else None
    if param_grads:
        mask = np.zeros((1, 1, hp, wp))
        mask[..., :h, :w] = 1.0
        gw = feat.primal * mask
        gw_t = None if feat.tangent is None else (feat.tangent * mask).sum(axis=(0, 2, 3))
        grads["w"] = Dual(gw.sum(axis=(0, 2, 3)), gw_t)
    g_r2 = g_r3 = None
    for i in reversed(range(theta.l)):
        g, g_r2, g_r3 = _macro_bwd(p, i, g, g_r2, g_r3, caches[i], theta.nu, grads)
    if grads is not None:
        grads["K"] = _kgrad(xd, g, p["K"])
    gx = _conv_t(g, p["K"])
    grad = _extend_adjoint(gx.primal, h, w)
    hvp = None if v is None else _extend_adjoint(gx.full_tangent(), h, w)
    pg = ph = None
    if param_grads:
        pg = {n: grads[n].primal for n in theta.names}
        if v is not None:
            ph = {n: grads[n].full_tangent() for n in theta.names}
    return TdvEval(r, grad, hvp, pg, ph)


def tdv_r(x, theta: TdvParams):
    """Pixelwise deep variation r(x, theta), shape (batch, 1, h, w)."""
    return evaluate(x, theta, energy_only=True).r


def tdv_energy(x, theta: TdvParams):
    return evaluate(x, theta, energy_only=True).energy


def tdv_energies(x, theta: TdvParams):
    """Per-sample energies, shape (batch,)."""
    return tdv_r(x, theta).sum(axis=(1, 2, 3))


def tdv_grad(x, theta: TdvParams):
    return evaluate(x, theta).grad


def tdv_hvp(x, theta: TdvParams, v):
    v = np.asarray(v)
    if v.shape != np.shape(x):
        raise ShapeError(f"direction shape {v.shape} != image shape {np.shape(x)}")
    return evaluate(x, theta, v=v).hvp
