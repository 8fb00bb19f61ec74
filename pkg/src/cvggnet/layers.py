"""Complex-valued network layers with forward and backward rules.

Each functional op records itself on the active tape (see
:mod:`cvggnet.autodiff`).  The module classes at the bottom bundle an op
with its parameters and are what the model builders assemble.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .autodiff import Parameter, Variable, _check_precision, record
from .tensor import ComplexTensor, RealTensor, ShapeError


class PoolVariant(str, enum.Enum):
    REAL_SPLIT = "real-split"
    AMPLITUDE = "amplitude"
    AREA = "area"


class Activation(str, enum.Enum):
    CRELU = "crelu"
    CTANH = "ctanh"
    CELU = "celu"
    CPRELU = "cprelu"


_POOL_MODE = {
    PoolVariant.AMPLITUDE: _kernels.AMPLITUDE,
    PoolVariant.AREA: _kernels.AREA,
    PoolVariant.REAL_SPLIT: _kernels.REAL_SPLIT,
}

ELU_ALPHA = 1.0
PRELU_INIT = 0.25


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """[N,C,H,W] (already padded) -> [N*H'*W', C*kh*kw]."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw] += cols[:, :, a, b]
    return out


def complex_conv2d(x: Variable, weight: Parameter, bias: Parameter | None = None,
                   stride=1, padding=0) -> Variable:
    """Complex cross-correlation built from four real convolutions.

    With kernel ``A + Bj`` and input ``x + yj`` the output is
    ``(A*x - B*y) + (A*y + B*x)j``.
    """
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}")
    _check_precision(x, weight)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1

    pad = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    xr = np.pad(x.re, pad) if ph or pw else x.re
    xi = np.pad(x.im, pad) if ph or pw else x.im
    padded_shape = xr.shape
    cr = _im2col(xr, kh, kw, sh, sw)
    ci = _im2col(xi, kh, kw, sh, sw)
    A = weight.re.reshape(cout, -1)
    B = weight.im.reshape(cout, -1)

    out_r = cr @ A.T - ci @ B.T
    out_i = ci @ A.T + cr @ B.T
    if bias is not None:
        out_r += bias.re
        out_i += bias.im
    out_r = np.ascontiguousarray(out_r.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    out_i = np.ascontiguousarray(out_i.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        gr = g[0].transpose(0, 2, 3, 1).reshape(-1, cout)
        gi = g[1].transpose(0, 2, 3, 1).reshape(-1, cout)
        dA = gr.T @ cr + gi.T @ ci
        dB = gi.T @ cr - gr.T @ ci
        grads = [None, (dA.reshape(weight.shape), dB.reshape(weight.shape))]
        if x.requires_grad:
            dcr = gr @ A + gi @ B
            dci = gi @ A - gr @ B
            dxr = _col2im(dcr, padded_shape, kh, kw, sh, sw, ho, wo)
            dxi = _col2im(dci, padded_shape, kh, kw, sh, sw, ho, wo)
            if ph or pw:
                dxr = dxr[:, :, ph:ph + h, pw:pw + w]
                dxi = dxi[:, :, ph:ph + h, pw:pw + w]
            grads[0] = (dxr, dxi)
        if bias is not None:
            grads.append((gr.sum(axis=0), gi.sum(axis=0)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(ComplexTensor.wrap(out_r, out_i), inputs, back, "complex_conv2d")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class ComplexBNState:
    """Per-channel whitening statistics and affine parameters.

    ``gamma`` packs the diagonal of the symmetric scaling matrix as
    ``gamma_rr + j gamma_ii``; the off-diagonal lives in ``gamma_ri``.
    """

    gamma: Parameter
    gamma_ri: Parameter
    beta: Parameter
    running_mean: np.ndarray  # [2, C]: real, imaginary
    running_cov: np.ndarray  # [3, C]: V_rr, V_ri, V_ii
    momentum: float = 0.1
    eps: float = 1e-5
    affine: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum=0.1, eps=1e-5, affine=True, name="bn"):
        if not 0 < momentum < 1:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        g = np.full(channels, 1 / math.sqrt(2), dtype=dtype)
        return cls(
            gamma=Parameter(ComplexTensor(g, g), name=f"{name}.gamma"),
            gamma_ri=Parameter(ComplexTensor.zeros((channels,), dtype), name=f"{name}.gamma_ri", kind="real"),
            beta=Parameter(ComplexTensor.zeros((channels,), dtype), name=f"{name}.beta"),
            running_mean=np.zeros((2, channels), dtype=dtype),
            running_cov=np.array([np.ones(channels), np.zeros(channels), np.ones(channels)], dtype=dtype),
            momentum=momentum,
            eps=eps,
            affine=affine,
        )

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.gamma_ri, self.beta] if self.affine else []


def inv_sqrt_2x2(vrr, vri, vii):
    """Closed-form inverse square root of SPD matrices [[vrr, vri], [vri, vii]].

    Returns the entries (w11, w12, w22) plus the intermediates (s, t).
    """
    s = np.sqrt(vrr * vii - vri * vri)
    t = np.sqrt(vrr + vii + 2 * s)
    k = 1.0 / (s * t)
    return k * (vii + s), -k * vri, k * (vrr + s), s, t


def complex_batchnorm(x: Variable, state: ComplexBNState, training: bool) -> Variable:
    """Whiten each channel by the inverse square root of its 2x2 covariance."""
    if x.value.ndim < 2:
        raise ShapeError(f"batchnorm expects [N,C,...], got {x.shape}")
    c = x.shape[1]
    if state.gamma.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but state has {state.gamma.shape[0]}")
    axes = (0,) + tuple(range(2, x.value.ndim))
    bshape = (1, c) + (1,) * (x.value.ndim - 2)
    count = x.value.size // c if c else 0
    eps = state.eps
    dt = x.dtype

    def bc(v):
        return np.asarray(v, dtype=dt).reshape(bshape)

    if training:
        if count < 2:
            raise ShapeError(f"batchnorm training needs at least 2 values per channel, got {count}")
        mr = x.re.mean(axis=axes)
        mi = x.im.mean(axis=axes)
        cr = x.re - bc(mr)
        ci = x.im - bc(mi)
        vrr = (cr * cr).mean(axis=axes)
        vri = (cr * ci).mean(axis=axes)
        vii = (ci * ci).mean(axis=axes)
        m = state.momentum
        state.running_mean[0] = (1 - m) * state.running_mean[0] + m * mr
        state.running_mean[1] = (1 - m) * state.running_mean[1] + m * mi
        state.running_cov[0] = (1 - m) * state.running_cov[0] + m * vrr
        state.running_cov[1] = (1 - m) * state.running_cov[1] + m * vri
        state.running_cov[2] = (1 - m) * state.running_cov[2] + m * vii
    else:
        cr = x.re - bc(state.running_mean[0])
        ci = x.im - bc(state.running_mean[1])
        vrr, vri, vii = (state.running_cov[i].astype(dt) for i in range(3))

    a = vrr + eps
    d = vii + eps
    b = vri
    w11, w12, w22, s, t = inv_sqrt_2x2(a, b, d)
    xr_hat = bc(w11) * cr + bc(w12) * ci
    xi_hat = bc(w12) * cr + bc(w22) * ci

    if state.affine:
        g_rr, g_ii, g_ri = state.gamma.re, state.gamma.im, state.gamma_ri.re
        out_r = bc(g_rr) * xr_hat + bc(g_ri) * xi_hat + bc(state.beta.re)
        out_i = bc(g_ri) * xr_hat + bc(g_ii) * xi_hat + bc(state.beta.im)
        inputs = (x, state.gamma, state.gamma_ri, state.beta)
    else:
        out_r, out_i = xr_hat, xi_hat
        inputs = (x,)

    def back(g):
        gr, gi = g
        grads = []
        if state.affine:
            dr = bc(g_rr) * gr + bc(g_ri) * gi
            di = bc(g_ri) * gr + bc(g_ii) * gi
            d_gamma = ((gr * xr_hat).sum(axis=axes), (gi * xi_hat).sum(axis=axes))
            d_gamma_ri = (gr * xi_hat + gi * xr_hat).sum(axis=axes)
            param_grads = [d_gamma, (d_gamma_ri, np.zeros_like(d_gamma_ri)),
                           (gr.sum(axis=axes), gi.sum(axis=axes))]
        else:
            dr, di = gr, gi
            param_grads = []
        if not x.requires_grad:
            return [None] + param_grads
        dcr = bc(w11) * dr + bc(w12) * di
        dci = bc(w12) * dr + bc(w22) * di
        if training:
            g11 = (dr * cr).sum(axis=axes)
            g12 = (dr * ci + di * cr).sum(axis=axes)
            g22 = (di * ci).sum(axis=axes)
            k = 1.0 / (s * t)
            dva, dvb, dvd = _inv_sqrt_vjp(a, b, d, s, t, k, g11, g12, g22)
            dcr = dcr + bc(2 * dva / count) * cr + bc(dvb / count) * ci
            dci = dci + bc(2 * dvd / count) * ci + bc(dvb / count) * cr
            dcr = dcr - bc(dcr.mean(axis=axes))
            dci = dci - bc(dci.mean(axis=axes))
        return [(dcr, dci)] + param_grads

    return record(ComplexTensor.wrap(out_r, out_i), inputs, back, "complex_batchnorm")


def _inv_sqrt_vjp(a, b, d, s, t, k, g11, g12, g22):
    """Pull the gradient of (w11, w12, w22) back to the covariance entries (a, b, d)."""
    ds = {"a": d / (2 * s), "b": -b / s, "d": a / (2 * s)}
    dtr = {"a": 1.0, "b": 0.0, "d": 1.0}
    out = []
    for v in ("a", "b", "d"):
        dt_v = (dtr[v] + 2 * ds[v]) / (2 * t)
        dk = -k * (ds[v] / s + dt_v / t)
        dw11 = dk * (d + s) + k * ((v == "d") + ds[v])
        dw12 = -dk * b - k * (v == "b")
        dw22 = dk * (a + s) + k * ((v == "a") + ds[v])
        out.append(g11 * dw11 + g12 * dw12 + g22 * dw22)
    return out


# ---------------------------------------------------------------------------
# activations


def activation(x: Variable, kind: Activation | str, slope: Parameter | None = None) -> Variable:
    """Apply a real scalar activation separately to the real and imaginary parts.

    Kinks take the right-hand derivative.  CPReLU uses one slope per channel
    (axis 1), shared by both parts.
    """
    kind = Activation(kind)
    xr, xi = x.re, x.im
    if kind is Activation.CRELU:
        mr, mi = xr >= 0, xi >= 0
        value = ComplexTensor.wrap(np.where(mr, xr, 0).astype(x.dtype), np.where(mi, xi, 0).astype(x.dtype))
        return record(value, (x,), lambda g: ((g[0] * mr, g[1] * mi),), "crelu")
    if kind is Activation.CTANH:
        tr, ti = np.tanh(xr), np.tanh(xi)
        value = ComplexTensor.wrap(tr, ti)
        return record(value, (x,), lambda g: ((g[0] * (1 - tr * tr), g[1] * (1 - ti * ti)),), "ctanh")
    if kind is Activation.CELU:
        er = np.expm1(np.minimum(xr, 0)) * ELU_ALPHA
        ei = np.expm1(np.minimum(xi, 0)) * ELU_ALPHA
        mr, mi = xr >= 0, xi >= 0
        value = ComplexTensor.wrap(np.where(mr, xr, er), np.where(mi, xi, ei))
        dr = np.where(mr, 1, er + ELU_ALPHA).astype(x.dtype)
        di = np.where(mi, 1, ei + ELU_ALPHA).astype(x.dtype)
        return record(value, (x,), lambda g: ((g[0] * dr, g[1] * di),), "celu")
    # CPReLU
    if slope is None:
        raise ValueError("CPReLU needs a slope parameter")
    c = x.shape[1]
    if slope.shape != (c,):
        raise ShapeError(f"cprelu: {c} channels but {slope.shape[0]} slopes")
    _check_precision(x, slope)
    bshape = (1, c) + (1,) * (x.value.ndim - 2)
    alpha = slope.re.reshape(bshape)
    mr, mi = xr >= 0, xi >= 0
    value = ComplexTensor.wrap(np.where(mr, xr, alpha * xr), np.where(mi, xi, alpha * xi))
    axes = (0,) + tuple(range(2, x.value.ndim))

    def back(g):
        gr, gi = g
        dx = (np.where(mr, gr, alpha * gr), np.where(mi, gi, alpha * gi))
        da = (np.where(mr, 0, gr * xr) + np.where(mi, 0, gi * xi)).sum(axis=axes)
        return dx, (da, np.zeros_like(da))

    return record(value, (x, slope), back, "cprelu")


# ---------------------------------------------------------------------------
# pooling


@dataclass
class PoolIndices:
    """Selected flat in-window offsets; ``re`` and ``im`` differ only for real-split."""

    re: np.ndarray
    im: np.ndarray
    window: int
    stride: int


def complex_maxpool(x: Variable, variant: PoolVariant | str, window: int = 2,
                    stride: int | None = None) -> tuple[Variable, PoolIndices]:
    """Complex max-pooling without padding; partial windows are dropped.

    amplitude keeps the element of largest modulus, area the element of
    largest ``|re*im|``, real-split takes the max of each part separately.
    Ties resolve to the first element in row-major window order.
    """
    variant = PoolVariant(variant)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")
    if x.value.ndim != 4:
        raise ShapeError(f"maxpool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input extent {h}x{w}")
    out_r, out_i, idx_re, idx_im = _kernels.pool_forward(x.re, x.im, window, stride, _POOL_MODE[variant])
    indices = PoolIndices(idx_re, idx_im, window, stride)
    in_shape = x.shape

    def back(g):
        return (_kernels.pool_backward(g[0], g[1], idx_re, idx_im, in_shape, window, stride),)

    out = record(ComplexTensor.wrap(out_r, out_i), (x,), back, f"maxpool_{variant.value}")
    return out, indices


# ---------------------------------------------------------------------------
# dense layers and heads


def flatten(x: Variable) -> Variable:
    shape = x.shape
    n = shape[0]
    value = ComplexTensor.wrap(x.re.reshape(n, -1).copy(), x.im.reshape(n, -1).copy())
    return record(value, (x,), lambda g: ((g[0].reshape(shape), g[1].reshape(shape)),), "flatten")


def complex_linear(x: Variable, weight: Parameter, bias: Parameter | None = None) -> Variable:
    """``(A + Bj)(x + yj)`` with matrix products in place of convolutions."""
    if x.value.ndim != 2:
        raise ShapeError(f"linear expects [N,F], got {x.shape}")
    _check_precision(x, weight)
    out_f, in_f = weight.shape
    if x.shape[1] != in_f:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {in_f}")
    xr, xi = x.re, x.im
    A, B = weight.re, weight.im
    out_r = xr @ A.T - xi @ B.T
    out_i = xi @ A.T + xr @ B.T
    if bias is not None:
        out_r += bias.re
        out_i += bias.im

    def back(g):
        gr, gi = g
        grads = [(gr @ A + gi @ B, gi @ A - gr @ B), (gr.T @ xr + gi.T @ xi, gi.T @ xr - gr.T @ xi)]
        if bias is not None:
            grads.append((gr.sum(axis=0), gi.sum(axis=0)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(ComplexTensor.wrap(out_r, out_i), inputs, back, "complex_linear")


READOUTS = ("modulus", "real", "abs2")


def amplitude_layer(x: Variable, readout: str = "modulus") -> Variable:
    """Convert complex logits to real ones (modulus by default).

    The modulus gradient at exactly 0 is taken as 0.
    """
    xr, xi = x.re, x.im
    if readout == "modulus":
        mag = np.sqrt(xr * xr + xi * xi)
        nz = mag > 0
        safe = np.where(nz, mag, 1)
        ur = np.where(nz, xr / safe, 0).astype(x.dtype)
        ui = np.where(nz, xi / safe, 0).astype(x.dtype)
        return record(RealTensor.wrap(mag), (x,), lambda g: ((g * ur, g * ui),), "amplitude")
    if readout == "real":
        return record(RealTensor.wrap(np.array(xr)), (x,), lambda g: ((g, np.zeros_like(g)),), "amplitude_real")
    if readout == "abs2":
        return record(RealTensor.wrap(xr * xr + xi * xi), (x,), lambda g: ((2 * g * xr, 2 * g * xi),),
                      "amplitude_abs2")
    raise ValueError(f"unknown readout {readout!r}; choose from {READOUTS}")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Variable, labels) -> Variable:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    if logits.is_complex:
        raise TypeError("softmax_cross_entropy takes real logits")
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {z.shape}")
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} samples")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(z)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return ((g / n) * p,)

    return record(RealTensor.wrap(np.asarray(loss, dtype=z.dtype)), (logits,), back, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# modules


def init_complex_weight(shape, fan_in: int, rng: np.random.Generator, dtype) -> ComplexTensor:
    """Zero-mean Gaussian re and im, each with variance 1/(2*fan_in)."""
    std = math.sqrt(1.0 / (2 * fan_in))
    return ComplexTensor(rng.normal(0.0, std, shape), rng.normal(0.0, std, shape), dtype=dtype)


class Module:
    def parameters(self) -> list[Parameter]:
        return []

    def __call__(self, x: Variable, training: bool = False) -> Variable:
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, *, rng, dtype=np.float32, name="conv",
                 bias=True):
        kh, kw = _pair(kernel)
        if min(in_ch, out_ch, kh, kw) < 1:
            raise ValueError("conv channels and kernel extents must be >= 1")
        self.stride, self.padding = stride, padding
        self.weight = Parameter(init_complex_weight((out_ch, in_ch, kh, kw), in_ch * kh * kw, rng, dtype),
                                name=f"{name}.weight")
        self.bias = Parameter(ComplexTensor.zeros((out_ch,), dtype), name=f"{name}.bias") if bias else None

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x, training=False):
        return complex_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels, *, dtype=np.float32, momentum=0.1, eps=1e-5, affine=True, name="bn"):
        self.state = ComplexBNState.create(channels, dtype, momentum, eps, affine, name)

    def parameters(self):
        return self.state.parameters()

    def buffers(self) -> list[np.ndarray]:
        return [self.state.running_mean, self.state.running_cov]

    def __call__(self, x, training=False):
        return complex_batchnorm(x, self.state, training)


class ActivationLayer(Module):
    def __init__(self, kind, channels: int = 0, *, dtype=np.float32, name="act"):
        self.kind = Activation(kind)
        self.slope = None
        if self.kind is Activation.CPRELU:
            self.slope = Parameter(ComplexTensor(np.full(channels, PRELU_INIT), dtype=dtype),
                                   name=f"{name}.slope", kind="real")

    def parameters(self):
        return [self.slope] if self.slope is not None else []

    def __call__(self, x, training=False):
        return activation(x, self.kind, self.slope)


class MaxPool(Module):
    def __init__(self, variant, window=2, stride=None):
        self.variant = PoolVariant(variant)
        self.window = window
        self.stride = window if stride is None else stride

    def __call__(self, x, training=False):
        return complex_maxpool(x, self.variant, self.window, self.stride)[0]


class Flatten(Module):
    def __call__(self, x, training=False):
        return flatten(x)


class Linear(Module):
    def __init__(self, in_f, out_f, *, rng, dtype=np.float32, name="fc"):
        self.weight = Parameter(init_complex_weight((out_f, in_f), in_f, rng, dtype), name=f"{name}.weight")
        self.bias = Parameter(ComplexTensor.zeros((out_f,), dtype), name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x, training=False):
        return complex_linear(x, self.weight, self.bias)


class AmplitudeReadout(Module):
    def __init__(self, readout="modulus"):
        if readout not in READOUTS:
            raise ValueError(f"unknown readout {readout!r}")
        self.readout = readout

    def __call__(self, x, training=False):
        return amplitude_layer(x, self.readout)
