"""Finite-difference verification of every layer op and an end-to-end model.

Each case builds a small 64-bit graph whose inputs are kept away from the
non-differentiable points (activation kinks at 0, pooling ties) by at least
ten finite-difference steps, then hands it to :func:`autodiff.grad_check`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .autodiff import Parameter, Variable, grad_check, weighted_sum
from .models import build_cvnet5_micro
from .tensor import ComplexTensor

STEP = 1e-5
TOLERANCE = 1e-4
MARGIN = 10 * STEP


@dataclass
class CaseResult:
    op: str
    max_rel_error: float
    passed: bool
    coordinates: int
    worst: str = ""
    precision_error: float | None = None


def _ct(rng, dtype, shape) -> ComplexTensor:
    return ComplexTensor(rng.normal(size=shape), rng.normal(size=shape), dtype=dtype)


def _away_from_zero(rng, shape, low=0.1) -> np.ndarray:
    return rng.uniform(low, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def _separated_windows(rng, shape, variant, window=2) -> ComplexTensor:
    """Random input whose per-window winner beats the runner-up by a clear margin."""
    for _ in range(1000):
        x = _ct(rng, np.float64, shape)
        w = lambda p: np.sort(L._kernels._windows(p, window, window), axis=-1)  # noqa: E731
        if variant == L.PoolVariant.REAL_SPLIT:
            gaps = [w(x.re), w(x.im)]
        elif variant == L.PoolVariant.AMPLITUDE:
            gaps = [w(np.sqrt(x.re ** 2 + x.im ** 2))]
        else:
            gaps = [w(np.abs(x.re * x.im))]
        if all((g[..., -1] - g[..., -2]).min() > 100 * MARGIN for g in gaps):
            return x
    raise RuntimeError("could not draw a tie-free pooling input")


def _leaf(value, name) -> Variable:
    return Variable(value, requires_grad=True, name=name)


def case_conv(rng, dt):
    x = _leaf(_ct(rng, dt, (2, 3, 5, 6)), "x")
    w = Parameter(_ct(rng, dt, (4, 3, 3, 3)), "weight")
    b = Parameter(_ct(rng, dt, (4,)), "bias")
    probe = _ct(rng, dt, (2, 4, 3, 3))
    return (lambda: weighted_sum(L.complex_conv2d(x, w, b, stride=2, padding=1), probe)), [x, w, b]


def _bn_state(rng, c, dt):
    st = L.ComplexBNState.create(c, dt)
    st.gamma.set_planes(rng.normal(size=c), rng.normal(size=c))
    st.gamma_ri.set_planes(0.3 * rng.normal(size=c), np.zeros(c))
    st.beta.set_planes(rng.normal(size=c), rng.normal(size=c))
    return st


def case_bn_train(rng, dt):
    x = _leaf(_ct(rng, dt, (3, 2, 4, 4)), "x")
    st = _bn_state(rng, 2, dt)
    probe = _ct(rng, dt, (3, 2, 4, 4))
    return (lambda: weighted_sum(L.complex_batchnorm(x, st, True), probe)), [x, *st.parameters()]


def case_bn_eval(rng, dt):
    x = _leaf(_ct(rng, dt, (3, 2, 4, 4)), "x")
    st = _bn_state(rng, 2, dt)
    st.running_mean[:] = rng.normal(size=(2, 2))
    st.running_cov[:] = [[1.5, 0.7], [0.3, -0.2], [0.8, 1.1]]
    probe = _ct(rng, dt, (3, 2, 4, 4))
    return (lambda: weighted_sum(L.complex_batchnorm(x, st, False), probe)), [x, *st.parameters()]


def _case_activation(kind):
    def build(rng, dt):
        shape = (2, 3, 4, 4)
        x = _leaf(ComplexTensor(_away_from_zero(rng, shape), _away_from_zero(rng, shape), dtype=dt), "x")
        probe = _ct(rng, dt, shape)
        params = [x]
        slope = None
        if kind == L.Activation.CPRELU:
            slope = Parameter(ComplexTensor(rng.uniform(0.1, 0.5, 3), dtype=dt), "slope", kind="real")
            params.append(slope)
        return (lambda: weighted_sum(L.activation(x, kind, slope), probe)), params
    return build


def _case_pool(variant):
    def build(rng, dt):
        x = _leaf(_separated_windows(rng, (2, 2, 6, 6), variant).astype(dt), "x")
        probe = _ct(rng, dt, (2, 2, 3, 3))
        return (lambda: weighted_sum(L.complex_maxpool(x, variant, 2)[0], probe)), [x]
    return build


def case_flatten(rng, dt):
    x = _leaf(_ct(rng, dt, (2, 3, 2, 2)), "x")
    probe = _ct(rng, dt, (2, 12))
    return (lambda: weighted_sum(L.flatten(x), probe)), [x]


def case_linear(rng, dt):
    x = _leaf(_ct(rng, dt, (3, 5)), "x")
    w = Parameter(_ct(rng, dt, (4, 5)), "weight")
    b = Parameter(_ct(rng, dt, (4,)), "bias")
    probe = _ct(rng, dt, (3, 4))
    return (lambda: weighted_sum(L.complex_linear(x, w, b), probe)), [x, w, b]


def case_amplitude(rng, dt):
    x = _leaf(ComplexTensor(_away_from_zero(rng, (3, 4)), _away_from_zero(rng, (3, 4)), dtype=dt), "x")
    probe = rng.normal(size=(3, 4)).astype(dt)
    return (lambda: weighted_sum(L.amplitude_layer(x), probe)), [x]


def case_softmax_ce(rng, dt):
    logits = _leaf(ComplexTensor(rng.normal(size=(4, 5)), dtype=dt), "logits")
    labels = np.array([0, 4, 2, 2])

    def f():
        from .autodiff import real_part
        return L.softmax_cross_entropy(real_part(logits), labels)
    return f, [logits]


def case_cvnet5_micro(rng, dt):
    model = build_cvnet5_micro(num_classes=3, seed=int(rng.integers(1 << 16)), dtype=dt)
    x = _ct(rng, dt, (2, 1, 32, 32))
    labels = np.array([0, 2])
    return (lambda: model.loss(x, labels, training=True)[0]), model.parameters()


LAYER_CASES: dict[str, Callable] = {
    "complex_conv2d": case_conv,
    "complex_batchnorm[train]": case_bn_train,
    "complex_batchnorm[eval]": case_bn_eval,
    "activation[crelu]": _case_activation(L.Activation.CRELU),
    "activation[ctanh]": _case_activation(L.Activation.CTANH),
    "activation[celu]": _case_activation(L.Activation.CELU),
    "activation[cprelu]": _case_activation(L.Activation.CPRELU),
    "complex_maxpool[real-split]": _case_pool(L.PoolVariant.REAL_SPLIT),
    "complex_maxpool[amplitude]": _case_pool(L.PoolVariant.AMPLITUDE),
    "complex_maxpool[area]": _case_pool(L.PoolVariant.AREA),
    "flatten": case_flatten,
    "complex_linear": case_linear,
    "amplitude_layer": case_amplitude,
    "softmax_cross_entropy": case_softmax_ce,
}

MODEL_CASES: dict[str, Callable] = {
    "cvnet5_micro": case_cvnet5_micro,
}


def _precision_gap(build: Callable, seed: int, reference: float) -> float:
    """Relative gap between the 64-bit loss and the same case rebuilt in 32 bits."""
    f32, _ = build(np.random.default_rng(seed), np.float32)
    low = float(np.asarray(f32().data))
    return abs(low - reference) / max(abs(reference), 1e-8)


def run_case(name: str, build: Callable, seed: int = 0, precision_check: bool = False) -> CaseResult:
    f, params = build(np.random.default_rng(seed), np.float64)
    report = grad_check(f, params, STEP, TOLERANCE)
    worst = ""
    if report.failures:
        fail = max(report.failures, key=lambda c: c.rel_error)
        worst = f"{fail.param}.{fail.plane}{list(fail.index)}: analytic {fail.analytic:.6g} numeric {fail.numeric:.6g}"
    gap = None
    if precision_check:
        gap = _precision_gap(build, seed, float(np.asarray(f().data)))
    return CaseResult(name, report.worst, report.passed, report.coordinates, worst, gap)


def run_suite(scope: str = "all", precision_check: bool = False, seed: int = 0) -> list[CaseResult]:
    cases = {}
    if scope in ("layers", "all"):
        cases.update(LAYER_CASES)
    if scope in ("model", "all"):
        cases.update(MODEL_CASES)
    if not cases:
        raise ValueError(f"unknown scope {scope!r}; choose layers, model or all")
    return [run_case(name, build, seed, precision_check) for name, build in cases.items()]


def format_table(results: list[CaseResult]) -> str:
    lines = ["op,max_rel_error,coordinates,status" + (",fp32_gap" if any(r.precision_error is not None for r in results) else "")]
    for r in results:
        row = f"{r.op},{r.max_rel_error:.3e},{r.coordinates},{'PASS' if r.passed else 'FAIL'}"
        if r.precision_error is not None:
            row += f",{r.precision_error:.3e}"
        lines.append(row)
    return "\n".join(lines) + "\n"
