"""Declarative network specs and builders for CVGG-Net and CVnet5."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np

from .autodiff import Parameter, Variable
from .layers import (
    Activation,
    ActivationLayer,
    AmplitudeReadout,
    BatchNorm,
    Conv2d,
    Flatten,
    Linear,
    MaxPool,
    PoolVariant,
    softmax_cross_entropy,
)
from .tensor import ComplexTensor

# VGG16 layout: 13 convolutions in five groups, each group closed by a pool.
CVGG_GROUPS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
CVGG_FC_HIDDEN = 4096
# CVnet5 channel widths, doubling to a 128 plateau; kept in one place.
CVNET5_CHANNELS = (16, 32, 64, 128, 128)
DOWNSAMPLE = 32


def as_fraction(m) -> Fraction:
    frac = Fraction(str(m)) if isinstance(m, str) else Fraction(m).limit_denominator(1 << 16)
    if frac <= 0:
        raise ValueError(f"width multiplier must be positive, got {m}")
    return frac


def scale_width(channels: int, m) -> int:
    return max(1, math.ceil(channels * as_fraction(m)))


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a network's topology.

    ``blocks`` entries are ``("conv", out_channels)`` or ``("pool", variant)``.
    """

    name: str
    blocks: tuple
    fc_widths: tuple
    num_classes: int
    activation: str = Activation.CRELU.value
    input_size: int = 224
    width_multiplier: str = "1"
    amplitude_only: bool = False
    in_channels: int = 1
    readout: str = "modulus"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.fc_widths[-1] != self.num_classes:
            raise ValueError("last fully connected width must equal num_classes")
        Activation(self.activation)
        for kind, arg in self.blocks:
            if kind == "pool":
                PoolVariant(arg)
            elif kind != "conv":
                raise ValueError(f"unknown block kind {kind!r}")

    @property
    def conv_widths(self) -> list[int]:
        return [arg for kind, arg in self.blocks if kind == "conv"]

    @property
    def pool_variant(self) -> str:
        pools = {arg for kind, arg in self.blocks if kind == "pool"}
        return pools.pop() if len(pools) == 1 else ",".join(sorted(pools))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["blocks"] = tuple((k, a) for k, a in d["blocks"])
        d["fc_widths"] = tuple(d["fc_widths"])
        return cls(**d)


def _check_input_size(input_size: int) -> None:
    if input_size < DOWNSAMPLE or input_size % DOWNSAMPLE:
        raise ValueError(f"input_size must be a positive multiple of {DOWNSAMPLE}, got {input_size}")


def cvggnet_spec(num_classes=5, activation="crelu", pool_variant="area", width_multiplier=1,
                 input_size=224) -> ModelSpec:
    _check_input_size(input_size)
    m = as_fraction(width_multiplier)
    pool = PoolVariant(pool_variant).value
    blocks = []
    for group in CVGG_GROUPS:
        blocks += [("conv", scale_width(c, m)) for c in group]
        blocks.append(("pool", pool))
    hidden = scale_width(CVGG_FC_HIDDEN, m)
    return ModelSpec("cvgg", tuple(blocks), (hidden, hidden, num_classes), num_classes,
                     Activation(activation).value, input_size, str(m))


def cvnet5_spec(num_classes=5, activation="crelu", pool_variant="area", width_multiplier=1,
                input_size=224) -> ModelSpec:
    _check_input_size(input_size)
    m = as_fraction(width_multiplier)
    pool = PoolVariant(pool_variant).value
    blocks = []
    for c in CVNET5_CHANNELS:
        blocks += [("conv", scale_width(c, m)), ("pool", pool)]
    return ModelSpec("cvnet5", tuple(blocks), (num_classes,), num_classes,
                     Activation(activation).value, input_size, str(m))


class Model:
    """A built network: conv blocks, pools, complex FC stack, amplitude readout.

    Softmax lives in :meth:`loss` / :meth:`predict_proba`.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        ch = spec.in_channels
        size = spec.input_size
        conv_i = pool_i = 0
        for kind, arg in spec.blocks:
            if kind == "conv":
                name = f"conv{conv_i}"
                # BN subtracts the batch mean, which cancels any conv bias exactly.
                self.layers += [
                    Conv2d(ch, arg, 3, 1, 1, rng=rng, dtype=self.dtype, name=name, bias=False),
                    BatchNorm(arg, dtype=self.dtype, name=f"bn{conv_i}"),
                    ActivationLayer(spec.activation, arg, dtype=self.dtype, name=f"act{conv_i}"),
                ]
                ch = arg
                conv_i += 1
            else:
                # Area scores vanish identically on real data, so the real twin pools by plain max.
                variant = PoolVariant.REAL_SPLIT if spec.amplitude_only else PoolVariant(arg)
                self.layers.append(MaxPool(variant, 2, 2))
                size //= 2
                pool_i += 1
        self.layers.append(Flatten())
        features = ch * size * size
        for i, width in enumerate(spec.fc_widths):
            self.layers.append(Linear(features, width, rng=rng, dtype=self.dtype, name=f"fc{i}"))
            if i < len(spec.fc_widths) - 1:
                self.layers.append(ActivationLayer(spec.activation, width, dtype=self.dtype, name=f"fc_act{i}"))
            features = width
        self.layers.append(AmplitudeReadout(spec.readout))
        if spec.amplitude_only:
            self._freeze_imag()

    # -- parameters -----------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                name = layer.state.gamma.name.rsplit(".", 1)[0]
                out[f"{name}.running_mean"] = layer.state.running_mean
                out[f"{name}.running_cov"] = layer.state.running_cov
        return out

    def trainable_real_count(self) -> int:
        return sum(p.trainable_reals for p in self.parameters())

    def census(self) -> dict[str, int]:
        counts = {"conv": 0, "pool": 0, "fc": 0, "amplitude": 0, "softmax": 1}
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                counts["conv"] += 1
            elif isinstance(layer, MaxPool):
                counts["pool"] += 1
            elif isinstance(layer, Linear):
                counts["fc"] += 1
            elif isinstance(layer, AmplitudeReadout):
                counts["amplitude"] += 1
        return counts

    def _freeze_imag(self) -> None:
        for p in self.parameters():
            if p.kind == "complex":
                p.freeze_imag()
            elif p.name.endswith(".gamma_ri"):
                # couples the imaginary channel into the real one
                p.set_planes(np.zeros(p.shape, p.dtype), np.zeros(p.shape, p.dtype))
                p.trainable = False

    # -- forward --------------------------------------------------------

    def prepare_input(self, x) -> Variable:
        if isinstance(x, Variable):
            value = x.value
        else:
            value = x
        if not isinstance(value, ComplexTensor):
            raise TypeError("model input must be a ComplexTensor [N,C,H,W]")
        expected = (self.spec.in_channels, self.spec.input_size, self.spec.input_size)
        if value.shape[1:] != expected:
            raise ValueError(f"input shape {value.shape} does not match [N, {expected[0]}, {expected[1]}, {expected[2]}]")
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        if self.spec.amplitude_only:
            mag = np.sqrt(value.re * value.re + value.im * value.im)
            return Variable(ComplexTensor.wrap(mag, np.zeros_like(mag)))
        if isinstance(x, Variable) and value is x.value:
            return x
        return Variable(value)

    def forward(self, x, training: bool = False) -> Variable:
        h = self.prepare_input(x)
        for layer in self.layers:
            h = layer(h, training)
        return h

    __call__ = forward

    def loss(self, x, labels, training: bool = True) -> tuple[Variable, Variable]:
        logits = self.forward(x, training)
        return softmax_cross_entropy(logits, labels), logits

    def predict_proba(self, x) -> np.ndarray:
        z = self.forward(x, training=False).data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x, training=False).data, axis=1)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    return Model(spec, seed=seed, dtype=dtype)


def build_cvggnet(num_classes=5, activation="crelu", pool_variant="area", width_multiplier=1,
                  input_size=224, *, seed=0, dtype=np.float32) -> Model:
    return Model(cvggnet_spec(num_classes, activation, pool_variant, width_multiplier, input_size), seed, dtype)


def build_cvnet5(num_classes=5, activation="crelu", pool_variant="area", width_multiplier=1,
                 input_size=224, *, seed=0, dtype=np.float32) -> Model:
    return Model(cvnet5_spec(num_classes, activation, pool_variant, width_multiplier, input_size), seed, dtype)


def build_cvnet5_micro(num_classes=3, activation="crelu", pool_variant="area", *, seed=0,
                       dtype=np.float64) -> Model:
    """1/16-width CVnet5 on 32x32 inputs, small enough for exhaustive gradient checks."""
    return build_cvnet5(num_classes, activation, pool_variant, Fraction(1, 16), 32, seed=seed, dtype=dtype)


def amplitude_only_mode(model: Model) -> Model:
    """Phase-blind twin of ``model``: inputs become |z| + 0j, imaginary weights pinned at 0.

    The returned model is an independent copy; the original is untouched.
    """
    twin = copy.deepcopy(model)
    twin.spec = replace(model.spec, amplitude_only=True)
    for i, layer in enumerate(twin.layers):
        if isinstance(layer, MaxPool):
            twin.layers[i] = MaxPool(PoolVariant.REAL_SPLIT, layer.window, layer.stride)
    twin._freeze_imag()
    return twin


def build_from_name(name: str, **kwargs) -> Model:
    builders = {"cvgg": build_cvggnet, "cvnet5": build_cvnet5}
    if name not in builders:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(builders)}")
    return builders[name](**kwargs)


def spec_from_name(name: str, **kwargs) -> ModelSpec:
    specs = {"cvgg": cvggnet_spec, "cvnet5": cvnet5_spec}
    if name not in specs:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(specs)}")
    return specs[name](**kwargs)
