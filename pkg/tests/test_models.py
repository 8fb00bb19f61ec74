from fractions import Fraction

import numpy as np
import pytest

from cvggnet.layers import PoolVariant
from cvggnet.models import (
    CVGG_FC_HIDDEN,
    ModelSpec,
    amplitude_only_mode,
    build_cvggnet,
    build_cvnet5,
    build_cvnet5_micro,
    cvggnet_spec,
    cvnet5_spec,
    scale_width,
)
from cvggnet.tensor import ComplexTensor
from cvggnet.train import TrainConfig, train


def batch(rng, n, size=32, dtype=np.float64):
    return ComplexTensor(rng.normal(size=(n, 1, size, size)), rng.normal(size=(n, 1, size, size)), dtype=dtype)


def test_cvgg_default_plan():
    spec = cvggnet_spec()
    assert len(spec.conv_widths) == 13
    assert sum(k == "pool" for k, _ in spec.blocks) == 5
    assert len(spec.fc_widths) == 3
    assert spec.conv_widths == [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
    assert spec.fc_widths == (CVGG_FC_HIDDEN, CVGG_FC_HIDDEN, 5)
    assert spec.input_size == 224


def test_cvgg_sixteenth_width_census(rng):
    model = build_cvggnet(num_classes=4, width_multiplier=Fraction(1, 16), input_size=32, dtype=np.float64)
    assert model.census() == {"conv": 13, "pool": 5, "fc": 3, "amplitude": 1, "softmax": 1}
    assert model.spec.conv_widths == [4, 4, 8, 8, 16, 16, 16, 32, 32, 32, 32, 32, 32]
    assert model.spec.fc_widths == (256, 256, 4)
    out = model(batch(rng, 2))
    assert out.shape == (2, 4) and np.isfinite(out.data).all()


def test_cvnet5_plan_and_shape(rng):
    model = build_cvnet5(num_classes=3, input_size=32, dtype=np.float64)
    assert model.census() == {"conv": 5, "pool": 5, "fc": 1, "amplitude": 1, "softmax": 1}
    out = model(batch(rng, 4))
    assert out.shape == (4, 3) and np.isfinite(out.data).all()


def test_pool_variant_leaves_parameter_count():
    a = build_cvnet5(pool_variant="amplitude", input_size=32, width_multiplier=0.25)
    b = build_cvnet5(pool_variant="area", input_size=32, width_multiplier=0.25)
    assert a.trainable_real_count() == b.trainable_real_count()


def test_width_rounding():
    assert scale_width(64, Fraction(1, 16)) == 4
    assert scale_width(3, Fraction(1, 16)) == 1
    assert scale_width(10, 0.25) == 3
    with pytest.raises(ValueError):
        scale_width(10, 0)


@pytest.mark.parametrize("size", [0, 16, 48, 100])
def test_input_size_must_divide_by_32(size):
    with pytest.raises(ValueError):
        cvnet5_spec(input_size=size)


def test_spec_dict_round_trip():
    spec = cvggnet_spec(num_classes=7, activation="cprelu", pool_variant="real-split",
                        width_multiplier=Fraction(1, 8), input_size=64)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_same_seed_same_weights():
    a, b = build_cvnet5_micro(seed=5), build_cvnet5_micro(seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.re, q.re)
        np.testing.assert_array_equal(p.im, q.im)


def test_no_conv_bias_before_batchnorm():
    names = build_cvnet5_micro().named_parameters()
    assert not any(n.startswith("conv") and n.endswith(".bias") for n in names)
    assert "fc0.bias" in names


# -- amplitude-only ablation -------------------------------------------------


def _phase_pair(rng, n=3):
    """Two batches with bit-identical modulus planes but different phases.

    Per pixel, the second is the first conjugated, rotated by j or negated,
    all of which leave re^2 + im^2 exactly unchanged.
    """
    re, im = rng.normal(size=(2, n, 1, 32, 32))
    op = rng.integers(0, 3, re.shape)
    re2 = np.select([op == 0, op == 1], [re, -im], -re)
    im2 = np.select([op == 0, op == 1], [-im, re], -im)
    return ComplexTensor(re, im), ComplexTensor(re2, im2)


def test_amplitude_only_is_phase_blind(rng):
    twin = amplitude_only_mode(build_cvnet5_micro(seed=1))
    a, b = _phase_pair(rng)
    np.testing.assert_array_equal(twin(a).data, twin(b).data)


def test_pure_phase_inputs_give_identical_logits(rng):
    twin = amplitude_only_mode(build_cvnet5_micro(seed=2))
    units = np.array([1, 1j, -1, -1j])
    x = ComplexTensor.from_complex(units[rng.integers(0, 4, (4, 1, 32, 32))])
    logits = twin(x, training=True).data  # batch stats are identical too
    for row in logits[1:]:
        np.testing.assert_array_equal(row, logits[0])


def test_full_complex_model_sees_phase(rng):
    model = build_cvnet5_micro(seed=1)
    a, b = _phase_pair(rng)
    assert not np.array_equal(model(a).data, model(b).data)


def test_amplitude_only_freezes_imaginary_weights():
    model = build_cvnet5_micro(seed=3, activation="crelu")
    twin = amplitude_only_mode(model)
    assert any(np.any(p.im != 0) for p in model.parameters())  # original untouched
    complex_full = sum(p.trainable_reals for p in model.parameters() if p.kind == "complex")
    complex_twin = sum(p.trainable_reals for p in twin.parameters() if p.kind == "complex")
    assert complex_twin * 2 == complex_full
    for p in twin.parameters():
        np.testing.assert_array_equal(p.im, 0)
        if p.name.endswith(".gamma_ri"):
            assert not p.trainable
    ri = sum(p.value.size for p in model.parameters() if p.name.endswith(".gamma_ri"))
    assert twin.trainable_real_count() == (model.trainable_real_count() - ri) // 2
    assert all(layer.variant is PoolVariant.REAL_SPLIT for layer in twin.layers if hasattr(layer, "variant"))


def test_amplitude_only_computation_stays_real(rng):
    twin = amplitude_only_mode(build_cvnet5_micro(seed=4))
    h = twin.prepare_input(batch(rng, 2))
    for layer in twin.layers[:-1]:
        h = layer(h, True)
        np.testing.assert_array_equal(h.im, 0)


@pytest.mark.slow
def test_amplitude_only_micro_learns_amplitude_task(amplitude_splits):
    train_set, test_set = amplitude_splits
    twin = amplitude_only_mode(build_cvnet5_micro(num_classes=3, seed=0))
    history, _ = train(twin, train_set, test_set, TrainConfig(epochs=60))
    assert history[-1].test_accuracy > 0.90
