import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_float_model, random_fmap
from mpim.dsfp import DSFP9, DSFP15, decode, encode
from mpim.model import FeatureMap, FloatLayer, FloatModel, ShapeError
from mpim.oracle import (FloatTensor, error_stats, reference_float_forward, reference_forward)
from mpim.quantizer import calibrate, quantize_model


def _identity_model(c):
    w = np.zeros((c, c, 3, 3))
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    return FloatModel("id", [FloatLayer(w, np.zeros(c), activation="identity")])


def test_identity_model(rng):
    x = random_fmap(rng, (3, 5, 6), bias=7)
    md, blob, _ = quantize_model(_identity_model(3))
    assert reference_forward(md, x, blob) == x


def test_zero_input_zero_bias():
    fm = FloatModel("z", [FloatLayer(np.ones((2, 1, 3, 3)), np.zeros(2), pool=True)])
    out = reference_forward(fm, FeatureMap(np.zeros((1, 4, 4), np.uint16)))
    assert out.shape == (2, 2, 2) and np.all(out.data == 0)


def test_hand_computed_sum():
    # all-ones 3x3 kernel on an all-ones 3x3 map: centre sees 9, corners 4, edges 6
    fm = FloatModel("s", [FloatLayer(np.ones((1, 1, 3, 3)), np.array([0.5]))])
    x = FeatureMap(encode(np.ones((1, 3, 3)), DSFP9, 7), 7)
    out = reference_forward(fm, x).decoded()[0]
    np.testing.assert_array_equal(out, [[4.5, 6.5, 4.5], [6.5, 9.5, 6.5], [4.5, 6.5, 4.5]])


def test_rounding_happens_once():
    # 1 + 1/32 + 1/32 rounds to 1 + 1/16 if summed exactly, to 1 if rounded per product
    w = np.zeros((1, 2, 3, 3))
    w[0, :, 1, 1] = 1.0
    fm = FloatModel("r", [FloatLayer(w, np.array([1.0]), activation="identity")])
    vals = np.full((2, 1, 1), 1 / 32)
    x = FeatureMap(encode(vals, DSFP9, 7), 7)
    assert reference_forward(fm, x).decoded().item() == 1 + 1 / 16


def test_error_stats():
    a = FeatureMap(encode(np.array([[[1.0, 2.0]]]), DSFP9, 7), 7)
    assert error_stats(a, FloatTensor(np.array([[[1.5, 2.0]]]))) == (0.5, 0.25)
    with pytest.raises(ShapeError):
        error_stats(a, FloatTensor(np.zeros((1, 2, 1))))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_quantization_error_is_bounded(seed):
    """Single-layer error stays within a budget built from the DSFP quanta."""
    rng = np.random.default_rng(seed)
    fm = random_float_model(rng, (2, 6, 6), 1, max_ch=3)
    x = rng.uniform(-1, 1, (2, 6, 6))
    biases = calibrate(fm, x)
    md, blob, _ = quantize_model(fm, biases)
    xq = FeatureMap(encode(x, DSFP9, 7), 7)
    out = reference_forward(md, xq, blob)
    ref = reference_float_forward(fm, x)
    layer, flayer = md.layers[0], fm.layers[0]
    w_err = np.max(np.abs(decode(md.layer_weights(blob, 0), DSFP15, layer.weight_exp_bias) - flayer.weights))
    b_err = np.max(np.abs(decode(layer.bias_array(), DSFP15, layer.weight_exp_bias) - flayer.bias))
    x_err = np.max(np.abs(xq.decoded() - x))
    n = 9 * flayer.in_channels
    w_max = np.max(np.abs(flayer.weights))
    budget = n * (x_err * w_max + w_err * (1 + x_err) + x_err * w_err) + b_err
    out_quantum = 2.0 ** (DSFP9.max_exp_field - layer.out_exp_bias - DSFP9.frac_bits)
    max_abs, _ = error_stats(out, ref)
    assert max_abs <= budget + out_quantum / 2 + 1e-12


def test_deep_model_stays_close(rng):
    fm = random_float_model(rng, (3, 8, 8), 3, name="deep")
    x = rng.uniform(0, 1, (3, 8, 8))
    md, blob, _ = quantize_model(fm, calibrate(fm, x))
    out = reference_forward(md, FeatureMap(encode(x, DSFP9, 15), 15), blob)
    ref = reference_float_forward(fm, x)
    max_abs, mean_abs = error_stats(out, ref)
    scale = max(np.max(np.abs(ref.data)), 1e-9)
    assert mean_abs / scale < 0.05
