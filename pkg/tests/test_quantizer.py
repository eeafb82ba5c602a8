import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_float_model
from mpim.demo import build_demo_float_model, demo_float_model
from mpim.dsfp import DSFP9, DSFP15, EXP_BIAS_MAX, EXP_BIAS_MIN, decode, encode
from mpim.model import FloatLayer, FloatModel, ShapeError
from mpim.quantizer import (ManifestError, calibrate, choose_bias, load_device_model,
                            load_float_model, parse_manifest, quantize_model, quantize_tensor,
                            save_device_model, save_float_model, serialize_manifest)


def test_choose_bias_examples():
    # max finite at bias b is (2 - 2^-9) * 2^(31 - b); 1.0 lands in the top binade at b = 31
    assert choose_bias([1.0], DSFP15) == 31
    assert DSFP15.max_finite(31) >= 1.0 > DSFP15.max_finite(32)
    assert choose_bias([1.0], DSFP9) == 15
    assert choose_bias(np.zeros(5), DSFP9) == 7
    assert choose_bias(np.zeros(5), DSFP15) == 15
    with pytest.raises(ValueError):
        choose_bias([np.nan], DSFP9)


@given(st.floats(1e-3, 1e3), st.integers(1, 4))
def test_choose_bias_tracks_scale(peak, k):
    b = choose_bias([peak], DSFP9)
    if EXP_BIAS_MIN + k <= b <= EXP_BIAS_MAX:
        assert choose_bias([peak * 2 ** k], DSFP9) == b - k


@settings(max_examples=100)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_choose_bias_never_saturates_in_range(values):
    b = choose_bias(values, DSFP15)
    peak = max(abs(v) for v in values)
    if b > EXP_BIAS_MIN:
        assert DSFP15.max_finite(b) >= peak
    if b < EXP_BIAS_MAX and peak > 0:
        assert DSFP15.max_finite(b + 1) < peak


def test_quantize_tensor_exact_and_saturating():
    codes, err = quantize_tensor([0.5, -1.0, 2.0], DSFP15, 15)
    assert err.max_abs == 0 and err.saturated_count == 0
    assert list(decode(codes, DSFP15, 15)) == [0.5, -1.0, 2.0]
    _, err = quantize_tensor([1000.0, 1.0], DSFP9, 7)
    assert err.saturated_count == 1 and err.max_abs == 1000.0 - 496.0


def test_quantize_model_sizes_and_layout():
    fm = FloatModel("t", [FloatLayer(np.ones((16, 3, 3, 3)) * 0.25, np.zeros(16)),
                          FloatLayer(np.zeros((4, 16, 3, 3)), np.zeros(4), pool=True)])
    md, blob, errors = quantize_model(fm)
    assert md.layers[0].weight_nbytes == 864
    assert md.coeff_bytes == len(blob) == 864 + 4 * 16 * 18
    assert md.layers[1].weight_offset == 864
    assert np.all(decode(md.layer_weights(blob, 0), DSFP15, md.layers[0].weight_exp_bias) == 0.25)
    assert errors[0].max_abs == 0
    assert quantize_model(fm)[1] == blob


def test_quantize_error_within_half_ulp(rng):
    fm = random_float_model(rng, (4, 6, 6), 2)
    md, blob, errors = quantize_model(fm)
    for k, (layer, flayer) in enumerate(zip(md.layers, fm.layers)):
        w = decode(md.layer_weights(blob, k), DSFP15, layer.weight_exp_bias)
        params = np.concatenate([flayer.weights.ravel(), flayer.bias])
        top = 2.0 ** (DSFP15.max_exp_field - layer.weight_exp_bias - DSFP15.frac_bits)
        assert np.max(np.abs(w - flayer.weights)) <= top / 2
        assert errors[k].max_abs <= top / 2
        assert np.max(np.abs(params)) <= DSFP15.max_finite(layer.weight_exp_bias)


def test_calibrate_biases(rng):
    fm = random_float_model(rng, (3, 8, 8), 3)
    x = rng.uniform(0, 1, (3, 8, 8))
    biases = calibrate(fm, x)
    assert len(biases) == 3
    assert all(EXP_BIAS_MIN <= b <= EXP_BIAS_MAX for b in biases)
    md, _, _ = quantize_model(fm, biases)
    assert [l.out_exp_bias for l in md.layers] == biases
    with pytest.raises(ShapeError):
        quantize_model(fm, biases[:1])


def test_manifest_round_trip(tmp_path, rng):
    md, blob, _ = quantize_model(random_float_model(rng, (3, 4, 4), 2, name="rt"))
    save_device_model(md, blob, tmp_path / "rt.json")
    md2, blob2 = load_device_model(tmp_path / "rt.json")
    assert md2 == md and blob2 == blob
    assert serialize_manifest(md2) == serialize_manifest(md)


def _manifest(rng):
    md, blob, _ = quantize_model(random_float_model(rng, (2, 4, 4), 1, name="x"))
    return json.loads(serialize_manifest(md)), blob


def test_manifest_missing_field(rng):
    doc, _ = _manifest(rng)
    del doc["layers"][0]["weight_exp_bias"]
    with pytest.raises(ManifestError, match="weight_exp_bias"):
        parse_manifest(json.dumps(doc).encode())


def test_manifest_unknown_field(rng):
    doc, _ = _manifest(rng)
    doc["extra"] = 1
    with pytest.raises(ManifestError, match="'extra'.*version 1"):
        parse_manifest(json.dumps(doc).encode())


def test_manifest_bad_values(rng):
    doc, _ = _manifest(rng)
    doc["layers"][0]["out_exp_bias"] = 99
    with pytest.raises(ManifestError, match="out_exp_bias"):
        parse_manifest(json.dumps(doc).encode())
    doc, _ = _manifest(rng)
    doc["version"] = 2
    with pytest.raises(ManifestError, match="version"):
        parse_manifest(json.dumps(doc).encode())
    with pytest.raises(ManifestError, match="line 1"):
        parse_manifest(b"{not json")


def test_manifest_blob_mismatch(tmp_path, rng):
    doc, blob = _manifest(rng)
    (tmp_path / "x.json").write_text(json.dumps(doc))
    (tmp_path / doc["weights_file"]).write_bytes(blob[:-2])
    with pytest.raises(ManifestError, match="weights_len"):
        load_device_model(tmp_path / "x.json")
    (tmp_path / doc["weights_file"]).unlink()
    with pytest.raises(FileNotFoundError, match=doc["weights_file"]):
        load_device_model(tmp_path / "x.json")


def test_float_model_round_trip(tmp_path, rng):
    fm = random_float_model(rng, (3, 8, 8), 2, name="f")
    save_float_model(fm, tmp_path / "f.json")
    back = load_float_model(tmp_path / "f.json")
    assert back.input_shape == fm.input_shape
    for a, b in zip(back.layers, fm.layers):
        np.testing.assert_array_equal(a.weights, b.weights.astype(np.float32))
        assert (a.pool, a.activation) == (b.pool, b.activation)
    (tmp_path / "f.f32").write_bytes((tmp_path / "f.f32").read_bytes()[:40])
    with pytest.raises(ManifestError, match="too short"):
        load_float_model(tmp_path / "f.json")


def test_shipped_demo_matches_generator():
    built, shipped = build_demo_float_model(), demo_float_model()
    assert [l.weights.shape for l in shipped.layers] == [(8, 3, 3, 3), (8, 8, 3, 3)]
    assert all(l.pool for l in shipped.layers)
    for a, b in zip(built.layers, shipped.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(np.float32(a.bias), np.float32(b.bias))


def test_encode_agrees_with_quantize_tensor(rng):
    v = rng.normal(size=100)
    codes, _ = quantize_tensor(v, DSFP9, 5)
    np.testing.assert_array_equal(codes, encode(v, DSFP9, 5))
