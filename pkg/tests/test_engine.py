from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_float_model, random_fmap, small_memory
from mpim.dsfp import DSFP9, DSFP15, WideAccumulator, decode, encode
from mpim.engine import (EngineGrid, Kernel3x3, ResidencyError, RingSchedule, conv3x3_tile,
                         finalize, maxpool2x2, pad_tile, ring_rotate, run_conv_layer)
from mpim.memory import MemoryKind
from mpim.model import Activation, FeatureMap, ShapeError
from mpim.oracle import reference_forward
from mpim.quantizer import quantize_model

ONE9 = int(encode(1.0, DSFP9, 7))
ONE15 = int(encode(1.0, DSFP15, 15))


def _load(md, blob):
    mem = small_memory()
    region = mem.allocate(MemoryKind.MRAM, md.coeff_bytes, md.id)
    mem.write(region, 0, blob)
    return mem, region


def test_pad_tile_border_is_zero():
    fmap = FeatureMap(np.full((1, 4, 4), ONE9), 7)
    tile = pad_tile(fmap, 0, 0, 0, 4)
    assert tile.shape == (6, 6)
    assert np.all(tile[1:5, 1:5] == ONE9)
    assert np.all(tile[0] == 0) and np.all(tile[5] == 0)
    assert np.all(tile[:, 0] == 0) and np.all(tile[:, 5] == 0)


def test_pad_tile_halo_from_neighbours(rng):
    fmap = random_fmap(rng, (2, 8, 8))
    tile = pad_tile(fmap, 1, 0, 0, 4)
    assert np.array_equal(tile[1:6, 5], fmap.data[1, 0:5, 4])
    assert np.array_equal(tile[5, 1:6], fmap.data[1, 4, 0:5])
    inner = pad_tile(fmap, 1, 1, 1, 4)
    assert np.array_equal(inner, np.pad(fmap.data[1], 1)[4:10, 4:10])
    with pytest.raises(IndexError):
        pad_tile(fmap, 0, 2, 0, 4)


def test_pad_tile_pads_partial_edge_tiles(rng):
    fmap = random_fmap(rng, (1, 5, 5))
    tile = pad_tile(fmap, 0, 1, 1, 4)
    assert np.array_equal(tile[1, 1], fmap.data[0, 4, 4])
    assert np.all(tile[2:, :] == 0) and np.all(tile[:, 2:] == 0)


def test_conv_identity_kernel(rng):
    fmap = random_fmap(rng, (1, 4, 4), bias=7)
    tile = pad_tile(fmap, 0, 0, 0, 4)
    k = np.zeros((3, 3), dtype=np.uint16)
    k[1, 1] = ONE15
    wsum = conv3x3_tile(tile, Kernel3x3(k, 15), WideAccumulator.for_biases(7, 15, (4, 4)), 7)
    np.testing.assert_array_equal(wsum.to_float(), fmap.decoded()[0])


def test_conv_all_ones_single_pixel():
    tile = np.full((3, 3), ONE9, dtype=np.uint16)
    k = np.full((3, 3), ONE15, dtype=np.uint16)
    wsum = conv3x3_tile(tile, Kernel3x3(k, 15), WideAccumulator.for_biases(7, 15, (1, 1)), 7)
    assert wsum.to_float()[0, 0] == 9.0


def test_conv_matches_fraction_oracle(rng):
    tile = rng.integers(0, 512, (5, 6, 6)).astype(np.uint16)
    k = rng.integers(0, 1 << 15, (5, 3, 3)).astype(np.uint16)
    wsum = conv3x3_tile(tile, Kernel3x3(k, 20), WideAccumulator.for_biases(3, 20, (4, 4)), 3,
                        reduce_axis=0)
    a = [[[Fraction(float(decode(int(v), DSFP9, 3))) for v in row] for row in ch] for ch in tile]
    w = [[[Fraction(float(decode(int(v), DSFP15, 20))) for v in row] for row in ch] for ch in k]
    got = wsum.exact()
    for y in range(4):
        for x in range(4):
            ref = sum(a[c][y + dy][x + dx] * w[c][dy][dx]
                      for c in range(5) for dy in range(3) for dx in range(3))
            assert Fraction(int(got[y, x])) * Fraction(2) ** wsum.unit_exp == ref


def test_finalize_examples():
    acc = WideAccumulator.for_biases(7, 15, (1,))
    acc.add_code(np.array([encode(-3.0, DSFP15, 15)]), 15)
    assert finalize(acc, [0], Activation.RELU, 7)[0] == 0
    assert decode(finalize(acc, [0], Activation.IDENTITY, 7)[0], DSFP9, 7) == -3.0

    half = WideAccumulator.for_biases(7, 15, (1,))
    half.add_code(np.array([encode(0.5, DSFP15, 15)]), 15)
    code = finalize(half, [encode(0.5, DSFP15, 15)], Activation.RELU, 7)[0]
    assert code == 0x70 == ONE9

    big = WideAccumulator.for_biases(7, 15, (1,))
    big.add_code(np.array([DSFP15.max_code()]), 15)  # ~1.3e5, far above 496
    assert finalize(big, [0], Activation.RELU, 7)[0] == DSFP9.max_code()
    # finalize must not mutate its input
    assert half.to_float()[0] == 0.5


def test_maxpool():
    fmap = FeatureMap(encode(np.arange(1.0, 5.0).reshape(1, 2, 2), DSFP9, 7), 7)
    assert decode(maxpool2x2(fmap).data, DSFP9, 7).item() == 4.0
    assert maxpool2x2(FeatureMap(np.zeros((3, 14, 14), np.uint16))).shape == (3, 7, 7)
    neg = FeatureMap(np.array([[[DSFP9.sign_mask, DSFP9.sign_mask | 5], [DSFP9.sign_mask | 1, DSFP9.sign_mask | 9]]],
                              dtype=np.uint16))
    assert maxpool2x2(neg).data.item() == 0
    with pytest.raises(ShapeError):
        maxpool2x2(FeatureMap(np.zeros((1, 3, 4), np.uint16)))


def _tag_grid(m):
    grid = EngineGrid(m, 2)
    for i, e in enumerate(grid.engines):
        e.input_buffer, e.tile = np.array([i]), (i, 0)
        e.coeff_buffer = np.array([100 + i])
    return grid


def _tags(grid):
    return [int(e.input_buffer[0]) for e in grid.engines]


def test_ring_rotate_full_cycle_is_identity():
    grid = _tag_grid(3)
    ring_rotate(grid, 9)
    assert _tags(grid) == list(range(9))
    ring_rotate(grid, 1)
    assert _tags(grid) == [8, 0, 1, 2, 3, 4, 5, 6, 7]
    assert [int(e.coeff_buffer[0]) for e in grid.engines] == list(range(100, 109))


@given(st.integers(-30, 30), st.integers(-30, 30))
def test_ring_rotate_composes(a, b):
    g1, g2 = _tag_grid(2), _tag_grid(2)
    ring_rotate(ring_rotate(g1, a), b)
    ring_rotate(g2, a + b)
    assert _tags(g1) == _tags(g2)


def test_ring_rotate_single_engine_and_half_turn():
    grid = EngineGrid(1, 2, engines=_tag_grid(2).engines[:1])
    assert _tags(ring_rotate(grid, 1)) == [0]
    grid = _tag_grid(2)
    ring_rotate(grid, 2)
    assert _tags(grid) == [2, 3, 0, 1]


def test_grid_validation():
    with pytest.raises(ValueError):
        EngineGrid(2, 3)
    with pytest.raises(ValueError):
        EngineGrid(0, 2)


def _one_layer(rng, shape, out_ch=4, pool=False):
    fm = random_float_model(rng, shape, 1, max_ch=out_ch)
    fm.layers[0].pool = pool
    return quantize_model(fm)[:2]


def test_layer_matches_oracle(rng):
    md, blob = _one_layer(rng, (3, 8, 8))
    mem, region = _load(md, blob)
    x = random_fmap(rng, (3, 8, 8))
    out = run_conv_layer(x, md.layers[0], EngineGrid(2, 4), mem, region)
    assert out == reference_forward(md, x, blob)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 1000), st.integers(0, 50), st.sampled_from([1, 2, 3]),
       st.sampled_from([2, 4, 6]))
def test_schedule_invariance(stride, seed, offset, m, p):
    rng = np.random.default_rng(seed)
    md, blob = _one_layer(rng, (3, 9, 7), out_ch=8)
    mem, region = _load(md, blob)
    x = random_fmap(rng, (3, 9, 7))
    grid = EngineGrid(m, p)
    if m > 1 and np.gcd(stride, m * m) != 1:
        with pytest.raises(ValueError):
            run_conv_layer(x, md.layers[0], grid, mem, region, RingSchedule(stride, seed, offset))
        return
    base = run_conv_layer(x, md.layers[0], grid, mem, region)
    other = run_conv_layer(x, md.layers[0], grid, mem, region, RingSchedule(stride, seed, offset))
    assert base == other


def test_zero_input_gives_relu_of_bias(rng):
    md, blob = _one_layer(rng, (2, 6, 6))
    mem, region = _load(md, blob)
    out = run_conv_layer(FeatureMap(np.zeros((2, 6, 6), np.uint16)), md.layers[0], EngineGrid(2, 2),
                         mem, region)
    layer = md.layers[0]
    bias_vals = decode(layer.bias_array(), DSFP15, layer.weight_exp_bias)
    if layer.activation is Activation.RELU:
        bias_vals = np.maximum(bias_vals, 0)
    expected = encode(bias_vals, DSFP9, layer.out_exp_bias)
    assert np.all(out.data == np.asarray(expected)[:, None, None])


def test_zero_weights_zero_bias_zero_output(rng):
    from mpim.model import FloatLayer, FloatModel

    fm = FloatModel("z", [FloatLayer(np.zeros((3, 2, 3, 3)), np.zeros(3))])
    md, blob, _ = quantize_model(fm)
    mem, region = _load(md, blob)
    out = run_conv_layer(random_fmap(rng, (2, 5, 5)), md.layers[0], EngineGrid(1, 2), mem, region)
    assert np.all(out.data == 0)


def test_deterministic(rng):
    md, blob = _one_layer(rng, (3, 10, 10), pool=True)
    mem, region = _load(md, blob)
    x = random_fmap(rng, (3, 10, 10))
    grid = EngineGrid(2, 4)
    a = run_conv_layer(x, md.layers[0], grid, mem, region)
    b = run_conv_layer(x, md.layers[0], grid, mem, region)
    assert a == b and a.shape == (md.layers[0].out_channels, 5, 5)


def test_requires_resident_weights(rng):
    md, blob = _one_layer(rng, (3, 4, 4))
    mem, region = _load(md, blob)
    mem.free(region)
    with pytest.raises(ResidencyError):
        run_conv_layer(random_fmap(rng, (3, 4, 4)), md.layers[0], EngineGrid(1, 2), mem, region)
    with pytest.raises(ResidencyError):
        run_conv_layer(random_fmap(rng, (3, 4, 4)), md.layers[0], EngineGrid(1, 2), mem, None)


def test_shape_errors(rng):
    md, blob = _one_layer(rng, (3, 4, 4), pool=True)
    mem, region = _load(md, blob)
    with pytest.raises(ShapeError):
        run_conv_layer(random_fmap(rng, (2, 4, 4)), md.layers[0], EngineGrid(1, 2), mem, region)
    with pytest.raises(ShapeError):
        run_conv_layer(random_fmap(rng, (3, 5, 4)), md.layers[0], EngineGrid(1, 2), mem, region)
