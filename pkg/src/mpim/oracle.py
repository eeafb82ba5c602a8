"""Direct whole-image reference for the forward pass.

No tiles, no ring, no engine grid and no shared convolution code with
:mod:`mpim.engine`.  Sums are carried as Python integers (exact by
construction) and rounded to DSFP9 by a nearest-code search over the sorted
code values, so the two paths only share the format definitions.

:func:`reference_float_forward` is a separate unquantized float64 pipeline
used to measure quantization error.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dsfp import DSFP9, DSFP15, DsfpFormat
from .model import Activation, FeatureMap, FloatModel, ModelDescriptor, ShapeError


@dataclass
class FloatTensor:
    data: np.ndarray  # (c, h, w) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"float tensor must be 3-D, got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def _code_ints(codes, fmt: DsfpFormat) -> np.ndarray:
    """Signed integer multiples of the smallest subnormal, as an object array."""
    c = np.asarray(codes, dtype=np.int64)
    frac = c % (1 << fmt.frac_bits)
    exp = (c >> fmt.frac_bits) % (1 << fmt.exp_bits)
    negative = (c >> (fmt.total_bits - 1)) == 1
    out = np.empty(c.shape, dtype=object)
    flat_out = out.reshape(-1)
    for i, (f, e, neg) in enumerate(zip(frac.ravel().tolist(), exp.ravel().tolist(),
                                        negative.ravel().tolist())):
        n = f if e == 0 else (f + (1 << fmt.frac_bits)) << (e - 1)
        flat_out[i] = -n if neg else n
    return out


@lru_cache(maxsize=None)
def _magnitude_table(fmt: DsfpFormat, scale: int) -> tuple:
    """Non-negative code values in units of ``2^-scale`` smallest subnormals.

    Index == code bits, and values are strictly increasing.
    """
    ints = _code_ints(np.arange(fmt.sign_mask), fmt)
    return tuple(int(v) << scale for v in ints)


def _round_exact(n: int, n_exp: int, fmt: DsfpFormat, bias: int) -> int:
    """Nearest code to ``n * 2^n_exp`` (ties to even code, saturating)."""
    sub_exp = 1 - bias - fmt.frac_bits  # exponent of the smallest subnormal
    common = min(n_exp, sub_exp)
    x = abs(n) << (n_exp - common)
    table = _magnitude_table(fmt, sub_exp - common)
    i = bisect.bisect_right(table, x) - 1
    if i + 1 < len(table):
        below, above = x - table[i], table[i + 1] - x
        if above < below or (above == below and i % 2 == 1):
            i += 1
    return i | fmt.sign_mask if (n < 0 and i) else i


def _direct_layer(codes: np.ndarray, in_bias: int, weights: np.ndarray, w_bias: int,
                  bias_codes, act: Activation, pool: bool, out_bias: int) -> np.ndarray:
    c_in, h, w = codes.shape
    c_out = weights.shape[0]
    a = np.zeros((c_in, h + 2, w + 2), dtype=object)
    a[:, 1:h + 1, 1:w + 1] = _code_ints(codes, DSFP9)
    wt = _code_ints(weights, DSFP15)
    bt = _code_ints(np.asarray(bias_codes), DSFP15)
    prod_exp = (1 - in_bias - DSFP9.frac_bits) + (1 - w_bias - DSFP15.frac_bits)
    bias_exp = 1 - w_bias - DSFP15.frac_bits
    base = min(prod_exp, bias_exp)
    out = np.zeros((c_out, h, w), dtype=np.uint16)
    for o in range(c_out):
        acc = np.full((h, w), bt[o] << (bias_exp - base), dtype=object)
        for i in range(c_in):
            for dy in range(3):
                for dx in range(3):
                    wv = wt[o, i, dy, dx]
                    if wv:
                        acc = acc + a[i, dy:dy + h, dx:dx + w] * (wv << (prod_exp - base))
        for y in range(h):
            for x in range(w):
                v = acc[y, x]
                if act is Activation.RELU and v < 0:
                    v = 0
                out[o, y, x] = _round_exact(v, base, DSFP9, out_bias)
    if pool:
        if h % 2 or w % 2:
            raise ShapeError("pooled layer needs even dims")
        values = {}
        pooled = np.zeros((c_out, h // 2, w // 2), dtype=np.uint16)
        for o in range(c_out):
            for y in range(h // 2):
                for x in range(w // 2):
                    window = [int(out[o, 2 * y + dy, 2 * x + dx]) for dy in (0, 1) for dx in (0, 1)]
                    pooled[o, y, x] = max(window, key=lambda c: _signed_rank(c, values))
        out = pooled
    return out


def _signed_rank(code: int, cache: dict) -> int:
    """Order key matching decoded order for one DSFP9 tensor (sign-magnitude)."""
    if code not in cache:
        mag = code & DSFP9.magnitude_mask
        cache[code] = -mag if code & DSFP9.sign_mask else mag
    return cache[code]


def reference_forward(model, inp: FeatureMap, blob: bytes | None = None) -> FeatureMap:
    """Bit-level ground truth for the device forward pass.

    ``model`` is a :class:`ModelDescriptor` (with its weight ``blob``) or a
    :class:`FloatModel`, which is quantized first.  Rounding to DSFP9 happens
    at the same points as on the device: once per output pixel, after bias
    and activation.
    """
    if isinstance(model, FloatModel):
        from .quantizer import quantize_model

        model, blob, _ = quantize_model(model)
    if not isinstance(model, ModelDescriptor) or blob is None:
        raise TypeError("reference_forward needs a FloatModel or a ModelDescriptor and blob")
    codes, bias = inp.data, inp.exp_bias
    for k, layer in enumerate(model.layers):
        if codes.shape[0] != layer.in_channels:
            raise ShapeError(f"layer {k} expects {layer.in_channels} channels, got {codes.shape[0]}")
        weights = model.layer_weights(blob, k)
        codes = _direct_layer(codes, bias, weights, layer.weight_exp_bias, layer.bias_codes,
                              layer.activation, layer.pool, layer.out_exp_bias)
        bias = layer.out_exp_bias
    return FeatureMap(codes, bias)


def _float_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((weights.shape[0], h, w)) + bias[:, None, None]
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oi,ihw->ohw", weights[:, :, dy, dx], padded[:, dy:dy + h, dx:dx + w])
    return out


def _float_pool(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("pooled layer needs even dims")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def float_layer_outputs(fm: FloatModel, inp) -> list:
    """Post-activation (pre-pool) float outputs of every layer."""
    x = inp.data if isinstance(inp, FloatTensor) else np.asarray(inp, dtype=np.float64)
    outs = []
    for k, layer in enumerate(fm.layers):
        if x.shape[0] != layer.in_channels:
            raise ShapeError(f"layer {k} expects {layer.in_channels} channels, got {x.shape[0]}")
        y = layer.activation.apply(_float_conv(x, layer.weights, layer.bias))
        outs.append(y)
        x = _float_pool(y) if layer.pool else y
    return outs


def reference_float_forward(fm: FloatModel, inp) -> FloatTensor:
    """Unquantized float64 forward pass."""
    x = inp.data if isinstance(inp, FloatTensor) else np.asarray(inp, dtype=np.float64)
    for layer in fm.layers:
        if x.shape[0] != layer.in_channels:
            raise ShapeError(f"layer expects {layer.in_channels} channels, got {x.shape[0]}")
        x = layer.activation.apply(_float_conv(x, layer.weights, layer.bias))
        if layer.pool:
            x = _float_pool(x)
    return FloatTensor(x)


def error_stats(a: FeatureMap, b: FloatTensor):
    """``(max_abs, mean_abs)`` of ``decode(a) - b``."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a.decoded() - b.data)
    if diff.size == 0:
        return 0.0, 0.0
    return float(diff.max()), float(diff.mean())
