"""Data types shared by the engine, quantizer, oracle and scheduler."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsfp import DSFP9, DSFP15, codes_from_bytes, codes_to_bytes, decode
from .memory import MemoryRegion


class ShapeError(ValueError):
    pass


class Activation(enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"

    def apply(self, x):
        return np.maximum(x, 0.0) if self is Activation.RELU else x


@dataclass
class FeatureMap:
    """Channel-major ``[c][y][x]`` tensor of DSFP9 codes with one exponent bias."""

    data: np.ndarray
    exp_bias: int = DSFP9.default_exp_bias

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"feature map must be 3-D (c, h, w), got shape {data.shape}")
        if data.dtype.kind not in "iu":
            raise ShapeError("feature map data must be integer DSFP9 codes")
        if data.size and (data.min() < 0 or data.max() >= DSFP9.n_codes):
            raise ShapeError("feature map holds values outside the DSFP9 code space")
        self.data = np.ascontiguousarray(data, dtype=np.uint16)
        self.exp_bias = int(self.exp_bias)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.size * 2

    def decoded(self) -> np.ndarray:
        return decode(self.data, DSFP9, self.exp_bias)

    def to_bytes(self) -> bytes:
        return codes_to_bytes(self.data)

    @classmethod
    def from_bytes(cls, buf: bytes, shape, exp_bias: int) -> "FeatureMap":
        return cls(codes_from_bytes(buf, DSFP9, shape), exp_bias)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.exp_bias == other.exp_bias and np.array_equal(self.data, other.data)


@dataclass
class FloatLayer:
    weights: np.ndarray  # [out][in][3][3]
    bias: np.ndarray     # [out]
    pool: bool = False
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ShapeError(f"layer weights must be [out][in][3][3], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias length {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        self.activation = Activation(self.activation)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class FloatModel:
    name: str
    layers: list
    input_shape: Optional[tuple] = None  # (c, h, w) if known

    def validate(self):
        if not self.layers:
            raise ShapeError(f"model {self.name!r} has no layers")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise ShapeError(f"layer {k} produces {a.out_channels} channels "
                                 f"but layer {k + 1} expects {b.in_channels}")
        if self.input_shape is not None:
            trace_shapes(self.layers, self.input_shape)
        return self


def trace_shapes(layers, input_shape):
    """Per-layer input shapes; checks channel counts and even dims before pooling."""
    c, h, w = input_shape
    shapes = []
    for k, layer in enumerate(layers):
        if layer.in_channels != c:
            raise ShapeError(f"layer {k} expects {layer.in_channels} channels, input has {c}")
        shapes.append((c, h, w))
        c = layer.out_channels
        if layer.pool:
            if h % 2 or w % 2:
                raise ShapeError(f"layer {k} pools an odd-sized {h}x{w} map")
            h, w = h // 2, w // 2
    shapes.append((c, h, w))
    return shapes


@dataclass(frozen=True)
class LayerDescriptor:
    in_channels: int
    out_channels: int
    pool: bool
    activation: Activation
    weight_offset: int
    weight_exp_bias: int
    bias_codes: tuple
    out_exp_bias: int = DSFP9.default_exp_bias

    @property
    def weight_nbytes(self) -> int:
        return self.out_channels * self.in_channels * 9 * 2

    def bias_array(self) -> np.ndarray:
        return np.asarray(self.bias_codes, dtype=np.uint16)


@dataclass
class ModelDescriptor:
    id: str
    layers: list
    coeff_bytes: int
    weights_file: str = ""
    region: Optional[MemoryRegion] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.weights_file:
            self.weights_file = f"{self.id}.bin"

    def check(self):
        total = sum(layer.weight_nbytes for layer in self.layers)
        if total != self.coeff_bytes:
            raise ShapeError(f"model {self.id!r}: layers need {total} coefficient bytes, "
                             f"descriptor says {self.coeff_bytes}")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise ShapeError(f"model {self.id!r}: layer {k} -> {k + 1} channel mismatch")
        for k, layer in enumerate(self.layers):
            if layer.weight_offset < 0 or layer.weight_offset + layer.weight_nbytes > self.coeff_bytes:
                raise ShapeError(f"model {self.id!r}: layer {k} weights fall outside the blob")
            if len(layer.bias_codes) != layer.out_channels:
                raise ShapeError(f"model {self.id!r}: layer {k} has {len(layer.bias_codes)} "
                                 f"bias codes for {layer.out_channels} outputs")
            if any(not 0 <= c < DSFP15.n_codes for c in layer.bias_codes):
                raise ShapeError(f"model {self.id!r}: layer {k} bias code outside DSFP15")
        return self

    def layer_weights(self, blob: bytes, k: int) -> np.ndarray:
        layer = self.layers[k]
        raw = blob[layer.weight_offset:layer.weight_offset + layer.weight_nbytes]
        return codes_from_bytes(raw, DSFP15, (layer.out_channels, layer.in_channels, 3, 3))
