"""Functional model of the CNN Matrix Processing Engine (MPE) grid.

The grid is ``m x m`` engines.  Each engine owns an input buffer holding one
``p x p`` tile plus a one-pixel halo for every input channel and a
coefficient buffer holding a block of 3x3 kernels (a few output channels).
Weighted sums live in a wide accumulator only while a tile is in flight.

A layer runs in passes.  A pass loads up to ``m * m`` tiles into the input
buffers; the clock-skew ring then rotates the input buffers from engine to
engine while the coefficient buffers stay put, so every tile meets every
kernel block once per pass.  The ring only moves data; the sums are exact,
so the result is independent of the tile assignment and rotation schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsfp import DSFP9, DSFP15, WideAccumulator, codes_from_bytes, decode, split_codes
from .memory import DeviceMemory, MemoryKind, MemoryRegion
from .model import Activation, FeatureMap, LayerDescriptor, ShapeError

DEFAULT_GRID_M = 14
DEFAULT_TILE_P = 14


class ResidencyError(RuntimeError):
    """Layer coefficients are not resident in MRAM."""


@dataclass
class Kernel3x3:
    weights: np.ndarray  # (3, 3) DSFP15 codes; leading batch dims allowed
    exp_bias: int = DSFP15.default_exp_bias

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.uint16)
        if self.weights.shape[-2:] != (3, 3):
            raise ShapeError(f"kernel must be 3x3, got {self.weights.shape}")


@dataclass
class EngineState:
    input_buffer: Optional[np.ndarray] = None  # (c, p+2, p+2) DSFP9 codes
    tile: Optional[tuple] = None               # (ty, tx) of the buffered tile
    coeff_buffer: Optional[np.ndarray] = None  # (k, c, 3, 3) DSFP15 codes
    out_channels: tuple = ()                   # output channels of coeff_buffer


@dataclass
class EngineGrid:
    m: int = DEFAULT_GRID_M
    p: int = DEFAULT_TILE_P
    engines: list = field(default_factory=list)

    def __post_init__(self):
        if self.m < 1 or self.p < 1:
            raise ValueError("grid needs m >= 1 and p >= 1")
        if self.p % 2:
            raise ValueError(f"tile size p must be even for 2x2 pooling, got {self.p}")
        if not self.engines:
            self.engines = [EngineState() for _ in range(self.m * self.m)]
        if len(self.engines) != self.m * self.m:
            raise ValueError("engine count must be m * m")

    @property
    def n_engines(self) -> int:
        return self.m * self.m

    def clear(self):
        for e in self.engines:
            e.input_buffer = None
            e.tile = None
            e.coeff_buffer = None
            e.out_channels = ()


@dataclass(frozen=True)
class RingSchedule:
    """How tiles and kernels are placed on the ring and how far it turns.

    ``stride`` must be coprime with the engine count so that a full cycle
    brings every input buffer past every engine.  ``tile_seed`` permutes the
    tile-to-engine assignment (``None`` keeps row-major order) and
    ``owner_offset`` shifts which engines hold the kernel blocks.
    """

    stride: int = 1
    tile_seed: Optional[int] = None
    owner_offset: int = 0


def pad_tile(fmap: FeatureMap, channel: int, tile_y: int, tile_x: int, p: int) -> np.ndarray:
    """The ``(p+2) x (p+2)`` input tile of one channel, halo included.

    Halo pixels inside the map come from the neighbouring tiles; pixels
    outside the map (the border, or the pad-up region of edge tiles) are zero.
    """
    n_ty, n_tx = -(-fmap.height // p), -(-fmap.width // p)
    if not (0 <= channel < fmap.channels and 0 <= tile_y < n_ty and 0 <= tile_x < n_tx):
        raise IndexError(f"tile ({channel}, {tile_y}, {tile_x}) outside a "
                         f"{fmap.channels}x{n_ty}x{n_tx} tiling")
    return _pad_tiles(fmap.data[channel:channel + 1], [(tile_y, tile_x)], p)[0, 0]


def _pad_tiles(data: np.ndarray, tiles, p: int) -> np.ndarray:
    """Padded tiles for all channels of ``data``: shape (n, c, p+2, p+2)."""
    c, h, w = data.shape
    n_ty, n_tx = -(-h // p), -(-w // p)
    canvas = np.zeros((c, n_ty * p + 2, n_tx * p + 2), dtype=np.uint16)
    canvas[:, 1:h + 1, 1:w + 1] = data
    # the map is zero outside [0, h) x [0, w), which is what the pad-up crop expects
    return np.stack([canvas[:, ty * p:ty * p + p + 2, tx * p:tx * p + p + 2] for ty, tx in tiles])


def conv3x3_tile(tile: np.ndarray, kernel: Kernel3x3, wsum: WideAccumulator,
                 tile_exp_bias: int, reduce_axis=None) -> WideAccumulator:
    """Accumulate a 3x3 convolution of padded tile(s) into ``wsum`` in place.

    ``tile`` is ``(..., p+2, p+2)`` and ``kernel.weights`` is ``(..., 3, 3)``;
    leading dims broadcast against each other.  If ``reduce_axis`` is given
    the products are summed over that (leading) axis before accumulating,
    which is how input channels fold into one weighted sum.
    """
    tile = np.asarray(tile)
    p = tile.shape[-1] - 2
    if tile.shape[-2] != p + 2 or p < 1:
        raise ShapeError(f"padded tile must be square (p+2)x(p+2), got {tile.shape[-2:]}")
    sa, ma, ea = split_codes(tile, DSFP9)
    sw, mw, ew = split_codes(kernel.weights, DSFP15)
    lsb = (1 - tile_exp_bias - DSFP9.frac_bits) + (1 - kernel.exp_bias - DSFP15.frac_bits)
    extra = lsb - wsum.unit_exp
    if extra < 0:
        raise ValueError("accumulator unit is coarser than the product LSB")
    for ky in range(3):
        for kx in range(3):
            win = (..., slice(ky, ky + p), slice(kx, kx + p))
            tap = (..., ky, kx, None, None)
            wsum.add_scaled(sa[win] * sw[tap], ma[win] * mw[tap], ea[win] + ew[tap] + extra,
                            axis=reduce_axis)
    return wsum


def finalize(wsum: WideAccumulator, bias, activation: Activation, out_bias: int,
             bias_exp_bias: int = DSFP15.default_exp_bias) -> np.ndarray:
    """Add the DSFP15 bias, apply the activation and round once to DSFP9."""
    acc = wsum.copy()
    acc.add_code(np.asarray(bias, dtype=np.int64), bias_exp_bias, DSFP15)
    return acc.to_codes(DSFP9, out_bias, relu=Activation(activation) is Activation.RELU)


def maxpool2x2(fmap: FeatureMap) -> FeatureMap:
    c, h, w = fmap.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 max pooling needs even dims, got {h}x{w}")
    windows = fmap.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    values = decode(windows, DSFP9, fmap.exp_bias)
    best = np.take_along_axis(windows, values.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    best = np.where(best == DSFP9.sign_mask, 0, best)  # -0 -> +0
    return FeatureMap(best, fmap.exp_bias)


def ring_rotate(grid: EngineGrid, steps: int) -> EngineGrid:
    """Move every input buffer from engine ``i`` to ``(i + steps) mod m*m``.

    Coefficient buffers stay where they are.
    """
    n = grid.n_engines
    moved = [(e.input_buffer, e.tile) for e in grid.engines]
    for i, (buf, tile) in enumerate(moved):
        dst = grid.engines[(i + steps) % n]
        dst.input_buffer, dst.tile = buf, tile
    return grid


def _load_weights(layer: LayerDescriptor, memory: DeviceMemory, region: MemoryRegion) -> np.ndarray:
    if region is None or region.kind is not MemoryKind.MRAM:
        raise ResidencyError("layer coefficients must be resident in an MRAM region")
    if region not in memory.regions(MemoryKind.MRAM):
        raise ResidencyError(f"MRAM region owned by {region.owner!r} is not allocated")
    raw = memory.read(region, layer.weight_offset, layer.weight_nbytes)
    return codes_from_bytes(raw, DSFP15, (layer.out_channels, layer.in_channels, 3, 3))


def run_conv_layer(fmap: FeatureMap, layer: LayerDescriptor, grid: EngineGrid,
                   memory: DeviceMemory, region: MemoryRegion,
                   schedule: RingSchedule = RingSchedule()) -> FeatureMap:
    """Run one conv (+bias, activation, optional pool) layer on the engine grid."""
    if fmap.channels != layer.in_channels:
        raise ShapeError(f"layer expects {layer.in_channels} input channels, got {fmap.channels}")
    if layer.pool and (fmap.height % 2 or fmap.width % 2):
        raise ShapeError(f"pooled layer needs even dims, got {fmap.height}x{fmap.width}")
    n = grid.n_engines
    if math.gcd(schedule.stride % n, n) != 1 and n > 1:
        raise ValueError(f"ring stride {schedule.stride} does not cycle through {n} engines")
    weights = _load_weights(layer, memory, region)
    bias = layer.bias_array()
    p = grid.p
    h, w = fmap.height, fmap.width
    n_ty, n_tx = -(-h // p), -(-w // p)
    tiles = [(ty, tx) for ty in range(n_ty) for tx in range(n_tx)]
    if schedule.tile_seed is not None:
        order = np.random.default_rng(schedule.tile_seed).permutation(len(tiles))
        tiles = [tiles[i] for i in order]

    # kernel blocks stay on their owner engines for the whole layer
    grid.clear()
    k_per = -(-layer.out_channels // n)
    owners = []
    for j, start in enumerate(range(0, layer.out_channels, k_per)):
        chans = tuple(range(start, min(start + k_per, layer.out_channels)))
        block = np.zeros((k_per,) + weights.shape[1:], dtype=np.uint16)
        block[:len(chans)] = weights[list(chans)]
        eng = grid.engines[(schedule.owner_offset + j) % n]
        eng.coeff_buffer, eng.out_channels = block, chans
        owners.append(eng)

    out = np.zeros((layer.out_channels, n_ty * p, n_tx * p), dtype=np.uint16)
    for first in range(0, len(tiles), n):
        batch = tiles[first:first + n]
        bufs = _pad_tiles(fmap.data, batch, p)
        for e in grid.engines:
            e.input_buffer, e.tile = None, None
        for slot, (tile, buf) in enumerate(zip(batch, bufs)):
            grid.engines[slot].input_buffer, grid.engines[slot].tile = buf, tile
        remaining = len(batch) * len(owners)
        while remaining:
            active = [e for e in owners if e.input_buffer is not None]
            if active:
                x = np.stack([e.input_buffer for e in active])
                k = Kernel3x3(np.stack([e.coeff_buffer for e in active]), layer.weight_exp_bias)
                wsum = WideAccumulator.for_biases(fmap.exp_bias, layer.weight_exp_bias,
                                                  (len(active), k_per, p, p))
                # x: (a, 1, c, p+2, p+2) against weights (a, k, c, 3, 3); fold c
                conv3x3_tile(x[:, None], k, wsum, fmap.exp_bias, reduce_axis=2)
                bias_blk = np.zeros((len(active), k_per, 1, 1), dtype=np.uint16)
                for i, e in enumerate(active):
                    bias_blk[i, :len(e.out_channels), 0, 0] = bias[list(e.out_channels)]
                codes = finalize(wsum, bias_blk, layer.activation, layer.out_exp_bias,
                                 layer.weight_exp_bias)
                for i, e in enumerate(active):
                    chans = list(e.out_channels)
                    ty, tx = e.tile
                    out[chans, ty * p:(ty + 1) * p, tx * p:(tx + 1) * p] = codes[i, :len(chans)]
                remaining -= len(active)
            ring_rotate(grid, schedule.stride)
    result = FeatureMap(out[:, :h, :w], layer.out_exp_bias)
    return maxpool2x2(result) if layer.pool else result

