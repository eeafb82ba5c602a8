"""Float model -> device model conversion and the model file formats.

Device model files
    ``<name>.json``  manifest (version 1)::

        {"version": 1, "name": ..., "weights_file": ..., "weights_len": ...,
         "layers": [{"in_ch", "out_ch", "pool", "act", "weight_offset",
                     "weight_exp_bias", "out_exp_bias", "bias_codes": [u16...]}]}

    ``<weights_file>``  little-endian u16 DSFP15 codes, ``[out][in][ky][kx]``
    per layer, layers back to back.

Float model files
    Same manifest shape with ``"weights_f32"`` naming a little-endian binary32
    file in ``[out][in][3][3]`` order and float biases inline as ``"bias"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsfp import (DSFP9, DSFP15, EXP_BIAS_MAX, EXP_BIAS_MIN, DsfpDomainError, DsfpFormat,
                   codes_to_bytes, decode, encode)
from .model import (Activation, FloatLayer, FloatModel, LayerDescriptor, ModelDescriptor,
                    ShapeError)

MANIFEST_VERSION = 1

_DEVICE_TOP = ("version", "name", "weights_file", "weights_len", "layers")
_DEVICE_LAYER = ("in_ch", "out_ch", "pool", "act", "weight_offset", "weight_exp_bias",
                 "out_exp_bias", "bias_codes")
_FLOAT_TOP = ("version", "name", "weights_f32", "layers", "input_shape")
_FLOAT_LAYER = ("in_ch", "out_ch", "pool", "act", "bias")


class ManifestError(ValueError):
    """Malformed or inconsistent model manifest."""


@dataclass(frozen=True)
class QuantError:
    max_abs: float
    mean_abs: float
    saturated_count: int


def choose_bias(values, fmt: DsfpFormat) -> int:
    """Largest legal exponent bias whose max finite value still covers ``max|values|``.

    That puts the largest magnitude in the top binade, where it keeps the most
    precision without saturating.  All-zero input returns the format default;
    magnitudes too large even for the smallest legal bias get that bias (and
    will saturate).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("choose_bias needs at least one value")
    if not np.all(np.isfinite(v)):
        raise DsfpDomainError("choose_bias got a non-finite value")
    peak = float(np.max(np.abs(v)))
    if peak == 0.0:
        return fmt.default_exp_bias
    bias = fmt.max_exp_field + math.floor(math.log2((2.0 - 2.0 ** -fmt.frac_bits) / peak))
    # log2 can be off by one at exact binade edges
    while bias < EXP_BIAS_MAX and fmt.max_finite(bias + 1) >= peak:
        bias += 1
    while bias > EXP_BIAS_MIN and fmt.max_finite(bias) < peak:
        bias -= 1
    return int(min(max(bias, EXP_BIAS_MIN), EXP_BIAS_MAX))


def quantize_tensor(values, fmt: DsfpFormat, bias: int):
    """Encode ``values`` and measure the error of the decoded result."""
    v = np.asarray(values, dtype=np.float64)
    codes = encode(v, fmt, bias)
    err = np.abs(decode(np.asarray(codes), fmt, bias) - v)
    saturated = int(np.count_nonzero(np.abs(v) > fmt.max_finite(bias)))
    stats = QuantError(float(err.max()) if err.size else 0.0,
                       float(err.mean()) if err.size else 0.0, saturated)
    return np.asarray(codes, dtype=np.uint16), stats


def quantize_model(fm: FloatModel, out_exp_biases=None):
    """Quantize every layer of ``fm``.

    The DSFP15 exponent bias of a layer is chosen over its weights and biases
    together, since both are stored at that bias.  Activation biases default to
    the DSFP9 default unless ``out_exp_biases`` (one per layer) is given, e.g.
    from :func:`calibrate`.

    Returns ``(descriptor, blob, errors)``.
    """
    fm.validate()
    if out_exp_biases is None:
        out_exp_biases = [DSFP9.default_exp_bias] * len(fm.layers)
    if len(out_exp_biases) != len(fm.layers):
        raise ShapeError("need one activation bias per layer")
    layers, chunks, errors = [], [], []
    offset = 0
    for layer, out_bias in zip(fm.layers, out_exp_biases):
        params = np.concatenate([layer.weights.ravel(), layer.bias])
        wbias = choose_bias(params, DSFP15)
        wcodes, err = quantize_tensor(params, DSFP15, wbias)
        n_w = layer.weights.size
        blob = codes_to_bytes(wcodes[:n_w])
        layers.append(LayerDescriptor(
            in_channels=layer.in_channels, out_channels=layer.out_channels, pool=layer.pool,
            activation=layer.activation, weight_offset=offset, weight_exp_bias=wbias,
            bias_codes=tuple(int(c) for c in wcodes[n_w:]), out_exp_bias=int(out_bias)))
        chunks.append(blob)
        errors.append(err)
        offset += len(blob)
    md = ModelDescriptor(fm.name, layers, offset).check()
    return md, b"".join(chunks), errors


def calibrate(fm: FloatModel, sample) -> list:
    """Per-layer activation biases from one sample pushed through the float model."""
    from .oracle import float_layer_outputs

    return [choose_bias(out, DSFP9) for out in float_layer_outputs(fm, sample)]


# ---------------------------------------------------------------- manifests


def _require(obj: dict, keys, where: str, optional=()):
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(keys))
    if unknown:
        raise ManifestError(f"{where}: unknown field {unknown[0]!r} for manifest "
                            f"version {MANIFEST_VERSION}")
    for key in keys:
        if key not in obj and key not in optional:
            raise ManifestError(f"{where}: missing field {key!r}")


def _int(obj, key, where):
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ManifestError(f"{where}.{key}: expected an integer, got {val!r}")
    return val


def _load_json(buf: bytes):
    try:
        doc = json.loads(buf)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest: expected a JSON object")
    if "version" not in doc:
        raise ManifestError("manifest: missing field 'version'")
    if doc["version"] != MANIFEST_VERSION:
        raise ManifestError(f"manifest: unsupported version {doc['version']!r} "
                            f"(expected {MANIFEST_VERSION})")
    return doc


def _activation(obj, where):
    try:
        return Activation(obj["act"])
    except ValueError:
        raise ManifestError(f"{where}.act: unknown activation {obj['act']!r}") from None


def serialize_manifest(md: ModelDescriptor) -> bytes:
    doc = {
        "version": MANIFEST_VERSION,
        "name": md.id,
        "weights_file": md.weights_file,
        "weights_len": md.coeff_bytes,
        "layers": [{
            "in_ch": l.in_channels, "out_ch": l.out_channels, "pool": l.pool,
            "act": l.activation.value, "weight_offset": l.weight_offset,
            "weight_exp_bias": l.weight_exp_bias, "out_exp_bias": l.out_exp_bias,
            "bias_codes": list(l.bias_codes),
        } for l in md.layers],
    }
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


def parse_manifest(buf: bytes) -> ModelDescriptor:
    doc = _load_json(buf)
    _require(doc, _DEVICE_TOP, "manifest")
    if not isinstance(doc["name"], str) or not isinstance(doc["weights_file"], str):
        raise ManifestError("manifest: 'name' and 'weights_file' must be strings")
    if not isinstance(doc["layers"], list):
        raise ManifestError("manifest.layers: expected a list")
    layers = []
    for k, raw in enumerate(doc["layers"]):
        where = f"manifest.layers[{k}]"
        _require(raw, _DEVICE_LAYER, where)
        if not isinstance(raw["pool"], bool):
            raise ManifestError(f"{where}.pool: expected true/false")
        codes = raw["bias_codes"]
        if not isinstance(codes, list) or any(isinstance(c, bool) or not isinstance(c, int) for c in codes):
            raise ManifestError(f"{where}.bias_codes: expected a list of integers")
        for key in ("weight_exp_bias", "out_exp_bias"):
            b = _int(raw, key, where)
            if not EXP_BIAS_MIN <= b <= EXP_BIAS_MAX:
                raise ManifestError(f"{where}.{key}: {b} outside [{EXP_BIAS_MIN}, {EXP_BIAS_MAX}]")
        layers.append(LayerDescriptor(
            in_channels=_int(raw, "in_ch", where), out_channels=_int(raw, "out_ch", where),
            pool=raw["pool"], activation=_activation(raw, where),
            weight_offset=_int(raw, "weight_offset", where),
            weight_exp_bias=raw["weight_exp_bias"], bias_codes=tuple(codes),
            out_exp_bias=raw["out_exp_bias"]))
    md = ModelDescriptor(doc["name"], layers, _int(doc, "weights_len", "manifest"),
                         doc["weights_file"])
    try:
        md.check()
    except ShapeError as exc:
        raise ManifestError(f"manifest validation: {exc}") from exc
    return md


def check_blob(md: ModelDescriptor, blob: bytes):
    if len(blob) != md.coeff_bytes:
        raise ManifestError(f"model {md.id!r}: weights_len is {md.coeff_bytes} B "
                            f"but the weight blob holds {len(blob)} B")
    codes = np.frombuffer(blob, dtype="<u2")
    if codes.size and codes.max() >= DSFP15.n_codes:
        raise ManifestError(f"model {md.id!r}: weight blob has bits above the DSFP15 width")


def save_device_model(md: ModelDescriptor, blob: bytes, path) -> Path:
    """Write manifest to ``path`` and the blob next to it; returns the blob path."""
    path = Path(path)
    check_blob(md, blob)
    blob_path = path.parent / md.weights_file
    blob_path.write_bytes(blob)
    path.write_bytes(serialize_manifest(md))
    return blob_path


def load_device_model(path):
    path = Path(path)
    md = parse_manifest(path.read_bytes())
    blob_path = path.parent / md.weights_file
    if not blob_path.is_file():
        raise FileNotFoundError(f"weights file not found: {blob_path}")
    blob = blob_path.read_bytes()
    check_blob(md, blob)
    return md, blob


def save_float_model(fm: FloatModel, path, weights_file: str | None = None) -> Path:
    path = Path(path)
    weights_file = weights_file or f"{fm.name}.f32"
    doc = {"version": MANIFEST_VERSION, "name": fm.name, "weights_f32": weights_file,
           "layers": [{"in_ch": l.in_channels, "out_ch": l.out_channels, "pool": l.pool,
                       "act": l.activation.value, "bias": [float(b) for b in l.bias]}
                      for l in fm.layers]}
    if fm.input_shape is not None:
        doc["input_shape"] = list(fm.input_shape)
    raw = np.concatenate([l.weights.ravel() for l in fm.layers]).astype("<f4")
    (path.parent / weights_file).write_bytes(raw.tobytes())
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path.parent / weights_file


def load_float_model(path) -> FloatModel:
    path = Path(path)
    doc = _load_json(path.read_bytes())
    _require(doc, _FLOAT_TOP, "float manifest", optional=("input_shape",))
    wpath = path.parent / doc["weights_f32"]
    if not wpath.is_file():
        raise FileNotFoundError(f"weights file not found: {wpath}")
    raw = np.frombuffer(wpath.read_bytes(), dtype="<f4").astype(np.float64)
    if not isinstance(doc["layers"], list):
        raise ManifestError("float manifest.layers: expected a list")
    layers, pos = [], 0
    for k, spec in enumerate(doc["layers"]):
        where = f"float manifest.layers[{k}]"
        _require(spec, _FLOAT_LAYER, where)
        n_in, n_out = _int(spec, "in_ch", where), _int(spec, "out_ch", where)
        n = n_out * n_in * 9
        if pos + n > raw.size:
            raise ManifestError(f"{where}: weights file too short ({raw.size} floats, "
                                f"need at least {pos + n})")
        try:
            layers.append(FloatLayer(raw[pos:pos + n].reshape(n_out, n_in, 3, 3), spec["bias"],
                                     bool(spec["pool"]), _activation(spec, where)))
        except ShapeError as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        pos += n
    if pos != raw.size:
        raise ManifestError(f"float manifest: weights file has {raw.size} floats, layers use {pos}")
    shape = tuple(doc["input_shape"]) if "input_shape" in doc else None
    try:
        return FloatModel(doc["name"], layers, shape).validate()
    except ShapeError as exc:
        raise ManifestError(f"float manifest: {exc}") from exc
