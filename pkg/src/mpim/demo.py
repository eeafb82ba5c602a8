"""Bundled demo model: 3 -> 8 -> 8 channels, both layers ReLU + 2x2 pool."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .model import FloatLayer, FloatModel
from .quantizer import load_float_model, quantize_model, save_device_model, save_float_model

DEMO_NAME = "demo"
DEMO_SEED = 2019


def build_demo_float_model() -> FloatModel:
    """Regenerate the demo weights (the shipped files were written from this)."""
    rng = np.random.default_rng(DEMO_SEED)
    layers = []
    for n_in, n_out in ((3, 8), (8, 8)):
        scale = np.sqrt(2.0 / (9 * n_in))
        w = (rng.standard_normal((n_out, n_in, 3, 3)) * scale).astype(np.float32)
        b = (rng.standard_normal(n_out) * 0.05).astype(np.float32)
        layers.append(FloatLayer(w, b, pool=True))
    return FloatModel(DEMO_NAME, layers, (3, 224, 224)).validate()


def demo_float_model() -> FloatModel:
    with resources.as_file(resources.files("mpim") / "data" / f"{DEMO_NAME}.json") as path:
        return load_float_model(path)


def demo_device_model():
    md, blob, _ = quantize_model(demo_float_model())
    return md, blob


def write_demo(outdir: Path):
    """Write float and device model files for the demo into ``outdir``."""
    outdir.mkdir(parents=True, exist_ok=True)
    fm = demo_float_model()
    f32 = save_float_model(fm, outdir / f"{DEMO_NAME}.json")
    md, blob = demo_device_model()
    dev_manifest = outdir / f"{DEMO_NAME}.device.json"
    bin_path = save_device_model(md, blob, dev_manifest)
    return [outdir / f"{DEMO_NAME}.json", f32, dev_manifest, bin_path]
