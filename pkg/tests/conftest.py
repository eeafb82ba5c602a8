import contextlib

import numpy as np
import pytest

from mpim.dsfp import DSFP9, encode
from mpim.memory import MiB, DeviceMemory
from mpim.model import FeatureMap, FloatLayer, FloatModel

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def criterion(number, title):
        try:
            yield
        except BaseException as exc:
            _ACCEPTANCE.append((number, "FAIL", f"{title}: {type(exc).__name__}: {exc}"))
            raise
        _ACCEPTANCE.append((number, "PASS", title))

    return criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, text in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{status}] criterion {number}: {text}")


def random_float_model(rng, in_shape, n_layers, max_ch=8, name="rand", scale=0.4):
    c, h, w = in_shape
    layers = []
    for _ in range(n_layers):
        out = int(rng.integers(1, max_ch + 1))
        pool = bool(h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2 and rng.random() < 0.5)
        act = "relu" if rng.random() < 0.75 else "identity"
        layers.append(FloatLayer(rng.normal(size=(out, c, 3, 3)) * scale,
                                 rng.normal(size=out) * 0.2, pool, act))
        c = out
        if pool:
            h, w = h // 2, w // 2
    return FloatModel(name, layers, in_shape).validate()


def random_fmap(rng, shape, bias=None):
    values = rng.uniform(-1.0, 1.0, size=shape) * 2.0 ** rng.integers(-2, 3)
    if bias is None:
        from mpim.quantizer import choose_bias

        bias = choose_bias(values, DSFP9)
    return FeatureMap(encode(values, DSFP9, bias), bias)


def small_memory():
    return DeviceMemory(mram_capacity=4 * MiB, sram_capacity=1 * MiB)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
