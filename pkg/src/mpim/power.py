"""Power, efficiency and throughput model.

Constants come from silicon measurements of the 22 nm MRAM chip (the
``paper-22nm`` preset).  Efficiency follows a one-line derivation: the
coefficient memory draws a fraction ``f`` of chip power, and in MRAM that
share runs at ``r`` times the SRAM current, so relative to an all-SRAM chip
of efficiency ``base``::

    efficiency = base / ((1 - f) + f * r)

The cycle model is a documented parameterized formula, not a measurement:
no per-layer cycle counts exist for the chip.  TOPS count 2 ops per MAC.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .memory import DEFAULT_MRAM_CAPACITY, DEFAULT_SRAM_CAPACITY, MemoryKind

OPS_PER_MAC = 2
PRESET_ENV = "MPIM_PRESET_DIR"
DEFAULT_PRESET = "paper-22nm"

# Reference chip: 9.3 TOPS/W and about 9 MB of on-chip SRAM.
SRAM_BASELINE_TOPS_W = 9.3


class Temperature(enum.Enum):
    ROOM = "room"
    HIGH70C = "high"


class PowerConfigError(ValueError):
    pass


def _table(mram_room, mram_high, sram_room, sram_high):
    return {(MemoryKind.MRAM, Temperature.ROOM): mram_room,
            (MemoryKind.MRAM, Temperature.HIGH70C): mram_high,
            (MemoryKind.SRAM, Temperature.ROOM): sram_room,
            (MemoryKind.SRAM, Temperature.HIGH70C): sram_high}


@dataclass(frozen=True)
class PowerConfig:
    # milliwatts, measured at VDD 0.9 V / VDIO 2 V
    dynamic_mw: dict = field(default_factory=lambda: _table(38.3, 35.4, 39.2, 43.1))
    standby_mw: dict = field(default_factory=lambda: _table(5.5, 7.2, 34.3, 136.0))
    vdd_volts: float = 0.9
    vdio_volts: float = 2.0
    base_efficiency_tops_w: float = SRAM_BASELINE_TOPS_W
    coeff_power_fraction: float = 0.25
    rest_power_fraction: float = 0.75
    ivdd_ratio_mram_vs_sram: float = 0.75
    clock_hz: float = 12.5e6
    mram_capacity: int = DEFAULT_MRAM_CAPACITY
    sram_capacity: int = DEFAULT_SRAM_CAPACITY

    def __post_init__(self):
        if not math.isclose(self.coeff_power_fraction + self.rest_power_fraction, 1.0,
                            rel_tol=0, abs_tol=1e-12):
            raise PowerConfigError("coefficient and rest power fractions must sum to 1")
        for name in ("coeff_power_fraction", "rest_power_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise PowerConfigError(f"{name} must lie in (0, 1)")
        for table in (self.dynamic_mw, self.standby_mw):
            if set(table) != set(_table(0, 0, 0, 0)):
                raise PowerConfigError("power tables need all (memory kind, temperature) keys")
            if any(v < 0 for v in table.values()):
                raise PowerConfigError("powers must be non-negative")
        if self.clock_hz <= 0 or self.base_efficiency_tops_w <= 0 or self.ivdd_ratio_mram_vs_sram <= 0:
            raise PowerConfigError("clock, base efficiency and Ivdd ratio must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("dynamic_mw", "standby_mw"):
            table = getattr(self, key)
            d[key] = {k.value: {t.value: table[(k, t)] for t in Temperature} for k in MemoryKind}
        return d

    @classmethod
    def from_dict(cls, doc: dict, base: "PowerConfig | None" = None) -> "PowerConfig":
        """Overlay ``doc`` (same shape as :meth:`to_dict`) on ``base``."""
        base = base or cls()
        known = set(base.to_dict())
        unknown = sorted(set(doc) - known)
        if unknown:
            raise PowerConfigError(f"unknown power config field {unknown[0]!r}")
        changes = {}
        for key, val in doc.items():
            if key in ("dynamic_mw", "standby_mw"):
                table = dict(getattr(base, key))
                try:
                    for kind, temps in val.items():
                        for temp, mw in temps.items():
                            table[(MemoryKind(kind), Temperature(temp))] = float(mw)
                except (AttributeError, ValueError) as exc:
                    raise PowerConfigError(f"bad {key} table: {exc}") from exc
                changes[key] = table
            else:
                changes[key] = val
        return replace(base, **changes)

    @classmethod
    def from_file(cls, path) -> "PowerConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise PowerConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(doc)


PRESETS = {DEFAULT_PRESET: PowerConfig()}


def load_preset(name: str = DEFAULT_PRESET, preset_dir=None) -> PowerConfig:
    """Named preset; ``<dir>/<name>.json`` in ``preset_dir`` or $MPIM_PRESET_DIR wins."""
    preset_dir = preset_dir or os.environ.get(PRESET_ENV)
    if preset_dir:
        candidate = Path(preset_dir) / f"{name}.json"
        if candidate.is_file():
            doc = json.loads(candidate.read_text())
            return PowerConfig.from_dict(doc, PRESETS.get(name))
    if name not in PRESETS:
        raise PowerConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]


@dataclass(frozen=True)
class CycleModel:
    """``cycles = ceil(passes * p^2 * 9 * in * out / rate) + overhead`` per layer.

    ``passes = ceil(n_tiles / m^2)``.  ``frame_overhead_cycles`` is added
    once per frame so a calibrated model can hit an exact frame budget.
    """

    macs_per_engine_per_cycle: float = 1.0
    overhead_cycles_per_layer: int = 0
    frame_overhead_cycles: int = 0

    def __post_init__(self):
        if self.macs_per_engine_per_cycle <= 0:
            raise ValueError("macs_per_engine_per_cycle must be positive")
        if self.overhead_cycles_per_layer < 0 or self.frame_overhead_cycles < 0:
            raise ValueError("overheads must be non-negative")


def efficiency(base: float, coeff_frac: float, ivdd_ratio: float) -> float:
    denom = efficiency_denominator(coeff_frac, ivdd_ratio)
    if denom <= 0:
        raise ValueError(f"efficiency denominator {denom} is not positive")
    return base / denom


def efficiency_denominator(coeff_frac: float, ivdd_ratio: float) -> float:
    return (1.0 - coeff_frac) + coeff_frac * ivdd_ratio


def frame_rate(clock_hz: float, cycles_per_frame: int) -> float:
    if cycles_per_frame <= 0:
        raise ValueError("cycles_per_frame must be positive")
    return clock_hz / cycles_per_frame


def _layer_work(in_ch: int, out_ch: int, dims, m: int, p: int) -> int:
    h, w = dims
    n_tiles = -(-h // p) * -(-w // p)
    passes = -(-n_tiles // (m * m))
    return passes * p * p * 9 * in_ch * out_ch


def layer_cycles(layer, dims, m: int, p: int, cm: CycleModel = CycleModel()) -> int:
    """Cycles for one layer at input resolution ``dims = (h, w)``."""
    work = _layer_work(layer.in_channels, layer.out_channels, dims, m, p)
    return math.ceil(work / cm.macs_per_engine_per_cycle) + cm.overhead_cycles_per_layer


def frame_cycles(layers, dims_list, m: int, p: int, cm: CycleModel = CycleModel()) -> int:
    return sum(layer_cycles(l, d, m, p, cm) for l, d in zip(layers, dims_list)) + cm.frame_overhead_cycles


def calibrate_cycle_model(layers, dims_list, m: int, p: int, target_cycles: int) -> CycleModel:
    """Cycle model whose frame cost for this workload is exactly ``target_cycles``.

    The MAC rate is set so the ceil'd layer costs stay at or under the target
    and the remainder goes to the per-frame overhead.
    """
    work = sum(_layer_work(l.in_channels, l.out_channels, d, m, p) for l, d in zip(layers, dims_list))
    budget = target_cycles - len(layers)  # room for one ceil per layer
    if work <= 0 or budget <= 0:
        raise ValueError("workload and target must leave a positive cycle budget")
    rate = work / budget
    cm = CycleModel(macs_per_engine_per_cycle=rate)
    spent = frame_cycles(layers, dims_list, m, p, cm)
    if spent > target_cycles:
        raise ValueError("calibration overshot the target")
    return replace(cm, frame_overhead_cycles=target_cycles - spent)


def dynamic_power(cfg: PowerConfig, kind: MemoryKind, temp: Temperature) -> float:
    try:
        return cfg.dynamic_mw[(MemoryKind(kind), Temperature(temp))]
    except (KeyError, ValueError) as exc:
        raise PowerConfigError(f"no dynamic power for ({kind}, {temp})") from exc


def standby_power(cfg: PowerConfig, kind: MemoryKind, temp: Temperature) -> float:
    try:
        return cfg.standby_mw[(MemoryKind(kind), Temperature(temp))]
    except (KeyError, ValueError) as exc:
        raise PowerConfigError(f"no standby power for ({kind}, {temp})") from exc


@dataclass(frozen=True)
class PowerReport:
    memory_kind: MemoryKind
    temperature: Temperature
    total_macs: int
    total_ops: int
    cycles: int
    clock_hz: float
    fps: float
    dynamic_mw: float
    standby_mw: float
    efficiency_denominator: float
    effective_tops_w: float
    base_efficiency_tops_w: float
    coeff_power_fraction: float
    ivdd_ratio: float
    ops_per_mac: int
    access: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["memory_kind"] = self.memory_kind.value
        d["temperature"] = self.temperature.value
        return d

    def format_table(self) -> str:
        rows = [
            ("memory", self.memory_kind.value),
            ("temperature", self.temperature.value),
            ("MACs / frame", f"{self.total_macs:,}"),
            (f"ops / frame ({self.ops_per_mac}/MAC)", f"{self.total_ops:,}"),
            ("cycles / frame", f"{self.cycles:,}"),
            ("clock", f"{self.clock_hz / 1e6:g} MHz"),
            ("frame rate", f"{self.fps:.1f} fps"),
            ("dynamic power", f"{self.dynamic_mw:g} mW"),
            ("standby power", f"{self.standby_mw:g} mW"),
            ("efficiency", f"{self.base_efficiency_tops_w:g} / {self.efficiency_denominator:g}"
                           f" = {self.effective_tops_w:.1f} TOPS/W"),
        ]
        for kind, acc in self.access.items():
            rows.append((f"{kind} read/written", f"{acc['bytes_read']:,} / {acc['bytes_written']:,} B"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def build_report(counters, total_macs: int, cycles: int, cfg: PowerConfig,
                 kind: MemoryKind = MemoryKind.MRAM,
                 temp: Temperature = Temperature.ROOM) -> PowerReport:
    """Report for one frame of work.  ``counters`` maps memory kind -> AccessCounters."""
    kind, temp = MemoryKind(kind), Temperature(temp)
    if total_macs < 0:
        raise ValueError("total_macs must be non-negative")
    fps = frame_rate(cfg.clock_hz, cycles)
    ratio = cfg.ivdd_ratio_mram_vs_sram if kind is MemoryKind.MRAM else 1.0
    denom = efficiency_denominator(cfg.coeff_power_fraction, ratio)
    access = {k.value: (c.as_dict() if hasattr(c, "as_dict") else dict(c))
              for k, c in (counters or {}).items()}
    return PowerReport(
        memory_kind=kind, temperature=temp, total_macs=int(total_macs),
        total_ops=OPS_PER_MAC * int(total_macs), cycles=int(cycles), clock_hz=cfg.clock_hz,
        fps=fps, dynamic_mw=dynamic_power(cfg, kind, temp), standby_mw=standby_power(cfg, kind, temp),
        efficiency_denominator=denom,
        effective_tops_w=efficiency(cfg.base_efficiency_tops_w, cfg.coeff_power_fraction, ratio),
        base_efficiency_tops_w=cfg.base_efficiency_tops_w,
        coeff_power_fraction=cfg.coeff_power_fraction, ivdd_ratio=ratio,
        ops_per_mac=OPS_PER_MAC, access=access)
