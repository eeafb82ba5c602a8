"""Command-line interface: ``mpim {quantize,run,power,bench,demo}``.

Exit codes: 0 success, 1 execution failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dsfp import DSFP9, encode
from .engine import EngineGrid
from .memory import AllocationError, DeviceMemory, MemoryKind
from .model import FeatureMap, ShapeError
from .power import (DEFAULT_PRESET, CycleModel, PowerConfig, PowerConfigError, Temperature,
                    build_report, efficiency, efficiency_denominator, load_preset)
from .quantizer import (ManifestError, calibrate, load_device_model, load_float_model,
                        quantize_model, save_device_model)
from .scheduler import (DeviceState, JobStatus, InferenceJob, SchedulerError, load_model,
                        run_concurrent, run_ensemble, run_inference)

FMAP_MAGIC = b"FMAP"


class UsageError(Exception):
    """Bad input or flags (exit 2)."""


# ------------------------------------------------------------------ file I/O


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval < 256 -> (3, h, w) float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UsageError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P6":
        raise UsageError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise UsageError(f"{path}: bad PPM header") from None
    if not 0 < maxval < 256:
        raise UsageError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    if len(buf) - pos < w * h * 3:
        raise UsageError(f"{path}: PPM raster is truncated")
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, img: np.ndarray):
    c, h, w = img.shape
    data = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_fmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != FMAP_MAGIC:
        raise UsageError(f"{path}: not an FMAP file")
    c, h, w = struct.unpack_from("<III", buf, 4)
    if len(buf) != 16 + 4 * c * h * w:
        raise UsageError(f"{path}: FMAP payload is {len(buf) - 16} B, header implies {4 * c * h * w} B")
    return np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float64).reshape(c, h, w)


def write_fmap(path, values: np.ndarray):
    c, h, w = values.shape
    Path(path).write_bytes(FMAP_MAGIC + struct.pack("<III", c, h, w)
                           + np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_input(path) -> FeatureMap:
    from .quantizer import choose_bias

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(4)
    values = read_fmap(path) if magic == FMAP_MAGIC else read_ppm(path)
    bias = choose_bias(values, DSFP9)
    return FeatureMap(encode(values, DSFP9, bias), bias)


# ------------------------------------------------------------------ helpers


def _power_config(args) -> PowerConfig:
    cfg = load_preset(args.preset)
    if getattr(args, "power_config", None):
        cfg = PowerConfig.from_dict(json.loads(Path(args.power_config).read_text()), cfg)
    if getattr(args, "clock_hz", None) is not None:
        cfg = replace(cfg, clock_hz=args.clock_hz)
    return cfg


def _device(args, cfg: PowerConfig) -> DeviceState:
    return DeviceState(memory=DeviceMemory(cfg.mram_capacity, cfg.sram_capacity),
                       grid=EngineGrid(args.grid_m, args.tile_p), power_cfg=cfg,
                       cycle_model=CycleModel())


def _emit(args, doc: dict, human: str):
    if args.format == "json":
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(human)


def _load_models(dev: DeviceState, paths):
    ids = []
    for p in paths:
        md, blob = load_device_model(p)
        load_model(dev, md, blob)
        ids.append(md.id)
    return ids


def _output_paths(output: Path, ids):
    if len(ids) == 1:
        return [output]
    return [output.with_name(f"{output.stem}.{mid}{output.suffix}") for mid in ids]


def _report(dev, job: InferenceJob, args, cycles=None):
    return build_report(dev.memory.counters, job.macs, cycles or job.cycles, dev.power_cfg,
                        MemoryKind(args.memory), Temperature(args.temp))


# ------------------------------------------------------------------ commands


def cmd_quantize(args) -> int:
    fm = load_float_model(args.model)
    out_biases = None
    if args.calibrate:
        sample = load_input(args.calibrate)
        out_biases = calibrate(fm, sample.decoded())
    md, blob, errors = quantize_model(fm, out_biases)
    out = Path(args.output)
    md = replace(md, weights_file=f"{out.stem}.bin")
    blob_path = save_device_model(md, blob, out)
    rows = [{"layer": k, "weight_exp_bias": l.weight_exp_bias, "out_exp_bias": l.out_exp_bias,
             "max_abs": e.max_abs, "mean_abs": e.mean_abs, "saturated": e.saturated_count}
            for k, (l, e) in enumerate(zip(md.layers, errors))]
    lines = [f"{'layer':>5} {'w_bias':>6} {'a_bias':>6} {'max_abs':>12} {'mean_abs':>12} {'sat':>4}"]
    lines += [f"{r['layer']:>5} {r['weight_exp_bias']:>6} {r['out_exp_bias']:>6} "
              f"{r['max_abs']:>12.4e} {r['mean_abs']:>12.4e} {r['saturated']:>4}" for r in rows]
    lines.append(f"wrote {out} and {blob_path} ({md.coeff_bytes} B)")
    _emit(args, {"manifest": str(out), "weights": str(blob_path), "coeff_bytes": md.coeff_bytes,
                 "layers": rows}, "\n".join(lines))
    return 0


def cmd_run(args) -> int:
    cfg = _power_config(args)
    dev = _device(args, cfg)
    ids = _load_models(dev, args.model)
    fmap = load_input(args.input)
    output = Path(args.output)
    if args.ensemble:
        out = run_ensemble(dev, ids, fmap)
        write_fmap(output, out.decoded())
        _emit(args, {"ensemble": ids, "output": str(output), "shape": list(out.shape)},
              f"ensemble of {', '.join(ids)} -> {output} {out.shape}")
        return 0
    jobs = [InferenceJob(mid, fmap) for mid in ids]
    if len(jobs) == 1:
        jobs = [run_inference(dev, ids[0], fmap)]
    else:
        jobs = run_concurrent(dev, jobs)
    docs, texts, status = [], [], 0
    for job, path in zip(jobs, _output_paths(output, ids)):
        if job.status is not JobStatus.DONE:
            texts.append(f"[{job.model_id}] FAILED: {job.error}")
            docs.append({"model": job.model_id, "status": job.status.value, "error": job.error})
            status = 1
            continue
        write_fmap(path, job.output.decoded())
        report = _report(dev, job, args)
        docs.append({"model": job.model_id, "status": "done", "output": str(path),
                     "shape": list(job.output.shape), "report": report.to_dict()})
        texts.append(f"[{job.model_id}] -> {path} {job.output.shape}\n{report.format_table()}")
    _emit(args, {"jobs": docs}, "\n\n".join(texts))
    return status


def cmd_power(args) -> int:
    cfg = _power_config(args)
    temp = Temperature(args.temp)
    f, r = cfg.coeff_power_fraction, cfg.ivdd_ratio_mram_vs_sram
    denom = efficiency_denominator(f, r)
    eff = efficiency(cfg.base_efficiency_tops_w, f, r)
    ratio = cfg.mram_capacity / cfg.sram_capacity
    doc = {
        "preset": args.preset, "temperature": temp.value,
        "mram": {"dynamic_mw": cfg.dynamic_mw[(MemoryKind.MRAM, temp)],
                 "standby_mw": cfg.standby_mw[(MemoryKind.MRAM, temp)]},
        "sram": {"dynamic_mw": cfg.dynamic_mw[(MemoryKind.SRAM, temp)],
                 "standby_mw": cfg.standby_mw[(MemoryKind.SRAM, temp)]},
        "efficiency": {"base_tops_w": cfg.base_efficiency_tops_w, "coeff_fraction": f,
                       "rest_fraction": cfg.rest_power_fraction, "ivdd_ratio": r,
                       "denominator": denom, "tops_w": eff, "tops_w_1dp": round(eff, 1)},
        "capacity": {"mram_bytes": cfg.mram_capacity, "sram_bytes": cfg.sram_capacity,
                     "ratio": ratio},
        "vdd_volts": cfg.vdd_volts, "vdio_volts": cfg.vdio_volts,
    }
    human = "\n".join([
        f"preset {args.preset}, temperature {temp.value} (VDD {cfg.vdd_volts} V, VDIO {cfg.vdio_volts} V)",
        f"{'':6}{'dynamic':>10}{'standby':>10}   [mW]",
        f"{'MRAM':6}{doc['mram']['dynamic_mw']:>10g}{doc['mram']['standby_mw']:>10g}",
        f"{'SRAM':6}{doc['sram']['dynamic_mw']:>10g}{doc['sram']['standby_mw']:>10g}",
        f"efficiency = {cfg.base_efficiency_tops_w:g} / [{cfg.rest_power_fraction:g} + "
        f"{f:g} * {r:g}] = {cfg.base_efficiency_tops_w:g} / {denom:g} = {eff:.4f} "
        f"-> {eff:.1f} TOPS/W",
        f"capacity: MRAM {cfg.mram_capacity / 2**20:g} MiB, SRAM {cfg.sram_capacity / 2**20:g} MiB "
        f"({ratio:.2f}x)",
    ])
    _emit(args, doc, human)
    return 0


def cmd_bench(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be at least 1 (nothing to measure)")
    cfg = _power_config(args)
    dev = _device(args, cfg)
    if args.model:
        ids = _load_models(dev, args.model[:1])
    else:
        from .demo import demo_device_model

        md, blob = demo_device_model()
        load_model(dev, md, blob)
        ids = [md.id]
    md = dev.resident_models[ids[0]]
    c = md.layers[0].in_channels
    job = None
    for frame in range(args.frames):
        rng = np.random.default_rng(frame)
        values = rng.random((c, args.height, args.width))
        job = run_inference(dev, ids[0], FeatureMap(encode(values, DSFP9, 15), 15))
    cycles = args.cycles_override or job.cycles
    report = _report(dev, job, args, cycles)
    doc = {"model": ids[0], "frames": args.frames, "input_shape": [c, args.height, args.width],
           "cycles_per_frame": cycles, "fps": report.fps, "macs_per_frame": job.macs,
           "effective_tops_w": report.effective_tops_w,
           "config": {"preset": args.preset, "memory": args.memory, "temp": args.temp,
                      "clock_hz": cfg.clock_hz, "grid_m": args.grid_m, "tile_p": args.tile_p,
                      "cycles_override": args.cycles_override,
                      "cycle_model": asdict(dev.cycle_model)},
           "report": report.to_dict()}
    human = "\n".join([
        f"model {ids[0]}, {args.frames} frame(s) of {c}x{args.height}x{args.width}",
        f"cycles/frame  {cycles:,}" + (" (override)" if args.cycles_override else ""),
        f"fps           {report.fps:.1f} at {cfg.clock_hz / 1e6:g} MHz",
        f"MACs/frame    {job.macs:,}",
        f"TOPS/W        {report.effective_tops_w:.1f} ({args.memory})",
        f"grid          {args.grid_m}x{args.grid_m} engines, {args.tile_p}x{args.tile_p} tiles",
    ])
    _emit(args, doc, human)
    return 0


def cmd_demo(args) -> int:
    from .demo import write_demo

    paths = write_demo(Path(args.outdir))
    _emit(args, {"files": [str(p) for p in paths]}, "\n".join(f"wrote {p}" for p in paths))
    return 0


# ------------------------------------------------------------------ parser


def _positive_float(text):
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return val


def _positive_int(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpim", description="MRAM processing-in-memory CNN accelerator simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("human", "json"), default="human")
    common.add_argument("--preset", default=DEFAULT_PRESET)
    common.add_argument("--power-config", help="JSON file overriding preset fields")

    device = argparse.ArgumentParser(add_help=False)
    device.add_argument("--memory", choices=("mram", "sram"), default="mram")
    device.add_argument("--temp", choices=("room", "high"), default="room")
    device.add_argument("--clock-hz", type=_positive_float)
    device.add_argument("--grid-m", type=_positive_int, default=14)
    device.add_argument("--tile-p", type=_positive_int, default=14)

    p = sub.add_parser("quantize", parents=[common], help="float model -> device model")
    p.add_argument("model", help="float model manifest")
    p.add_argument("-o", "--output", required=True, help="device manifest to write")
    p.add_argument("--calibrate", help="sample input for activation exponent biases")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("run", parents=[common, device], help="run inference on a fresh device")
    p.add_argument("-m", "--model", action="append", required=True, help="device manifest (repeatable)")
    p.add_argument("--input", required=True, help="P6 PPM or FMAP file")
    p.add_argument("--output", required=True, help="FMAP file to write")
    p.add_argument("--ensemble", action="store_true", help="average all models into one output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("power", parents=[common], help="print calibrated power constants")
    p.add_argument("--temp", choices=("room", "high"), default="room")
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("bench", parents=[common, device], help="synthetic-frame throughput")
    p.add_argument("-m", "--model", action="append", help="device manifest (default: bundled demo)")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--height", type=_positive_int, default=224)
    p.add_argument("--width", type=_positive_int, default=224)
    p.add_argument("--cycles-override", type=_positive_int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("demo", parents=[common], help="write the bundled demo model files")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ManifestError, PowerConfigError, ShapeError,
            json.JSONDecodeError) as exc:
        print(f"mpim {args.command}: {exc}", file=sys.stderr)
        return 2
    except (SchedulerError, AllocationError) as exc:
        print(f"mpim {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
