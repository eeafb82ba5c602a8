"""Inference workflow on one device.

1. coefficients are loaded into MRAM (once; they survive power cycles),
2. the input image is staged in SRAM,
3. layers run on the engine grid, activations round-tripping through SRAM,
4. the final feature map is read back for the host.

Several models can be resident at once.  :func:`run_concurrent` interleaves
jobs one layer at a time on the single grid; since every layer is
deterministic each job's output equals its solo run.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dsfp import DSFP9, encode
from .engine import EngineGrid, RingSchedule, run_conv_layer
from .memory import AllocationError, DeviceMemory, MemoryKind, MemoryRegion
from .model import FeatureMap, ModelDescriptor, ShapeError, trace_shapes
from .power import CycleModel, PowerConfig, PowerReport, build_report, layer_cycles, load_preset
from .power import Temperature


class SchedulerError(RuntimeError):
    pass


class JobStatus(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class InferenceJob:
    model_id: str
    input: FeatureMap
    status: JobStatus = JobStatus.PENDING
    output: Optional[FeatureMap] = None
    macs: int = 0
    cycles: int = 0
    error: Optional[str] = None


@dataclass
class DeviceState:
    memory: DeviceMemory = field(default_factory=DeviceMemory)
    grid: EngineGrid = field(default_factory=EngineGrid)
    power_cfg: PowerConfig = field(default_factory=load_preset)
    cycle_model: CycleModel = field(default_factory=CycleModel)
    schedule: RingSchedule = field(default_factory=RingSchedule)
    resident_models: dict = field(default_factory=dict)
    _job_ids: itertools.count = field(default_factory=itertools.count, repr=False)

    def power_cycle(self) -> "DeviceState":
        """Power off and on: resident models persist, activations do not."""
        self.memory.power_cycle()
        self.grid.clear()
        return self

    def report(self, job: InferenceJob, kind: MemoryKind = MemoryKind.MRAM,
               temp: Temperature = Temperature.ROOM) -> PowerReport:
        return build_report(self.memory.counters, job.macs, job.cycles, self.power_cfg, kind, temp)


def load_model(dev: DeviceState, md: ModelDescriptor, blob: bytes) -> ModelDescriptor:
    """Write a model's coefficients to a fresh MRAM region and mark it resident."""
    if md.id in dev.resident_models:
        raise SchedulerError(f"model {md.id!r} is already resident")
    if len(blob) != md.coeff_bytes:
        raise SchedulerError(f"model {md.id!r}: blob is {len(blob)} B, expected {md.coeff_bytes}")
    md.check()
    region = dev.memory.allocate(MemoryKind.MRAM, md.coeff_bytes, md.id)
    try:
        dev.memory.write(region, 0, blob)
    except Exception:
        dev.memory.free(region)
        raise
    resident = replace(md, region=region)
    dev.resident_models[md.id] = resident
    return resident


def unload_model(dev: DeviceState, model_id: str) -> None:
    md = dev.resident_models.pop(model_id)
    dev.memory.free(md.region)


def stage_input(dev: DeviceState, fmap: FeatureMap, owner: str = "input") -> MemoryRegion:
    """Copy a feature map into a new SRAM region."""
    region = dev.memory.allocate(MemoryKind.SRAM, fmap.nbytes, owner)
    dev.memory.write(region, 0, fmap.to_bytes())
    return region


def _resident(dev: DeviceState, model_id: str) -> ModelDescriptor:
    md = dev.resident_models.get(model_id)
    if md is None:
        raise SchedulerError(f"model {model_id!r} is not resident")
    if md.region not in dev.memory.regions(MemoryKind.MRAM) or md.region.owner != model_id:
        raise SchedulerError(f"model {model_id!r} has no live MRAM region")
    return md


def _peak_sram(md: ModelDescriptor, shape) -> int:
    """Largest input + output activation footprint over the layers, in bytes."""
    shapes = trace_shapes(md.layers, shape)
    return max(2 * (int(np.prod(a)) + int(np.prod(b))) for a, b in zip(shapes, shapes[1:]))


class _Runner:
    """Steps one job through its layers; each step is one layer."""

    def __init__(self, dev: DeviceState, job: InferenceJob):
        self.dev = dev
        self.job = job
        self.md = _resident(dev, job.model_id)
        self.shapes = trace_shapes(self.md.layers, job.input.shape)
        self.peak = _peak_sram(self.md, job.input.shape)
        self.tag = f"{job.model_id}#{next(dev._job_ids)}"
        self.layer = 0
        self.region = None
        self.bias = job.input.exp_bias

    @property
    def finished(self) -> bool:
        return self.job.status in (JobStatus.DONE, JobStatus.FAILED)

    def start(self) -> bool:
        try:
            self.region = stage_input(self.dev, self.job.input, f"{self.tag}/act0")
        except AllocationError:
            return False
        self.job.status = JobStatus.RUNNING
        return True

    def _read(self, shape) -> FeatureMap:
        raw = self.dev.memory.read(self.region, 0, self.region.length)
        return FeatureMap.from_bytes(raw, shape, self.bias)

    def step(self) -> bool:
        """Run the next layer; False if SRAM has no room for its output yet."""
        mem = self.dev.memory
        k = self.layer
        layer = self.md.layers[k]
        c, h, w = self.shapes[k + 1]
        try:
            out_region = mem.allocate(MemoryKind.SRAM, 2 * c * h * w, f"{self.tag}/act{k + 1}")
        except AllocationError:
            return False
        fmap = self._read(self.shapes[k])
        out = run_conv_layer(fmap, layer, self.dev.grid, mem, self.md.region, self.dev.schedule)
        mem.write(out_region, 0, out.to_bytes())
        mem.free(self.region)
        self.region, self.bias = out_region, out.exp_bias
        _, h_in, w_in = self.shapes[k]
        self.job.macs += layer.out_channels * layer.in_channels * 9 * h_in * w_in
        self.job.cycles += layer_cycles(layer, (h_in, w_in), self.dev.grid.m, self.dev.grid.p,
                                        self.dev.cycle_model)
        self.layer += 1
        if self.layer == len(self.md.layers):
            self.job.output = self._read(self.shapes[-1])
            mem.free(self.region)
            self.region = None
            self.job.cycles += self.dev.cycle_model.frame_overhead_cycles
            self.job.status = JobStatus.DONE
        return True

    def fail(self, message: str):
        if self.region is not None:
            self.dev.memory.free(self.region)
            self.region = None
        self.job.status = JobStatus.FAILED
        self.job.error = message


def run_inference(dev: DeviceState, model_id: str, input: FeatureMap) -> InferenceJob:
    job = InferenceJob(model_id, input)
    runner = _Runner(dev, job)
    if not runner.start():
        raise SchedulerError(f"input of {input.nbytes} B does not fit in SRAM")
    while not runner.finished:
        if not runner.step():
            runner.fail("SRAM overflow on intermediate activations")
            raise SchedulerError(f"model {model_id!r}: intermediate activation does not fit in SRAM")
    return job


def run_concurrent(dev: DeviceState, jobs) -> list:
    """Interleave jobs layer by layer, round robin, on the single grid.

    A job is admitted only while the summed peak SRAM need of running jobs
    fits, so admitted jobs can always finish; the rest wait their turn.  A
    job whose own peak exceeds SRAM fails.
    """
    jobs = list(jobs)
    runners = [_Runner(dev, job) for job in jobs]  # raises early for non-resident models
    available = dev.memory.free_bytes(MemoryKind.SRAM)
    for r in runners:
        if r.peak > available:
            r.fail(f"needs {r.peak} B of SRAM, {available} B available")
    queue = [r for r in runners if not r.finished]
    active: list = []
    while queue or active:
        committed = sum(r.peak for r in active)
        while queue and committed + queue[0].peak <= available:
            if not queue[0].start():
                break
            r = queue.pop(0)
            active.append(r)
            committed += r.peak
        if not active:
            queue.pop(0).fail("input does not fit in SRAM")
            continue
        progressed = False
        for r in list(active):
            progressed |= r.step()
            if r.finished:
                active.remove(r)
        if not progressed:
            # only fragmentation can stall admitted jobs; drop the youngest
            active.pop().fail("SRAM fragmentation")
    return jobs


def run_ensemble(dev: DeviceState, model_ids, input: FeatureMap) -> FeatureMap:
    """Mean of several models' outputs on one input, re-encoded to DSFP9.

    The output bias is the smallest of the members', so no member value
    saturates on the way back.
    """
    jobs = run_concurrent(dev, [InferenceJob(mid, input) for mid in model_ids])
    failed = [j for j in jobs if j.status is not JobStatus.DONE]
    if failed:
        raise SchedulerError(f"ensemble member {failed[0].model_id!r} failed: {failed[0].error}")
    shapes = {j.output.shape for j in jobs}
    if len(shapes) != 1:
        raise ShapeError(f"ensemble members disagree on output shape: {sorted(shapes)}")
    total = np.zeros(jobs[0].output.shape, dtype=np.float64)
    for j in jobs:
        total += j.output.decoded()
    bias = min(j.output.exp_bias for j in jobs)
    return FeatureMap(encode(total / len(jobs), DSFP9, bias), bias)
