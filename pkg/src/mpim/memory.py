"""Two-tier device memory: persistent MRAM and volatile SRAM.

MRAM holds model coefficients, several models side by side, and keeps its
contents across :meth:`DeviceMemory.power_cycle`.  SRAM holds activations and
is cleared by a power cycle.  Every counted access updates per-kind
:class:`AccessCounters`, which feed the power report.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

MiB = 1 << 20

DEFAULT_MRAM_CAPACITY = 40 * MiB
DEFAULT_SRAM_CAPACITY = 9 * MiB

SNAPSHOT_MAGIC = b"MPIM"
SNAPSHOT_VERSION = 1


class MemoryKind(enum.Enum):
    MRAM = "mram"
    SRAM = "sram"

    @property
    def persistent(self) -> bool:
        return self is MemoryKind.MRAM


class AllocationError(Exception):
    """No region of the requested size could be placed."""

    def __init__(self, kind: MemoryKind, requested: int, available: int, message: str):
        super().__init__(f"{kind.name}: {message} (requested {requested} B, available {available} B)")
        self.kind = kind
        self.requested = requested
        self.available = available


class CapacityError(AllocationError):
    """Total free space is smaller than the request."""


class FragmentationError(AllocationError):
    """Enough free space in total, but no single hole is large enough."""


class BoundsError(IndexError):
    pass


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryRegion:
    kind: MemoryKind
    offset: int
    length: int
    owner: str

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class AccessCounters:
    reads: int = 0
    writes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0

    def as_dict(self) -> dict:
        return {"reads": self.reads, "writes": self.writes,
                "bytes_read": self.bytes_read, "bytes_written": self.bytes_written}


@dataclass
class DeviceMemory:
    mram_capacity: int = DEFAULT_MRAM_CAPACITY
    sram_capacity: int = DEFAULT_SRAM_CAPACITY
    _stores: dict = field(init=False, repr=False)
    _regions: dict = field(init=False, repr=False)
    counters: dict = field(init=False)

    def __post_init__(self):
        for cap in (self.mram_capacity, self.sram_capacity):
            if cap <= 0:
                raise ValueError("memory capacity must be positive")
        self._stores = {MemoryKind.MRAM: bytearray(self.mram_capacity),
                        MemoryKind.SRAM: bytearray(self.sram_capacity)}
        self._regions = {MemoryKind.MRAM: [], MemoryKind.SRAM: []}
        self.counters = {k: AccessCounters() for k in MemoryKind}
        self._lock = threading.Lock()

    def capacity(self, kind: MemoryKind) -> int:
        return self.mram_capacity if kind is MemoryKind.MRAM else self.sram_capacity

    def regions(self, kind: MemoryKind) -> list[MemoryRegion]:
        return list(self._regions[kind])

    def used_bytes(self, kind: MemoryKind) -> int:
        return sum(r.length for r in self._regions[kind])

    def free_bytes(self, kind: MemoryKind) -> int:
        return self.capacity(kind) - self.used_bytes(kind)

    def _holes(self, kind: MemoryKind):
        cursor = 0
        for r in self._regions[kind]:
            if r.offset > cursor:
                yield cursor, r.offset - cursor
            cursor = r.end
        cap = self.capacity(kind)
        if cursor < cap:
            yield cursor, cap - cursor

    def largest_hole(self, kind: MemoryKind) -> int:
        return max((size for _, size in self._holes(kind)), default=0)

    def allocate(self, kind: MemoryKind, length: int, owner: str) -> MemoryRegion:
        """Place a region at the lowest-addressed hole that fits (first fit)."""
        if length <= 0:
            raise ValueError(f"allocation length must be positive, got {length}")
        with self._lock:
            for offset, size in self._holes(kind):
                if size >= length:
                    region = MemoryRegion(kind, offset, length, owner)
                    self._regions[kind].append(region)
                    self._regions[kind].sort(key=lambda r: r.offset)
                    return region
            free = self.free_bytes(kind)
            if free >= length:
                raise FragmentationError(kind, length, self.largest_hole(kind),
                                         "no contiguous hole large enough")
            raise CapacityError(kind, length, free, "capacity exceeded")

    def free(self, region: MemoryRegion) -> None:
        with self._lock:
            self._require_live(region)
            self._regions[region.kind].remove(region)

    def find(self, owner: str, kind: MemoryKind | None = None) -> list[MemoryRegion]:
        kinds = [kind] if kind is not None else list(MemoryKind)
        return [r for k in kinds for r in self._regions[k] if r.owner == owner]

    def _require_live(self, region: MemoryRegion):
        if region not in self._regions[region.kind]:
            raise BoundsError(f"region {region} is not allocated")

    def _check_bounds(self, region: MemoryRegion, offset: int, length: int):
        self._require_live(region)
        if offset < 0 or length < 0 or offset + length > region.length:
            raise BoundsError(f"access [{offset}, {offset + length}) outside region "
                              f"of {region.length} B owned by {region.owner!r}")

    def write(self, region: MemoryRegion, offset: int, data: bytes) -> None:
        data = bytes(data)
        with self._lock:
            self._check_bounds(region, offset, len(data))
            start = region.offset + offset
            self._stores[region.kind][start:start + len(data)] = data
            c = self.counters[region.kind]
            c.writes += 1
            c.bytes_written += len(data)

    def read(self, region: MemoryRegion, offset: int, length: int) -> bytes:
        with self._lock:
            self._check_bounds(region, offset, length)
            start = region.offset + offset
            data = bytes(self._stores[region.kind][start:start + length])
            c = self.counters[region.kind]
            c.reads += 1
            c.bytes_read += length
            return data

    def peek(self, kind: MemoryKind, offset: int, length: int) -> bytes:
        """Raw, uncounted view of the backing store (diagnostics only)."""
        if offset < 0 or length < 0 or offset + length > self.capacity(kind):
            raise BoundsError("peek outside backing store")
        return bytes(self._stores[kind][offset:offset + length])

    def power_cycle(self) -> "DeviceMemory":
        """Remove and restore power.

        MRAM contents and its region table survive.  SRAM is zeroed and its
        regions released.  Session counters restart from zero.
        """
        with self._lock:
            self._stores[MemoryKind.SRAM] = bytearray(self.sram_capacity)
            self._regions[MemoryKind.SRAM] = []
            self.counters = {k: AccessCounters() for k in MemoryKind}
        return self

    def save_snapshot(self, path) -> None:
        """Write the MRAM region table and raw MRAM image to ``path``."""
        regions = self._regions[MemoryKind.MRAM]
        parts = [SNAPSHOT_MAGIC, struct.pack("<HH", SNAPSHOT_VERSION, len(regions))]
        kind_ids = {k: i for i, k in enumerate(MemoryKind)}
        for r in regions:
            owner = r.owner.encode("utf-8")
            parts.append(struct.pack("<BH", kind_ids[r.kind], len(owner)))
            parts.append(owner)
            parts.append(struct.pack("<QQ", r.offset, r.length))
        parts.append(bytes(self._stores[MemoryKind.MRAM]))
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load_snapshot(cls, path, sram_capacity: int = DEFAULT_SRAM_CAPACITY) -> "DeviceMemory":
        """Rebuild a device whose MRAM matches a snapshot; SRAM starts empty."""
        buf = Path(path).read_bytes()
        if buf[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError("bad snapshot magic")
        try:
            version, count = struct.unpack_from("<HH", buf, 4)
            if version != SNAPSHOT_VERSION:
                raise SnapshotError(f"unsupported snapshot version {version}")
            pos = 8
            kinds = list(MemoryKind)
            entries = []
            for _ in range(count):
                kind_id, n = struct.unpack_from("<BH", buf, pos)
                pos += 3
                owner = buf[pos:pos + n].decode("utf-8")
                pos += n
                offset, length = struct.unpack_from("<QQ", buf, pos)
                pos += 16
                entries.append(MemoryRegion(kinds[kind_id], offset, length, owner))
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise SnapshotError(f"truncated or corrupt snapshot header: {exc}") from exc
        image = buf[pos:]
        mem = cls(mram_capacity=len(image), sram_capacity=sram_capacity)
        mem._stores[MemoryKind.MRAM][:] = image
        for r in sorted(entries, key=lambda r: r.offset):
            if r.kind is not MemoryKind.MRAM or r.end > len(image):
                raise SnapshotError(f"invalid region in snapshot: {r}")
            prev = mem._regions[MemoryKind.MRAM][-1:]
            if prev and prev[0].end > r.offset:
                raise SnapshotError(f"overlapping regions in snapshot: {prev[0]} / {r}")
            mem._regions[MemoryKind.MRAM].append(r)
        return mem
