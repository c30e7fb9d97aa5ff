"""Simulated GPU memory hierarchy.

The simulator models the pieces of a commodity GPU that matter for
channel-level isolation: VRAM split into interleaved channels, a
set-associative L2 slice per channel, DRAM banks behind each channel,
and a hidden address-to-channel hash.  The hash is the secret that the
probing code in :mod:`channelforge.reveng` tries to recover, so this
module keeps two faces: an opaque timed access interface (what an
attacker sees) and the ground-truth mapping (the test oracle).

Two hash families are supported.  ``LINEAR_XOR`` computes each channel
bit as an XOR over physical address bits, the layout older parts lines
up with.  ``PERMUTATION_TABLE`` tiles a fixed block of channel
permutations across VRAM, which is non-linear and defeats purely
algebraic cracking.
"""

from __future__ import annotations

import csv
import json
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum


INTERLEAVE_DEFAULT = 1024


class MappingKind(str, Enum):
    LINEAR_XOR = "linear_xor"
    PERMUTATION_TABLE = "permutation_table"


class AddressRangeError(ValueError):
    """Physical address outside the simulated VRAM."""


@dataclass(frozen=True)
class LatencyModel:
    """Latency constants of the timed memory device.

    Units are abstract ticks of the logical clock.  ``miss_threshold``
    is the classifier boundary the probing code uses: anything above it
    is treated as an L2 miss.  ``conflict_window`` bounds how long a
    DRAM bank access keeps penalising later accesses to the same bank.
    """

    l2_hit: int = 200
    l2_miss: int = 400
    bank_conflict_penalty: int = 100
    miss_threshold: int = 300
    conflict_window: int = 800

    def __post_init__(self):
        if not (0 < self.l2_hit < self.miss_threshold < self.l2_miss):
            raise ValueError(
                "need 0 < l2_hit < miss_threshold < l2_miss, got "
                f"{self.l2_hit}/{self.miss_threshold}/{self.l2_miss}"
            )
        if self.bank_conflict_penalty <= 0 or self.conflict_window <= 0:
            raise ValueError("penalty and conflict window must be positive")


def _is_pow2(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class GpuSpec:
    """Geometry of one simulated GPU."""

    name: str
    vram_size: int
    num_channels: int
    mapping_kind: MappingKind
    permutation_period: int
    interleave_granularity: int = INTERLEAVE_DEFAULT
    num_banks_per_channel: int = 2
    l2_sets_per_channel: int = 16
    l2_ways: int = 16
    l2_line: int = 128
    latency_model: LatencyModel = field(default_factory=LatencyModel)
    # knobs consumed by the mapping generator
    mapping_seed: int = 0
    num_permutations: int = 1
    run_length: int = 1
    granularity_cap: int | None = None
    total_sms: int = 0

    def __post_init__(self):
        if self.num_channels < 1 or self.num_banks_per_channel < 1:
            raise ValueError("channel and bank counts must be >= 1")
        if self.l2_sets_per_channel < 1 or self.l2_ways < 1:
            raise ValueError("L2 geometry counts must be >= 1")
        if not _is_pow2(self.interleave_granularity):
            raise ValueError("interleave granularity must be a power of two")
        if self.interleave_granularity < self.l2_line:
            raise ValueError("interleave granularity must be >= l2 line size")
        if self.mapping_kind is MappingKind.PERMUTATION_TABLE:
            if self.permutation_period <= 0 or self.vram_size % self.permutation_period:
                raise ValueError("vram_size must be a multiple of permutation_period")
        else:
            if not _is_pow2(self.vram_size):
                raise ValueError("vram_size must be a power of two for XOR mappings")
            if not _is_pow2(self.num_channels):
                raise ValueError("XOR mappings need a power-of-two channel count")

    @property
    def blocks(self) -> int:
        return self.vram_size // self.interleave_granularity

    @property
    def period_blocks(self) -> int:
        return self.permutation_period // self.interleave_granularity

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "vram_size": self.vram_size,
            "num_channels": self.num_channels,
            "mapping_kind": self.mapping_kind.value,
            "permutation_period": self.permutation_period,
            "interleave_granularity": self.interleave_granularity,
            "num_banks_per_channel": self.num_banks_per_channel,
            "l2_sets_per_channel": self.l2_sets_per_channel,
            "l2_ways": self.l2_ways,
            "l2_line": self.l2_line,
            "latency_model": {
                "l2_hit": self.latency_model.l2_hit,
                "l2_miss": self.latency_model.l2_miss,
                "bank_conflict_penalty": self.latency_model.bank_conflict_penalty,
                "miss_threshold": self.latency_model.miss_threshold,
                "conflict_window": self.latency_model.conflict_window,
            },
            "mapping_seed": self.mapping_seed,
            "num_permutations": self.num_permutations,
            "run_length": self.run_length,
            "granularity_cap": self.granularity_cap,
            "total_sms": self.total_sms,
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GpuSpec":
        lat = d.get("latency_model")
        return cls(
            name=d["name"],
            vram_size=d["vram_size"],
            num_channels=d["num_channels"],
            mapping_kind=MappingKind(d["mapping_kind"]),
            permutation_period=d["permutation_period"],
            interleave_granularity=d.get("interleave_granularity", INTERLEAVE_DEFAULT),
            num_banks_per_channel=d.get("num_banks_per_channel", 2),
            l2_sets_per_channel=d.get("l2_sets_per_channel", 16),
            l2_ways=d.get("l2_ways", 16),
            l2_line=d.get("l2_line", 128),
            latency_model=LatencyModel(**lat) if lat else LatencyModel(),
            mapping_seed=d.get("mapping_seed", 0),
            num_permutations=d.get("num_permutations", 1),
            run_length=d.get("run_length", 1),
            granularity_cap=d.get("granularity_cap"),
            total_sms=d.get("total_sms", 0),
        )


class GroundTruthMapping:
    """The hidden address-to-(channel, bank, set) functions.

    ``channel_of`` is constant within any aligned interleave block; for
    permutation layouts it is periodic with ``permutation_period`` and
    balanced inside one period.  Bank and L2-set indices are simple
    block-arithmetic partitions: the probing code only needs conflicts
    to be detectable, not a faithful reproduction of hardware hashes.
    """

    def __init__(self, spec: GpuSpec, *, table=None, masks=None, permutations=None):
        self.spec = spec
        self._gran_bits = spec.interleave_granularity.bit_length() - 1
        self.table: list[int] | None = None
        self.masks: list[int] | None = None
        self.permutations = permutations
        if spec.mapping_kind is MappingKind.PERMUTATION_TABLE:
            if table is None:
                raise ValueError("permutation mapping needs a table")
            if len(table) != spec.period_blocks:
                raise ValueError("table length must equal period blocks")
            self.table = list(table)
        else:
            if masks is None:
                raise ValueError("XOR mapping needs per-bit masks")
            self.masks = list(masks)

    def channel_of(self, addr: int) -> int:
        spec = self.spec
        if not 0 <= addr < spec.vram_size:
            raise AddressRangeError(f"address {addr:#x} outside VRAM of {spec.vram_size} bytes")
        block = addr >> self._gran_bits
        if self.table is not None:
            return self.table[block % len(self.table)]
        ch = 0
        for bit, mask in enumerate(self.masks):
            ch |= ((addr & mask).bit_count() & 1) << bit
        return ch

    def bank_of(self, addr: int) -> int:
        """Globally unique DRAM bank id; equal ids imply equal channels."""
        spec = self.spec
        block = addr >> self._gran_bits
        idx = (block // spec.num_channels) % spec.num_banks_per_channel
        return self.channel_of(addr) * spec.num_banks_per_channel + idx

    def l2_set_of(self, addr: int) -> int:
        """Cache set within the owning channel's L2 slice.

        The block index is XOR-folded the way hardware hashes set
        indices, which keeps set usage spread out even under strongly
        periodic channel layouts.
        """
        spec = self.spec
        if not 0 <= addr < spec.vram_size:
            raise AddressRangeError(f"address {addr:#x} outside VRAM of {spec.vram_size} bytes")
        b = addr >> self._gran_bits
        return (b ^ (b >> 4) ^ (b >> 8) ^ (b >> 12)) % spec.l2_sets_per_channel

    def export_period_csv(self, path) -> None:
        """Dump one permutation period as (block_index, channel_id) rows."""
        blocks = self.spec.period_blocks if self.table is not None else min(
            self.spec.blocks, 4096
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block_index", "channel_id"])
            for b in range(blocks):
                w.writerow([b, self.channel_of(b << self._gran_bits)])


def _gen_permutation_table(num_channels, num_perms, run_length, seed):
    """Tile ``num_perms`` distinct channel permutations into one period.

    Each permutation lays the channels out in runs of ``run_length``
    interleave blocks, so the channel stays constant for
    ``run_length * interleave`` bytes before switching.  Every channel
    appears exactly once per permutation, which keeps the period
    balanced.
    """
    rng = random.Random(seed)
    seen = set()
    perms = []
    base = list(range(num_channels))
    while len(perms) < num_perms:
        p = base[:]
        rng.shuffle(p)
        key = tuple(p)
        if key in seen:
            continue
        seen.add(key)
        perms.append(p)
    table = []
    for p in perms:
        for ch in p:
            table.extend([ch] * run_length)
    return perms, table


def _gen_xor_masks(num_channels, addr_bits, run_length, seed):
    """Draw one XOR mask per channel bit.

    The lowest usable bit is chosen so the channel stays constant over
    ``run_length`` interleave blocks.  Each mask gets a private pivot
    bit inside a low window so that any few-MiB probe window already
    sees all channels with full rank, plus random higher bits so masks
    are only fully recoverable from samples spread across VRAM.
    """
    rng = random.Random(seed)
    ch_bits = num_channels.bit_length() - 1
    low = 10 + (run_length.bit_length() - 1)  # bits below this stay inside a run
    pivot_lo, pivot_hi = 16, 23
    pivots = rng.sample(range(pivot_lo, pivot_hi), ch_bits)
    masks = []
    for i in range(ch_bits):
        mask = 1 << pivots[i]
        # one bit inside the run window keeps runs exactly run_length blocks
        if i == 0:
            mask |= 1 << low
        for bit in range(low, addr_bits):
            if pivot_lo <= bit < pivot_hi:
                continue
            if rng.random() < 0.4:
                mask |= 1 << bit
        masks.append(mask)
    return masks


_PRESET_TABLE = {
    # name: (channels, kind, num_perms, run_length, vram, granularity cap, SMs, seed)
    "gtx1080": (8, MappingKind.LINEAR_XOR, 0, 4, 1 << 30, None, 20, 0x1080),
    "v100": (32, MappingKind.LINEAR_XOR, 0, 8, 1 << 31, 4096, 80, 0x0100),
    "p40": (12, MappingKind.PERMUTATION_TABLE, 24, 4, None, 4096, 30, 0x0040),
    "a2000": (6, MappingKind.PERMUTATION_TABLE, 12, 2, None, 2048, 28, 0x2000),
    "a5500": (12, MappingKind.PERMUTATION_TABLE, 24, 2, None, 2048, 80, 0x5500),
}

PRESET_NAMES = tuple(_PRESET_TABLE) + ("custom",)


def make_preset(name: str, **overrides) -> GpuSpec:
    """Build one of the stock GPU geometries, or a custom one.

    VRAM sizes are desk-scale standins (a few GiB at most) so that
    lookup tables and probing stay fast; channel counts and layout
    structure follow the real parts.  ``custom`` requires explicit
    keyword arguments and accepts an explicit permutation list through
    :func:`make_mapping`.
    """
    if name == "custom":
        spec_args = {
            "name": "custom",
            "interleave_granularity": INTERLEAVE_DEFAULT,
            "mapping_kind": MappingKind.PERMUTATION_TABLE,
            "num_permutations": 1,
            "run_length": 1,
        }
        spec_args.update(overrides)
        if "num_channels" not in spec_args:
            raise ValueError("custom preset needs num_channels")
        ch = spec_args["num_channels"]
        gran = spec_args["interleave_granularity"]
        if spec_args["mapping_kind"] is MappingKind.PERMUTATION_TABLE:
            period = ch * gran * spec_args["num_permutations"] * spec_args["run_length"]
            spec_args.setdefault("permutation_period", period)
            spec_args.setdefault("vram_size", spec_args["permutation_period"] * 1024)
        else:
            spec_args.setdefault("vram_size", 1 << 30)
            spec_args.setdefault("permutation_period", spec_args["vram_size"])
        return GpuSpec(**spec_args)

    if name not in _PRESET_TABLE:
        raise ValueError(f"unknown GPU preset {name!r}; known: {', '.join(PRESET_NAMES)}")
    ch, kind, nperms, run, vram, cap, sms, seed = _PRESET_TABLE[name]
    gran = INTERLEAVE_DEFAULT
    if kind is MappingKind.PERMUTATION_TABLE:
        period = ch * gran * nperms * run
        vram = period * 2048
    else:
        period = vram  # refined after mask generation
    args = {
        "name": name,
        "vram_size": vram,
        "num_channels": ch,
        "mapping_kind": kind,
        "permutation_period": period,
        "num_permutations": nperms,
        "run_length": run,
        "granularity_cap": cap,
        "mapping_seed": seed,
        "total_sms": sms,
    }
    args.update(overrides)
    return GpuSpec(**args)


def make_mapping(spec: GpuSpec, *, permutations=None, masks=None) -> GroundTruthMapping:
    """Materialise the ground-truth mapping for ``spec``.

    Explicit ``permutations`` (list of channel orderings, expanded with
    the spec's run length) or ``masks`` override the seeded generator;
    tests use that to pin trivial layouts like the identity.
    """
    if spec.mapping_kind is MappingKind.PERMUTATION_TABLE:
        if permutations is not None:
            table = []
            for p in permutations:
                if sorted(p) != list(range(spec.num_channels)):
                    raise ValueError("each permutation must cover all channels once")
                for c in p:
                    table.extend([c] * spec.run_length)
            if len(table) != spec.period_blocks:
                raise ValueError("permutations do not fill the declared period")
            return GroundTruthMapping(spec, table=table, permutations=permutations)
        perms, table = _gen_permutation_table(
            spec.num_channels, spec.num_permutations, spec.run_length, spec.mapping_seed
        )
        return GroundTruthMapping(spec, table=table, permutations=perms)
    if masks is None:
        addr_bits = spec.vram_size.bit_length() - 1
        masks = _gen_xor_masks(spec.num_channels, addr_bits, spec.run_length, spec.mapping_seed)
    return GroundTruthMapping(spec, masks=masks)


def make_device(name_or_spec, **overrides) -> "MemoryDevice":
    """Convenience: preset name or spec straight to a live device."""
    spec = name_or_spec if isinstance(name_or_spec, GpuSpec) else make_preset(name_or_spec, **overrides)
    return MemoryDevice(spec, make_mapping(spec))


class MemoryDevice:
    """Stateful timed memory: per-channel L2 slices plus DRAM banks.

    Single-owner mutable state; probe one device from one thread at a
    time.  Specs and mappings are immutable and freely shared, and
    independent devices can run concurrently.

    The clock is a logical counter advanced by every access latency, so
    probe sequences are exactly reproducible.
    """

    __slots__ = (
        "spec", "truth", "_lat", "_sets", "_banks", "_touched_sets",
        "_touched_banks", "clock", "_use", "_gran_bits", "accesses",
    )

    def __init__(self, spec: GpuSpec, truth: GroundTruthMapping):
        if truth.spec is not spec and truth.spec != spec:
            raise ValueError("mapping built for a different spec")
        self.spec = spec
        self.truth = truth
        self._lat = spec.latency_model
        self._gran_bits = spec.interleave_granularity.bit_length() - 1
        # one dict per (channel, set): line id -> last-use stamp
        self._sets = [
            [dict() for _ in range(spec.l2_sets_per_channel)]
            for _ in range(spec.num_channels)
        ]
        # (channel, bank) -> deque of recent miss timestamps
        self._banks = {}
        self._touched_sets = []
        self._touched_banks = []
        self.clock = 0
        self._use = 0
        self.accesses = 0

    def timed_access(self, addr: int, kind: str = "read") -> int:
        """Access one address and return its latency in clock ticks."""
        spec = self.spec
        if not 0 <= addr < spec.vram_size:
            raise AddressRangeError(f"address {addr:#x} outside VRAM of {spec.vram_size} bytes")
        lat = self._lat
        block = addr >> self._gran_bits
        truth = self.truth
        if truth.table is not None:
            ch = truth.table[block % len(truth.table)]
        else:
            ch = 0
            for bit, mask in enumerate(truth.masks):
                ch |= ((addr & mask).bit_count() & 1) << bit
        setid = (block ^ (block >> 4) ^ (block >> 8) ^ (block >> 12)) % spec.l2_sets_per_channel
        line = addr // spec.l2_line
        lines = self._sets[ch][setid]
        self._use += 1
        self.accesses += 1
        if line in lines:
            lines[line] = self._use
            latency = lat.l2_hit
        else:
            bank = ch * spec.num_banks_per_channel + (block // spec.num_channels) % spec.num_banks_per_channel
            q = self._banks.get(bank)
            if q is None:
                q = deque()
                self._banks[bank] = q
            horizon = self.clock - lat.conflict_window
            while q and q[0] < horizon:
                q.popleft()
            latency = lat.l2_miss + lat.bank_conflict_penalty * len(q)
            if not q:
                self._touched_banks.append(q)
            q.append(self.clock)
            if not lines:
                self._touched_sets.append(lines)
            elif len(lines) >= spec.l2_ways:
                del lines[min(lines, key=lines.get)]
            lines[line] = self._use
        self.clock += latency
        return latency

    def access_sweep(self, addrs, skip: int | None = None) -> None:
        """Access every address in order, untimed from the caller's view.

        ``skip`` omits one address (an eviction probe must not touch the
        address under test).  The clock still advances per access.
        """
        ta = self.timed_access
        if skip is None:
            for a in addrs:
                ta(a)
        else:
            for a in addrs:
                if a != skip:
                    ta(a)

    def flush(self) -> None:
        """Empty all L2 sets and bank history; the clock is preserved."""
        for d in self._touched_sets:
            d.clear()
        for q in self._touched_banks:
            q.clear()
        self._touched_sets.clear()
        self._touched_banks.clear()
