"""Channel-aware page coloring over a reserved VRAM space.

A reserved, physically contiguous space is carved into pages at the
coloring granularity.  Each page is attributed to the channel a
predictor reports for its base address, and tensors get shadow page
tables that map logical page indices onto pages drawn only from their
bound channel subset.  A kernel indexing a tensor through its shadow
table therefore touches only the channels the tensor was bound to, up
to predictor mistakes, which are tolerated and only accounted for.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

from .gpu_model import GpuSpec, MappingKind, make_mapping


class ColoredAllocError(RuntimeError):
    """Not enough free pages of the requested colors.

    ``shortfall`` says how many pages were missing.
    """

    def __init__(self, needed: int, available: int):
        super().__init__(
            f"insufficient colored pages: need {needed}, have {available} "
            f"(short {needed - available})"
        )
        self.needed = needed
        self.available = available
        self.shortfall = needed - available


def choose_granularity(spec: GpuSpec, mapping=None) -> int:
    """Largest page size over which the channel never changes.

    Scans the layout for the longest aligned run of constant channel;
    pages that big always hold a single color, so shadow tables stay
    dense and cheap.  Presets with a published cap never exceed it.
    """
    if mapping is None:
        mapping = make_mapping(spec)
    gran = spec.interleave_granularity
    if spec.mapping_kind is MappingKind.LINEAR_XOR:
        low_bit = min(m & -m for m in mapping.masks).bit_length() - 1
        structural = max(1 << low_bit, gran)
    else:
        table = mapping.table
        g_blocks = 1
        while True:
            step = g_blocks * 2
            if len(table) % step:
                break
            if any(
                table[i] != table[i + j]
                for i in range(0, len(table), step)
                for j in range(1, step)
            ):
                break
            g_blocks = step
        structural = g_blocks * gran
    if spec.granularity_cap is not None:
        return min(structural, spec.granularity_cap)
    return structural


@dataclass(frozen=True)
class KernelProfile:
    """Per-kernel resource profile from offline benchmarking."""

    kernel_id: str
    isolated_runtime: float  # ns
    sm_demand: int
    dram_throughput: float  # percent of peak VRAM bandwidth
    tensor_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.dram_throughput <= 100:
            raise ValueError("dram_throughput must be within [0, 100]")
        if self.sm_demand < 1:
            raise ValueError("sm_demand must be >= 1")
        if self.isolated_runtime <= 0:
            raise ValueError("isolated runtime must be positive")


def classify_memory_bound(profile: KernelProfile, thres_dram: float) -> bool:
    """Strictly above the threshold counts as memory bound."""
    return profile.dram_throughput > thres_dram


@dataclass(frozen=True)
class ChannelBinding:
    """Disjoint channel partition between latency-sensitive and best-effort sides."""

    ls_channels: frozenset[int]
    be_channels: frozenset[int]
    ch_be: float

    def __post_init__(self):
        if self.ls_channels & self.be_channels:
            raise ValueError("channel sides overlap")
        if not self.ls_channels or not self.be_channels:
            raise ValueError("both channel sides must be nonempty")


def bind_channels(spec_or_count, ch_be: float) -> ChannelBinding:
    """Give the best-effort side ``round(ch_be * channels)`` lowest channel ids."""
    if not 0 < ch_be < 1:
        raise ValueError("ch_be must be strictly between 0 and 1")
    n = spec_or_count.num_channels if isinstance(spec_or_count, GpuSpec) else int(spec_or_count)
    n_be = int(ch_be * n + 0.5)
    if n_be == 0 or n_be == n:
        raise ValueError(
            f"ch_be={ch_be} leaves one side empty with {n} channels"
        )
    be = frozenset(range(n_be))
    ls = frozenset(range(n_be, n))
    return ChannelBinding(ls_channels=ls, be_channels=be, ch_be=ch_be)


@dataclass
class ShadowPageTable:
    """Flat logical-page-index to reserved-space-offset map for one tensor."""

    tensor_id: str
    granularity: int
    tensor_size: int
    entries: list[int]
    bound_channels: frozenset[int]

    def to_json(self) -> dict:
        return {
            "tensor_id": self.tensor_id,
            "granularity": self.granularity,
            "tensor_size": self.tensor_size,
            "entries": self.entries,
            "bound_channels": sorted(self.bound_channels),
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


def translate(spt: ShadowPageTable, logical_offset: int) -> int:
    """Reserved-space offset backing one logical byte offset."""
    if not 0 <= logical_offset < spt.tensor_size:
        raise IndexError(
            f"offset {logical_offset} outside tensor of {spt.tensor_size} bytes"
        )
    g = spt.granularity
    return spt.entries[logical_offset // g] + logical_offset % g


class ReservedSpace:
    """Contiguous physical span with page bookkeeping at one granularity.

    Allocation is lowest-offset-first among free pages whose predicted
    channel lies in the requested set.  Single-writer; shadow tables
    handed out are immutable and freely shared.
    """

    def __init__(self, base: int, size: int, granularity: int, predictor=None):
        if base % granularity or size % granularity:
            raise ValueError("base and size must be aligned to the granularity")
        self.base = base
        self.size = size
        self.granularity = granularity
        self.predictor = predictor
        self.num_pages = size // granularity
        self._page_channel = [0] * self.num_pages
        self._free_by_channel: dict[int, list[int]] = {}
        self._allocated: set[int] = set()
        if predictor is not None:
            for i in range(self.num_pages):
                ch = predictor.predict(base + i * granularity)
                self._page_channel[i] = ch
                self._free_by_channel.setdefault(ch, []).append(i)
            for h in self._free_by_channel.values():
                heapq.heapify(h)

    def free_pages(self, channels=None) -> int:
        if channels is None:
            return self.num_pages - len(self._allocated)
        return sum(
            1
            for ch in channels
            for i in self._free_by_channel.get(ch, [])
            if i not in self._allocated
        )

    def alloc_pages(self, count: int, channels) -> list[int]:
        picked: list[int] = []
        heads = []
        for ch in channels:
            h = self._free_by_channel.get(ch)
            if h:
                heads.append(h)
        while len(picked) < count:
            best = None
            for h in heads:
                while h and h[0] in self._allocated:
                    heapq.heappop(h)
                if h and (best is None or h[0] < best[0]):
                    best = h
            if best is None:
                for i in picked:
                    self._allocated.discard(i)
                    heapq.heappush(self._free_by_channel[self._page_channel[i]], i)
                raise ColoredAllocError(count, len(picked))
            i = heapq.heappop(best)
            self._allocated.add(i)
            picked.append(i)
        return picked

    def release(self, spt: ShadowPageTable) -> None:
        """Return exactly the pages of one shadow table."""
        g = self.granularity
        for off in spt.entries:
            i = off // g
            if i not in self._allocated:
                raise ValueError(f"page {i} was not allocated")
            self._allocated.discard(i)
            heapq.heappush(self._free_by_channel[self._page_channel[i]], i)


def alloc_colored(
    space: ReservedSpace,
    tensor_size: int,
    channels,
    granularity: int | None = None,
    tensor_id: str = "tensor",
) -> ShadowPageTable:
    """Carve a tensor out of pages predicted to lie in ``channels``."""
    if space.predictor is None:
        raise ValueError("reserved space has no channel predictor")
    if granularity is None:
        granularity = space.granularity
    if granularity != space.granularity:
        raise ValueError(
            f"space is managed at {space.granularity} bytes, not {granularity}"
        )
    channels = frozenset(channels)
    if tensor_size == 0:
        return ShadowPageTable(tensor_id, granularity, 0, [], channels)
    need = -(-tensor_size // granularity)
    pages = space.alloc_pages(need, sorted(channels))
    entries = [i * granularity for i in pages]
    return ShadowPageTable(tensor_id, granularity, tensor_size, entries, channels)


def spt_overhead_model(runtime: float, overhead_fraction: float) -> float:
    """Extra runtime charged for indexing through a shadow table."""
    if not 0 <= overhead_fraction <= 0.05:
        raise ValueError("overhead fraction must be within [0, 0.05]")
    return runtime * overhead_fraction


# measured slowdown of shadow-table indexing per GPU, as a fraction
DEFAULT_SPT_OVERHEAD = {
    "p40": 0.0099,
    "v100": 0.0050,
    "a2000": 0.0063,
    "a5500": 0.0082,
    "gtx1080": 0.0080,
}


def default_spt_overhead(preset_name: str) -> float:
    return DEFAULT_SPT_OVERHEAD.get(preset_name, 0.01)


def wrong_colored_fraction(spt: ShadowPageTable, space: ReservedSpace, truth, interleave: int) -> float:
    """Fraction of a tensor's interleave blocks outside its bound channels.

    Pure accounting: mispredicted pages stay usable, the isolation is
    just weaker for them.
    """
    if not spt.entries:
        return 0.0
    total = 0
    wrong = 0
    for off in spt.entries:
        addr = space.base + off
        for b in range(spt.granularity // interleave):
            total += 1
            if truth.channel_of(addr + b * interleave) not in spt.bound_channels:
                wrong += 1
    return wrong / total
