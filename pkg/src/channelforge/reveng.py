"""Timing-based recovery of the hidden VRAM channel mapping.

The probing side never looks at the device's ground truth; everything
is inferred from access latencies:

1. bank-conflict probing groups addresses that share a DRAM bank (and
   therefore a channel),
2. cache-conflict probing merges bank groups that share an L2 slice
   and yields one eviction set per channel,
3. prime-and-probe marking labels arbitrary addresses with the channel
   whose eviction set knocks them out of L2,
4. a cracker generalises the labeled samples into a total predictor:
   GF(2) elimination for XOR hashes, period detection for tiled
   permutation layouts, or an MLP approximator as the fallback.

Channel identities recovered this way are only defined up to
relabeling: timing cannot reveal which numeric id the hardware uses
internally.  :func:`alignment_map` resolves the label frame against a
ground-truth oracle for validation and reporting.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field

from . import mlp as _mlp
from .gpu_model import MemoryDevice, MappingKind
from .mlp import MlpApproximator, TrainingDivergedError

__all__ = [
    "AmbiguousProbeError",
    "XorLinearityError",
    "AperiodicError",
    "TrainingDivergedError",
    "ConflictSets",
    "ChannelLabeling",
    "XorHash",
    "PeriodTable",
    "MlpApproximator",
    "RevengResult",
    "find_dram_bank_conflicts",
    "find_cacheline_conflicts",
    "mark_channel",
    "crack_xor",
    "learn_period_table",
    "train_mlp",
    "predict_channel",
    "reverse_engineer",
    "alignment_map",
    "model_to_json",
    "model_from_json",
]


class AmbiguousProbeError(RuntimeError):
    """Zero or several channels exceeded the miss threshold."""


class XorLinearityError(ValueError):
    """The sampled mapping cannot be expressed as XORs of address bits."""

    def __init__(self, detail: str = ""):
        msg = "mapping not XOR-linear"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class AperiodicError(ValueError):
    """No period up to the configured cap fits the samples."""

    def __init__(self, cap: int):
        super().__init__(f"aperiodic within cap of {cap} bytes")
        self.cap = cap


@dataclass
class ConflictSets:
    """Probe output of steps 1 and 2, keyed by the seed address."""

    seed: int
    dram_conflicts: list[int]
    cache_conflicts: list[int]


@dataclass
class ChannelLabeling:
    """Labeled (address, channel) samples plus their coverage region."""

    samples: list[tuple[int, int]]
    num_channels: int
    granularity: int
    base: int = 0
    extent: int = 0

    def __post_init__(self):
        g = self.granularity
        for a, c in self.samples:
            if a % g:
                raise ValueError(f"sample address {a:#x} not aligned to {g}")
            if not 0 <= c < self.num_channels:
                raise ValueError(f"channel id {c} out of range")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["addr_hex", "channel_id"])
            for a, c in self.samples:
                w.writerow([f"0x{a:x}", c])

    @classmethod
    def from_csv(cls, path, num_channels: int, granularity: int) -> "ChannelLabeling":
        samples = []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[:2] != ["addr_hex", "channel_id"]:
                raise ValueError("unexpected labeling CSV header")
            for row in r:
                samples.append((int(row[0], 16), int(row[1])))
        base = min(a for a, _ in samples) if samples else 0
        extent = max(a for a, _ in samples) - base + granularity if samples else 0
        return cls(samples, num_channels, granularity, base, extent)


# ---------------------------------------------------------------------------
# probing primitives


def _conflict_cut(dev: MemoryDevice) -> float:
    lat = dev.spec.latency_model
    return lat.l2_miss + lat.bank_conflict_penalty / 2


def find_dram_bank_conflicts(dev: MemoryDevice, seed: int, candidate_pool) -> list[int]:
    """Addresses from the pool that bank-conflict with ``seed``.

    Each candidate is probed back to back with the seed after a flush;
    the extra bank penalty on the second access marks a conflict.  An
    empty pool yields an empty list.
    """
    cut = _conflict_cut(dev)
    ta = dev.timed_access
    fl = dev.flush
    out = []
    for c in candidate_pool:
        if c == seed:
            continue
        fl()
        ta(seed)
        if ta(c) > cut:
            out.append(c)
    return out


def find_cacheline_conflicts(dev: MemoryDevice, dram_conflicts, candidate_pool) -> list[int]:
    """Pool addresses that L2-conflict with the bank-conflict group.

    A candidate is read, the conflict group (plus previously confirmed
    candidates) is swept, and the candidate is re-read; eviction means
    it shares a cache set, and hence the channel, with the group.  The
    group must already hold enough members per set to evict, which the
    bank-probing stage guarantees when its pool is dense enough.
    """
    group = list(dram_conflicts)
    if not group:
        raise ValueError("need bank-conflict seeds first")
    known = set(group)
    thresh = dev.spec.latency_model.miss_threshold
    out = []
    for c in candidate_pool:
        if c in known:
            continue
        dev.flush()
        dev.timed_access(c)
        dev.access_sweep(group)
        dev.access_sweep(out)
        if dev.timed_access(c) > thresh:
            out.append(c)
            known.add(c)
    return out


def mark_channel(dev: MemoryDevice, probe_sets, addr: int, votes: int = 3) -> int:
    """Identify ``addr``'s channel by prime-and-probe over eviction sets.

    For each channel: read ``addr``, sweep that channel's eviction set,
    re-read ``addr`` and time it.  Only the owning channel's sweep can
    evict the line.  ``votes`` repeats the measurement and takes the
    majority, mirroring how a noisy platform would be probed; the
    simulator itself is deterministic.

    Raises :class:`AmbiguousProbeError` when zero or several channels
    exceed the threshold, which signals an incomplete eviction set.
    """
    thresh = dev.spec.latency_model.miss_threshold
    hits = []
    for ch_id, probe in enumerate(probe_sets):
        n_hit = 0
        for _ in range(votes):
            dev.flush()
            dev.timed_access(addr)
            dev.access_sweep(probe, skip=addr)
            if dev.timed_access(addr) > thresh:
                n_hit += 1
        if 2 * n_hit > votes:
            hits.append(ch_id)
    if len(hits) != 1:
        raise AmbiguousProbeError(
            f"ambiguous probe for {addr:#x}: channels {hits} exceeded threshold"
        )
    return hits[0]


# ---------------------------------------------------------------------------
# crackers


_AUG_SHIFT = 48  # rhs bit position in augmented GF(2) rows; above any address bit


class XorHash:
    """One XOR mask per channel-id output bit."""

    kind = "xor_hash"

    def __init__(self, masks: list[int]):
        self.masks = list(masks)

    def predict(self, addr: int) -> int:
        ch = 0
        for bit, mask in enumerate(self.masks):
            ch |= ((addr & mask).bit_count() & 1) << bit
        return ch

    def to_json(self) -> dict:
        return {"kind": self.kind, "version": 1, "masks": [f"0x{m:x}" for m in self.masks]}

    @classmethod
    def from_json(cls, d: dict) -> "XorHash":
        return cls([int(m, 16) for m in d["masks"]])


def _solve_gf2(rows):
    """Solve for a mask m with parity(addr & m) = rhs on every row.

    ``rows`` are ints: address bits below ``_AUG_SHIFT``, rhs at
    ``_AUG_SHIFT``.  Returns (mask, pivot_bits); raises
    :class:`XorLinearityError` on an inconsistent system.  Free
    variables are set to zero.
    """
    addr_mask = (1 << _AUG_SHIFT) - 1
    aug = 1 << _AUG_SHIFT
    piv = {}
    for row in rows:
        while True:
            coeff = row & addr_mask
            if not coeff:
                if row:
                    raise XorLinearityError("inconsistent XOR system")
                break
            h = coeff.bit_length() - 1
            if h in piv:
                row ^= piv[h]
            else:
                piv[h] = row
                break
    # Gauss-Jordan pass so every pivot row mentions only free bits
    for p in sorted(piv, reverse=True):
        r = piv[p]
        for p2 in piv:
            if p2 != p and (piv[p2] >> p) & 1:
                piv[p2] ^= r
    mask = 0
    for p, r in piv.items():
        if r & aug:
            mask |= 1 << p
    return mask, set(piv)


def crack_xor(labels: ChannelLabeling, addr_bits: int) -> XorHash:
    """Recover an XOR hash from labeled samples by GF(2) elimination.

    Fails with :class:`XorLinearityError` when the channel count is not
    a power of two or the equation system is contradictory, which is
    exactly what happens on permutation-tiled layouts.
    """
    c = labels.num_channels
    if c < 2 or c & (c - 1):
        raise XorLinearityError(f"{c} channels cannot come from a pure XOR hash")
    ch_bits = c.bit_length() - 1
    addr_cap = (1 << addr_bits) - 1
    masks = []
    for bit in range(ch_bits):
        rows = [
            (a & addr_cap) | (((ch >> bit) & 1) << _AUG_SHIFT)
            for a, ch in labels.samples
        ]
        mask, _ = _solve_gf2(rows)
        masks.append(mask)
    hash_ = XorHash(masks)
    for a, ch in labels.samples:
        if hash_.predict(a) != ch:
            raise XorLinearityError("solution does not reproduce the samples")
    return hash_


def _free_bits(labels: ChannelLabeling, addr_bits: int) -> list[int]:
    """Address bits in [granularity, addr_bits) with no pivot in the samples."""
    addr_cap = (1 << addr_bits) - 1
    rows = [a & addr_cap for a, _ in labels.samples]
    piv = {}
    for row in rows:
        while row:
            h = row.bit_length() - 1
            if h in piv:
                row ^= piv[h]
            else:
                piv[h] = row
                break
    lo = labels.granularity.bit_length() - 1
    return [b for b in range(lo, addr_bits) if b not in piv]


class PeriodTable:
    """Exact predictor for a periodic channel layout."""

    kind = "period_table"

    def __init__(self, period: int, table: list[int], granularity: int):
        if period % granularity:
            raise ValueError("period must be a multiple of the granularity")
        if len(table) != period // granularity:
            raise ValueError("table length must equal period / granularity")
        self.period = period
        self.table = list(table)
        self.granularity = granularity

    def predict(self, addr: int) -> int:
        return self.table[(addr % self.period) // self.granularity]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "version": 1,
            "period": self.period,
            "granularity": self.granularity,
            "table": self.table,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PeriodTable":
        return cls(d["period"], d["table"], d["granularity"])


DEFAULT_PERIOD_CAP_FACTOR = 128


def learn_period_table(labels: ChannelLabeling, cap: int | None = None) -> PeriodTable:
    """Find the smallest period consistent with every sample.

    Candidates are multiples of ``num_channels * granularity`` up to
    ``cap``.  A candidate counts only when every residue class is
    covered by at least one sample and no class carries two labels.
    """
    g = labels.granularity
    step = labels.num_channels
    if cap is None:
        cap = DEFAULT_PERIOD_CAP_FACTOR * labels.num_channels * g
    cap_blocks = cap // g
    blocks = [(a // g, c) for a, c in labels.samples]
    for p in range(step, cap_blocks + 1, step):
        table = [-1] * p
        ok = True
        for b, c in blocks:
            r = b % p
            prev = table[r]
            if prev < 0:
                table[r] = c
            elif prev != c:
                ok = False
                break
        if ok and min(table) >= 0:
            return PeriodTable(p * g, table, g)
    raise AperiodicError(cap)


def train_mlp(
    labels: ChannelLabeling,
    *,
    hidden=(64,) * 7,
    epochs: int = 150,
    lr: float = 0.05,
    seed: int = 0,
    addr_bits: int | None = None,
    batch_size: int = 128,
    holdout_fraction: float = 0.2,
):
    """Train the MLP approximator; returns (model, held-out accuracy).

    Requires at least ``100 * num_channels`` samples with labels
    balanced within a factor of four.
    """
    n = len(labels.samples)
    if n < 100 * labels.num_channels:
        raise ValueError(
            f"need at least {100 * labels.num_channels} samples, got {n}"
        )
    counts = [0] * labels.num_channels
    for _, c in labels.samples:
        counts[c] += 1
    nonzero = [c for c in counts if c]
    if len(nonzero) != labels.num_channels or max(nonzero) > 4 * min(nonzero):
        raise ValueError("labels not balanced within a factor of 4")
    addrs = [a for a, _ in labels.samples]
    ys = [c for _, c in labels.samples]
    if addr_bits is None:
        addr_bits = max(addrs).bit_length()
    bit_lo = labels.granularity.bit_length() - 1
    return _mlp.train(
        addrs,
        ys,
        labels.num_channels,
        bit_lo=bit_lo,
        n_bits=addr_bits - bit_lo,
        hidden=hidden,
        epochs=epochs,
        lr=lr,
        seed=seed,
        batch_size=batch_size,
        holdout_fraction=holdout_fraction,
    )


def predict_channel(model, addr: int) -> int:
    """Uniform prediction entry point for any cracked model."""
    return model.predict(addr)


def model_to_json(model) -> dict:
    return model.to_json()


_MODEL_KINDS = None


def model_from_json(d: dict):
    global _MODEL_KINDS
    if _MODEL_KINDS is None:
        _MODEL_KINDS = {
            "xor_hash": XorHash.from_json,
            "period_table": PeriodTable.from_json,
            "mlp": MlpApproximator.from_json,
        }
    try:
        loader = _MODEL_KINDS[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown model kind {d.get('kind')!r}") from None
    return loader(d)


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class RevengResult:
    """Everything the pipeline recovered, in the discovered label frame."""

    channel_groups: list[list[int]]
    probe_sets: list[list[int]]
    labeling: ChannelLabeling
    model: object
    crack_mode: str
    probe_count: int
    marked: list[tuple[int, int]] = field(default_factory=list)


def _bank_partition(dev: MemoryDevice, pool):
    """Split the pool into same-(channel, bank) groups by conflict probing."""
    cut = _conflict_cut(dev)
    ta = dev.timed_access
    fl = dev.flush
    remaining = list(pool)
    groups = []
    while remaining:
        seed = remaining[0]
        mine = [seed]
        rest = []
        for c in remaining[1:]:
            fl()
            ta(seed)
            if ta(c) > cut:
                mine.append(c)
            else:
                rest.append(c)
        groups.append(mine)
        remaining = rest
    return groups


def _spread_reps(group, count):
    """Pick representatives spread across the group."""
    if len(group) <= count:
        return list(group)
    step = len(group) / count
    return [group[int(i * step)] for i in range(count)]


def _evicts(dev: MemoryDevice, sweep, addr) -> bool:
    dev.flush()
    dev.timed_access(addr)
    dev.access_sweep(sweep, skip=addr)
    return dev.timed_access(addr) > dev.spec.latency_model.miss_threshold


def _same_slice(dev: MemoryDevice, a, b, max_reps) -> bool:
    """Do two address groups share an L2 slice (hence a channel)?

    An eviction hit is conclusive: a sweep can only evict lines of its
    own channel.  A miss may just mean the probed set is thin on the
    sweeping side, so representatives are tried in both directions,
    with the denser group doing the sweeping first.
    """
    first, second = (a, b) if len(a) >= len(b) else (b, a)
    for rep in _spread_reps(second, max_reps):
        if _evicts(dev, first, rep):
            return True
    for rep in _spread_reps(first, max_reps):
        if _evicts(dev, second, rep):
            return True
    return False


def _merge_banks_into_channels(dev: MemoryDevice, bank_groups, max_reps=8):
    """Group bank groups that share an L2 slice into channel groups.

    One sweep of the incoming group suffices to test it against every
    channel found so far: representatives of all channels are primed
    into L2, the group is swept, and only representatives sharing the
    group's slice can have been evicted.  When nothing is evicted the
    slower bidirectional test double-checks before a new channel is
    declared, since the sweep may simply be thin in the probed sets.
    """
    thresh = dev.spec.latency_model.miss_threshold
    channels: list[list[int]] = []
    for g in bank_groups:
        hit = set()
        if channels:
            dev.flush()
            reps = []
            for ci, ch in enumerate(channels):
                for rep in _spread_reps(ch, max_reps):
                    reps.append((ci, rep))
                    dev.timed_access(rep)
            dev.access_sweep(g)
            for ci, rep in reps:
                if dev.timed_access(rep) > thresh:
                    hit.add(ci)
        if not hit:
            for ci, ch in enumerate(channels):
                if _same_slice(dev, ch, g, max_reps):
                    hit.add(ci)
                    break
        if len(hit) > 1:
            raise AmbiguousProbeError(
                f"group matched several channels {sorted(hit)}; probe sets degenerate"
            )
        if hit:
            channels[hit.pop()].extend(g)
        else:
            channels.append(list(g))
    return channels


def _default_window_blocks(dev: MemoryDevice) -> int:
    spec = dev.spec
    need = int(
        1.35
        * spec.num_channels
        * spec.num_banks_per_channel
        * spec.l2_sets_per_channel
        * (spec.l2_ways + 1)
    )
    if spec.mapping_kind is MappingKind.PERMUTATION_TABLE:
        need = max(need, 18 * spec.period_blocks)
    else:
        need = max(need, (1 << 23) // spec.interleave_granularity)
    return min(need, spec.blocks)


def reverse_engineer(
    dev: MemoryDevice,
    *,
    window_base: int = 0,
    window_blocks: int | None = None,
    crack: str = "auto",
    wide_marks: int = 16,
    votes: int = 1,
    seed: int = 0,
    period_cap: int | None = None,
    mlp_epochs: int = 150,
) -> RevengResult:
    """Run the full probing and cracking pipeline against a device.

    Only latencies are observed.  ``votes=1`` by default because the
    simulated device is noiseless; raise it to exercise the majority
    vote the way a real platform would need.

    Channel ids in the result are in discovery order (canonicalised by
    lowest member address); use :func:`alignment_map` to compare them
    against a ground truth.
    """
    spec = dev.spec
    gran = spec.interleave_granularity
    if window_blocks is None:
        window_blocks = _default_window_blocks(dev)
    if window_base % gran:
        raise ValueError("window base must be interleave-aligned")
    if window_base + window_blocks * gran > spec.vram_size:
        raise ValueError("probe window exceeds VRAM")
    start_accesses = dev.accesses
    pool = [window_base + i * gran for i in range(window_blocks)]

    bank_groups = _bank_partition(dev, pool)
    channel_groups = _merge_banks_into_channels(dev, bank_groups)
    if len(channel_groups) > spec.num_channels:
        # thin cache sets can hide a shared slice; retry stubborn pairs hard
        channel_groups = _merge_banks_into_channels(dev, channel_groups, max_reps=48)
    if len(channel_groups) != spec.num_channels:
        raise AmbiguousProbeError(
            f"recovered {len(channel_groups)} channel groups, expected "
            f"{spec.num_channels}; probe window too sparse"
        )
    channel_groups.sort(key=min)
    probe_sets = channel_groups

    samples = [(a, i) for i, grp in enumerate(channel_groups) for a in grp]
    rng = random.Random(seed)
    marked: list[tuple[int, int]] = []
    in_pool = set(pool)

    def mark_address(addr: int) -> int:
        ch = mark_channel(dev, probe_sets, addr, votes=votes)
        marked.append((addr, ch))
        return ch

    for _ in range(wide_marks):
        addr = rng.randrange(spec.blocks) * gran
        if addr in in_pool:
            continue
        samples.append((addr, mark_address(addr)))

    labeling = ChannelLabeling(
        samples,
        spec.num_channels,
        gran,
        base=window_base,
        extent=window_blocks * gran,
    )

    addr_bits = (spec.vram_size - 1).bit_length()
    model = None
    mode = crack
    if crack in ("auto", "xor"):
        try:
            model = crack_xor(labeling, addr_bits)
            mode = "xor"
            # pin any still-free mask bits with targeted address pairs
            for _ in range(4):
                free = _free_bits(labeling, addr_bits)
                if not free:
                    break
                for b in free:
                    a0 = rng.randrange(spec.blocks) * gran & ~(1 << b)
                    a1 = a0 | (1 << b)
                    if a1 >= spec.vram_size:
                        continue
                    for a in (a0, a1):
                        samples.append((a, mark_address(a)))
                labeling = ChannelLabeling(
                    samples, spec.num_channels, gran, window_base, window_blocks * gran
                )
                model = crack_xor(labeling, addr_bits)
        except XorLinearityError:
            if crack == "xor":
                raise
            model = None
    if model is None and crack in ("auto", "period"):
        model = learn_period_table(labeling, cap=period_cap)
        mode = "period"
    if model is None and crack == "mlp":
        model, _ = train_mlp(labeling, seed=seed, addr_bits=addr_bits, epochs=mlp_epochs)
        mode = "mlp"
    if model is None:
        raise ValueError(f"unknown crack mode {crack!r}")

    return RevengResult(
        channel_groups=channel_groups,
        probe_sets=probe_sets,
        labeling=labeling,
        model=model,
        crack_mode=mode,
        probe_count=dev.accesses - start_accesses,
        marked=marked,
    )


def alignment_map(result: RevengResult, truth) -> dict[int, int]:
    """Oracle-side bijection from discovered channel ids to true ids.

    Timing probes can only recover channels up to relabeling, so
    validation fixes the frame by asking the ground truth for one
    representative per discovered group and checking the rest agree.
    """
    mapping = {}
    used = set()
    for i, grp in enumerate(result.channel_groups):
        ids = {truth.channel_of(a) for a in grp}
        if len(ids) != 1:
            raise ValueError(f"discovered group {i} mixes true channels {sorted(ids)}")
        (true_id,) = ids
        if true_id in used:
            raise ValueError(f"true channel {true_id} claimed by two groups")
        used.add(true_id)
        mapping[i] = true_id
    return mapping
