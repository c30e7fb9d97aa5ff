"""Probing primitives, crackers, and the end-to-end recovery pipeline."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from channelforge.gpu_model import MemoryDevice, make_device, make_mapping, make_preset
from channelforge.reveng import (
    AmbiguousProbeError,
    AperiodicError,
    ChannelLabeling,
    PeriodTable,
    TrainingDivergedError,
    XorHash,
    XorLinearityError,
    alignment_map,
    crack_xor,
    find_cacheline_conflicts,
    find_dram_bank_conflicts,
    learn_period_table,
    mark_channel,
    model_from_json,
    model_to_json,
    predict_channel,
    reverse_engineer,
    train_mlp,
)


def identity_device(num_channels=4, banks=1):
    spec = make_preset("custom", num_channels=num_channels, num_banks_per_channel=banks)
    mapping = make_mapping(spec, permutations=[list(range(num_channels))])
    return MemoryDevice(spec, mapping)


def pool_of(spec, blocks, stride_blocks=1, base=0):
    gran = spec.interleave_granularity
    return [base + i * stride_blocks * gran for i in range(blocks)]


def oracle_probe_sets(dev, window_blocks):
    """Ground-truth per-channel eviction sets covering the probe window."""
    spec = dev.spec
    gran = spec.interleave_granularity
    sets = [[] for _ in range(spec.num_channels)]
    for b in range(window_blocks):
        addr = b * gran
        sets[dev.truth.channel_of(addr)].append(addr)
    return sets


# -- step 1: bank conflicts


def test_single_bank_device_everything_conflicts():
    dev = identity_device(num_channels=1, banks=1)
    pool = pool_of(dev.spec, 32)
    out = find_dram_bank_conflicts(dev, pool[0], pool)
    assert out == pool[1:]


def test_other_channel_addresses_never_conflict():
    dev = identity_device(num_channels=4, banks=1)
    seed = 0
    pool = [a for a in pool_of(dev.spec, 64) if dev.truth.channel_of(a) != 0]
    assert find_dram_bank_conflicts(dev, seed, pool) == []


def test_empty_pool_is_empty_result():
    dev = identity_device()
    assert find_dram_bank_conflicts(dev, 0, []) == []


def test_p40_bank_conflicts_match_oracle():
    dev = make_device("p40")
    spec = dev.spec
    pool = pool_of(spec, 512, stride_blocks=4)  # 4 KiB stride
    seed = pool[0]
    got = find_dram_bank_conflicts(dev, seed, pool)
    want = [a for a in pool if a != seed and dev.truth.bank_of(a) == dev.truth.bank_of(seed)]
    assert got == want


# -- step 1b: cache conflicts


def test_cacheline_conflicts_need_seeds():
    dev = identity_device()
    with pytest.raises(ValueError, match="bank-conflict seeds"):
        find_cacheline_conflicts(dev, [], [0])


def test_cacheline_conflicts_match_set_oracle():
    dev = identity_device(num_channels=2, banks=1)
    spec, truth = dev.spec, dev.truth
    window = 4 * spec.l2_sets_per_channel * (spec.l2_ways + 2)
    addrs = pool_of(spec, window)
    ch0 = [a for a in addrs if truth.channel_of(a) == 0]
    dram_conflicts = ch0[: len(ch0) // 2]
    seed_sets = {truth.l2_set_of(a) for a in dram_conflicts}
    pool = [
        a
        for a in addrs
        if truth.channel_of(a) == 0
        and truth.l2_set_of(a) in seed_sets
        and a not in dram_conflicts
    ]
    got = find_cacheline_conflicts(dev, dram_conflicts, pool)
    assert got == pool  # every same-(channel, set) address is detected


def test_cacheline_conflicts_other_channels_empty():
    dev = identity_device(num_channels=2, banks=1)
    truth = dev.truth
    addrs = pool_of(dev.spec, 512)
    ch0 = [a for a in addrs if truth.channel_of(a) == 0][:200]
    pool = [a for a in addrs if truth.channel_of(a) == 1]
    assert find_cacheline_conflicts(dev, ch0, pool) == []


def test_cacheline_conflicts_exclude_seed_members():
    dev = identity_device(num_channels=2, banks=1)
    truth = dev.truth
    addrs = pool_of(dev.spec, 600)
    ch0 = [a for a in addrs if truth.channel_of(a) == 0][:150]
    got = find_cacheline_conflicts(dev, ch0, ch0)
    assert got == []


# -- step 2: marking


def test_mark_channel_single_channel():
    dev = identity_device(num_channels=1)
    probe = oracle_probe_sets(dev, 600)
    assert mark_channel(dev, probe, 12_345) == 0


def test_mark_channel_agrees_with_oracle_on_a2000():
    dev = make_device("a2000")
    spec = dev.spec
    window = 40 * spec.period_blocks
    probe_sets = oracle_probe_sets(dev, window)
    rng = random.Random(2)
    for _ in range(300):
        addr = rng.randrange(spec.blocks) * spec.interleave_granularity
        got = mark_channel(dev, probe_sets, addr, votes=1)
        assert got == dev.truth.channel_of(addr)


def test_mark_channel_deterministic():
    dev = make_device("a2000")
    probe_sets = oracle_probe_sets(dev, 40 * dev.spec.period_blocks)
    addr = 123 * dev.spec.interleave_granularity
    assert mark_channel(dev, probe_sets, addr) == mark_channel(dev, probe_sets, addr)


def test_mark_channel_incomplete_probe_sets_raise():
    dev = identity_device(num_channels=4)
    # too few addresses per set to evict anything
    thin = [grp[:2] for grp in oracle_probe_sets(dev, 64)]
    with pytest.raises(AmbiguousProbeError):
        mark_channel(dev, thin, 8 * 1024)


def test_mark_channel_result_within_probe_range():
    dev = identity_device(num_channels=4)
    probe_sets = oracle_probe_sets(dev, 2048)
    ch = mark_channel(dev, probe_sets, 51200)
    assert 0 <= ch < len(probe_sets)


# -- cracker: GF(2)


def labeled_from_mapping(mapping, spec, n, seed=0, window_blocks=None):
    gran = spec.interleave_granularity
    blocks = window_blocks or spec.blocks
    rng = random.Random(seed)
    samples = []
    for _ in range(n):
        a = rng.randrange(blocks) * gran
        samples.append((a, mapping.channel_of(a)))
    return ChannelLabeling(samples, spec.num_channels, gran, 0, blocks * gran)


def test_crack_xor_single_bit_mask():
    spec = make_preset("custom", num_channels=2, mapping_kind="linear_xor",
                       vram_size=1 << 22, permutation_period=1 << 22)
    mapping = make_mapping(spec, masks=[1 << 10])
    labels = labeled_from_mapping(mapping, spec, 200, seed=1)
    hash_ = crack_xor(labels, 22)
    assert hash_.masks == [1 << 10]


def test_crack_xor_gtx1080_generalizes_exactly():
    spec = make_preset("gtx1080")
    mapping = make_mapping(spec)
    labels = labeled_from_mapping(mapping, spec, 600, seed=2)
    hash_ = crack_xor(labels, (spec.vram_size - 1).bit_length())
    rng = random.Random(3)
    for _ in range(100_000):
        a = rng.randrange(spec.blocks) * spec.interleave_granularity
        assert hash_.predict(a) == mapping.channel_of(a)


@pytest.mark.parametrize("name", ["p40", "a2000", "a5500"])
def test_crack_xor_fails_on_permutation_layouts(name):
    spec = make_preset(name)
    mapping = make_mapping(spec)
    labels = labeled_from_mapping(mapping, spec, 500, seed=4)
    with pytest.raises(XorLinearityError, match="XOR"):
        crack_xor(labels, (spec.vram_size - 1).bit_length())


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_crack_xor_round_trip_random_masks(data):
    addr_bits = 20
    ch_bits = data.draw(st.integers(1, 3))
    rng = random.Random(data.draw(st.integers(0, 10_000)))
    masks = [
        rng.randrange(1 << 10, 1 << addr_bits) & ~((1 << 10) - 1) | (1 << (10 + i))
        for i in range(ch_bits)
    ]
    truth = XorHash(masks)
    samples = []
    for _ in range(300):
        a = rng.randrange(1 << addr_bits) & ~1023
        samples.append((a, truth.predict(a)))
    labels = ChannelLabeling(samples, 1 << ch_bits, 1024, 0, 1 << addr_bits)
    cracked = crack_xor(labels, addr_bits)
    # agreement as functions over the whole space, not as identical masks
    for a in range(0, 1 << addr_bits, 4096):
        assert cracked.predict(a) == truth.predict(a)


# -- cracker: period table


def test_learn_period_identity_layout():
    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    samples = [(b * 1024, mapping.channel_of(b * 1024)) for b in range(64)]
    labels = ChannelLabeling(samples, 4, 1024, 0, 64 * 1024)
    table = learn_period_table(labels)
    assert table.period == 4096
    assert table.table == [0, 1, 2, 3]


def test_learn_period_p40_generalizes():
    spec = make_preset("p40")
    mapping = make_mapping(spec)
    gran = spec.interleave_granularity
    blocks = 3 * spec.period_blocks
    samples = [(b * gran, mapping.channel_of(b * gran)) for b in range(blocks)]
    labels = ChannelLabeling(samples, spec.num_channels, gran, 0, blocks * gran)
    table = learn_period_table(labels)
    assert table.period == spec.permutation_period
    rng = random.Random(6)
    for _ in range(100_000):
        a = rng.randrange(spec.blocks) * gran
        assert table.predict(a) == mapping.channel_of(a)


def test_learn_period_detects_corrupted_label():
    spec = make_preset("custom", num_channels=4, num_permutations=2, mapping_seed=9)
    mapping = make_mapping(spec)
    blocks = 8 * spec.period_blocks
    samples = [(b * 1024, mapping.channel_of(b * 1024)) for b in range(blocks)]
    addr, ch = samples[13]
    samples[13] = (addr, (ch + 1) % 4)
    labels = ChannelLabeling(samples, 4, 1024, 0, blocks * 1024)
    # any period fully covered by the samples is inconsistent now; a cap
    # below the coverage extent turns that into a hard failure
    with pytest.raises(AperiodicError, match="aperiodic within cap"):
        learn_period_table(labels, cap=(blocks // 2) * 1024)


def test_learn_period_respects_cap():
    spec = make_preset("p40")
    mapping = make_mapping(spec)
    gran = spec.interleave_granularity
    blocks = 2 * spec.period_blocks
    samples = [(b * gran, mapping.channel_of(b * gran)) for b in range(blocks)]
    labels = ChannelLabeling(samples, spec.num_channels, gran, 0, blocks * gran)
    with pytest.raises(AperiodicError):
        learn_period_table(labels, cap=spec.permutation_period // 2)


# -- cracker: MLP


def test_mlp_identity_layout_is_exact():
    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    labels = labeled_from_mapping(mapping, spec, 1000, seed=8, window_blocks=256)
    model, acc = train_mlp(labels, hidden=(32, 32), epochs=60, seed=0, addr_bits=20)
    assert acc == 1.0


def test_mlp_gradient_matches_finite_differences():
    import numpy as np

    from channelforge import mlp as m

    rng = np.random.default_rng(0)
    x = rng.random((8, 6)).astype(np.float64)
    y_idx = rng.integers(0, 3, 8)
    y = np.eye(3)[y_idx]
    sizes = [6, 5, 3]
    weights, biases = m._init_layers(sizes, rng, np.float64)
    gw, gb = m.backprop(x, y, weights, biases)

    def loss():
        _, probs = m._forward_cached(x, weights, biases)
        return -np.log(probs[np.arange(8), y_idx]).mean()

    eps = 1e-6
    worst = 0.0
    for li in range(2):
        w = weights[li]
        for idx in [(0, 0), (1, 2), (w.shape[0] - 1, w.shape[1] - 1)]:
            orig = w[idx]
            w[idx] = orig + eps
            up = loss()
            w[idx] = orig - eps
            down = loss()
            w[idx] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(gw[li][idx]), 1e-8)
            worst = max(worst, abs(numeric - gw[li][idx]) / denom)
    assert worst < 1e-4


def test_mlp_requires_enough_balanced_samples():
    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    small = labeled_from_mapping(mapping, spec, 100, seed=1)
    with pytest.raises(ValueError, match="samples"):
        train_mlp(small)
    lopsided = ChannelLabeling(
        [(0, 0)] * 500 + [(1024, 1), (2048, 2), (3072, 3)] * 10,
        4, 1024, 0, 4096,
    )
    with pytest.raises(ValueError, match="balanced"):
        train_mlp(lopsided)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_mlp_divergence_is_reported():
    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    labels = labeled_from_mapping(mapping, spec, 600, seed=2, window_blocks=128)
    with pytest.raises(TrainingDivergedError):
        train_mlp(labels, lr=1e9, epochs=3, addr_bits=20)


def test_mispredicting_model_only_degrades_accounting():
    # a model that is wrong at a fixed rate must not break downstream coloring
    from channelforge.coloring import ReservedSpace, alloc_colored, wrong_colored_fraction

    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])

    class Flaky:
        def predict(self, addr):
            true = mapping.channel_of(addr)
            return (true + 1) % 4 if (addr // 1024) % 10 == 0 else true

    space = ReservedSpace(0, 1 << 20, 1024, predictor=Flaky())
    spt = alloc_colored(space, 64 * 1024, {0, 1}, tensor_id="t")
    frac = wrong_colored_fraction(spt, space, mapping, 1024)
    assert 0.0 <= frac <= 0.1 + 0.1  # rate plus slack, never a crash


# -- serialization and dispatch


def test_model_json_round_trips():
    xor = XorHash([0x400, 0xC00])
    table = PeriodTable(4096, [0, 1, 2, 3], 1024)
    for model in (xor, table):
        again = model_from_json(model_to_json(model))
        for addr in range(0, 65536, 1024):
            assert predict_channel(again, addr) == predict_channel(model, addr)
    with pytest.raises(ValueError, match="unknown model kind"):
        model_from_json({"kind": "nonsense"})


def test_labeling_csv_round_trip(tmp_path):
    labels = ChannelLabeling([(0, 0), (1024, 3), (4096, 2)], 4, 1024, 0, 8192)
    path = tmp_path / "labels.csv"
    labels.to_csv(path)
    again = ChannelLabeling.from_csv(path, 4, 1024)
    assert again.samples == labels.samples


# -- end-to-end pipeline


@pytest.mark.parametrize("name,mode", [("a2000", "period"), ("gtx1080", "xor")])
def test_pipeline_recovers_full_mapping(name, mode):
    dev = make_device(name)
    result = reverse_engineer(dev, seed=1)
    assert result.crack_mode == mode
    align = alignment_map(result, dev.truth)
    assert sorted(align.values()) == list(range(dev.spec.num_channels))
    rng = random.Random(13)
    gran = dev.spec.interleave_granularity
    for _ in range(5000):
        a = rng.randrange(dev.spec.blocks) * gran
        assert align[predict_channel(result.model, a)] == dev.truth.channel_of(a)


def test_pipeline_probe_sets_are_pure():
    dev = make_device("a2000")
    result = reverse_engineer(dev, seed=3)
    for grp in result.channel_groups:
        assert len({dev.truth.channel_of(a) for a in grp}) == 1
