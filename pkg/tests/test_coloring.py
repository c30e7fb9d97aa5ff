"""Granularity choice, channel binding, and shadow-page-table allocation."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from channelforge.coloring import (
    ColoredAllocError,
    KernelProfile,
    ReservedSpace,
    ShadowPageTable,
    alloc_colored,
    bind_channels,
    choose_granularity,
    classify_memory_bound,
    default_spt_overhead,
    spt_overhead_model,
    translate,
    wrong_colored_fraction,
)
from channelforge.gpu_model import make_mapping, make_preset


class ExactPredictor:
    def __init__(self, mapping):
        self.mapping = mapping

    def predict(self, addr):
        return self.mapping.channel_of(addr)


def identity_setup(num_channels=4, pages=256, granularity=1024):
    spec = make_preset("custom", num_channels=num_channels)
    mapping = make_mapping(spec, permutations=[list(range(num_channels))])
    space = ReservedSpace(0, pages * granularity, granularity, ExactPredictor(mapping))
    return spec, mapping, space


# -- granularity


@pytest.mark.parametrize("name,gran", [("p40", 4096), ("a2000", 2048), ("v100", 4096), ("a5500", 2048)])
def test_choose_granularity_presets(name, gran):
    assert choose_granularity(make_preset(name)) == gran


def test_choose_granularity_identity_layout():
    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    assert choose_granularity(spec, mapping) == 1024


def test_granularity_blocks_are_single_channel():
    for name in ("p40", "a2000", "a5500"):
        spec = make_preset(name)
        mapping = make_mapping(spec)
        g = choose_granularity(spec, mapping)
        for base in range(0, spec.permutation_period, g):
            channels = {mapping.channel_of(base + off) for off in range(0, g, 1024)}
            assert len(channels) == 1


# -- classification


@pytest.mark.parametrize(
    "throughput,thres,expect",
    [(21.7, 40.0, False), (40.0, 40.0, False), (41.0, 40.0, True)],
)
def test_classify_memory_bound(throughput, thres, expect):
    prof = KernelProfile("k", 1e6, 4, throughput)
    assert classify_memory_bound(prof, thres) is expect


# -- binding


def test_bind_channels_paper_arithmetic():
    b12 = bind_channels(12, 1 / 3)
    assert len(b12.be_channels) == 4 and len(b12.ls_channels) == 8
    b6 = bind_channels(6, 1 / 3)
    assert len(b6.be_channels) == 2 and len(b6.ls_channels) == 4


def test_bind_channels_guards_empty_side():
    with pytest.raises(ValueError):
        bind_channels(2, 0.9)
    with pytest.raises(ValueError):
        bind_channels(4, 0.05)
    with pytest.raises(ValueError):
        bind_channels(4, 1.5)


def test_bind_channels_partitions_everything():
    b = bind_channels(make_preset("v100"), 1 / 3)
    assert b.ls_channels | b.be_channels == set(range(32))
    assert not (b.ls_channels & b.be_channels)


# -- allocation


def test_alloc_colored_entries_stay_in_bound_channels():
    spec, mapping, space = identity_setup()
    spt = alloc_colored(space, 8 * 1024, {0, 2}, tensor_id="t0")
    assert len(spt.entries) == 8
    for off in spt.entries:
        assert mapping.channel_of(space.base + off) in {0, 2}


def test_alloc_colored_2kib_pages():
    spec = make_preset("custom", num_channels=4, run_length=2)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    space = ReservedSpace(0, 128 * 2048, 2048, ExactPredictor(mapping))
    spt = alloc_colored(space, 8 * 1024, {1}, granularity=2048)
    assert len(spt.entries) == 4
    for off in spt.entries:
        for block in range(2):
            assert mapping.channel_of(off + block * 1024) == 1


def test_alloc_zero_bytes_is_empty():
    _, _, space = identity_setup()
    spt = alloc_colored(space, 0, {0})
    assert spt.entries == []


def test_alloc_all_channels_is_bump_allocation():
    spec, mapping, space = identity_setup()
    spt = alloc_colored(space, 16 * 1024, set(range(4)))
    assert spt.entries == [i * 1024 for i in range(16)]


def test_alloc_shortfall_reported():
    spec, mapping, space = identity_setup(pages=16)
    with pytest.raises(ColoredAllocError) as err:
        alloc_colored(space, 16 * 1024, {0})  # only 4 pages have color 0
    assert err.value.shortfall == 12
    # the failed allocation released what it had grabbed
    assert space.free_pages({0}) == 4


def test_alloc_without_predictor_fails():
    space = ReservedSpace(0, 64 * 1024, 1024, predictor=None)
    with pytest.raises(ValueError, match="predictor"):
        alloc_colored(space, 1024, {0})


def test_alloc_wrong_granularity_rejected():
    _, _, space = identity_setup()
    with pytest.raises(ValueError, match="managed at"):
        alloc_colored(space, 1024, {0}, granularity=2048)


def test_release_returns_exact_pages():
    spec, mapping, space = identity_setup()
    before = space.free_pages()
    spt = alloc_colored(space, 32 * 1024, {0, 1})
    assert space.free_pages() == before - 32
    space.release(spt)
    assert space.free_pages() == before
    with pytest.raises(ValueError):
        space.release(spt)  # double free surfaces


def test_no_double_allocation_under_churn():
    spec, mapping, space = identity_setup(pages=512)
    rng = random.Random(0)
    live = []
    for _ in range(2000):
        if live and rng.random() < 0.4:
            space.release(live.pop(rng.randrange(len(live))))
        else:
            size = rng.randrange(1, 16) * 1024
            chans = set(rng.sample(range(4), rng.randrange(1, 5)))
            try:
                live.append(alloc_colored(space, size, chans))
            except ColoredAllocError:
                continue
        offsets = [off for spt in live for off in spt.entries]
        assert len(offsets) == len(set(offsets))


# -- translation


def test_translate_examples():
    _, _, space = identity_setup()
    spt = alloc_colored(space, 4 * 1024, {1, 3})
    assert translate(spt, 0) == spt.entries[0]
    assert translate(spt, 1024) == spt.entries[1]
    assert translate(spt, 1500) == spt.entries[1] + 476
    with pytest.raises(IndexError):
        translate(spt, 4 * 1024)


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=1, max_value=64 * 1024))
def test_translate_is_a_bijection(tensor_size):
    spec, mapping, space = identity_setup(pages=256)
    spt = alloc_colored(space, tensor_size, {0, 1, 2, 3})
    seen = set()
    for off in range(0, tensor_size, 97):
        phys = translate(spt, off)
        assert phys not in seen
        seen.add(phys)
    space.release(spt)


def test_translate_visits_only_bound_channels():
    spec, mapping, space = identity_setup()
    spt = alloc_colored(space, 24 * 1024, {2, 3})
    rng = random.Random(4)
    for _ in range(500):
        off = rng.randrange(24 * 1024)
        phys = space.base + translate(spt, off)
        assert mapping.channel_of(phys) in {2, 3}


# -- overhead model


def test_spt_overhead_defaults_match_measurements():
    assert default_spt_overhead("p40") == pytest.approx(0.0099)
    assert default_spt_overhead("v100") == pytest.approx(0.0050)
    assert default_spt_overhead("a2000") == pytest.approx(0.0063)
    assert default_spt_overhead("a5500") == pytest.approx(0.0082)


def test_spt_overhead_model():
    assert spt_overhead_model(1000.0, 0.0) == 0.0
    assert spt_overhead_model(1000.0, 0.01) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        spt_overhead_model(1000.0, 0.2)


# -- misprediction tolerance


def test_mispredicted_pages_are_accounted_not_fatal():
    spec = make_preset("custom", num_channels=4)
    mapping = make_mapping(spec, permutations=[[0, 1, 2, 3]])
    eps = 0.05
    rng = random.Random(11)

    class Noisy:
        def predict(self, addr):
            true = mapping.channel_of(addr)
            return (true + 1) % 4 if rng.random() < eps else true

    space = ReservedSpace(0, 4096 * 1024, 1024, Noisy())
    total_blocks = 0
    wrong_blocks = 0
    for i in range(40):
        spt = alloc_colored(space, 32 * 1024, {i % 4}, tensor_id=str(i))
        frac = wrong_colored_fraction(spt, space, mapping, 1024)
        total_blocks += len(spt.entries)
        wrong_blocks += round(frac * len(spt.entries))
    assert wrong_blocks / total_blocks <= eps + 0.05  # rate plus statistical slack


def test_spt_json_dump(tmp_path):
    _, _, space = identity_setup()
    spt = alloc_colored(space, 4096, {0, 1}, tensor_id="weights")
    path = tmp_path / "spt.json"
    spt.dump(path)
    import json

    payload = json.loads(path.read_text())
    assert payload["tensor_id"] == "weights"
    assert payload["granularity"] == 1024
    assert payload["entries"] == spt.entries
    assert payload["bound_channels"] == [0, 1]
