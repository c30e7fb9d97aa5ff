"""End-to-end subcommand behavior: artifacts, exit codes, determinism."""

import json

import pytest

from channelforge.cli import main


def write_cfg(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run(args):
    return main(args)


def test_reveng_xor_on_linear_preset(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 1,
        "gpu": {"preset": "gtx1080"},
        "reveng": {"crack": "xor", "holdout": 2000},
    })
    out = tmp_path / "out"
    assert run(["reveng", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["crack_mode"] == "xor"
    assert report["holdout_accuracy"] == 1.0
    assert (out / "labeling.csv").exists()
    model = json.loads((out / "model.json").read_text())
    assert model["kind"] == "xor_hash"


def test_reveng_xor_fails_cleanly_on_permuted_preset(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 1,
        "gpu": {"preset": "a5500"},
        "reveng": {"crack": "xor"},
    })
    assert run(["reveng", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "mapping not XOR-linear" in capsys.readouterr().err


def test_reveng_period_mode_recovers_permuted_preset(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 1,
        "gpu": {"preset": "a2000"},
        "reveng": {"crack": "period", "holdout": 3000},
    })
    out = tmp_path / "out"
    assert run(["reveng", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["crack_mode"] == "period"
    assert report["holdout_accuracy"] == 1.0


def test_missing_or_invalid_config_is_usage_error(tmp_path, capsys):
    assert run(["simulate", "--config", str(tmp_path / "nope.json")]) == 1
    bad = write_cfg(tmp_path, {"schema_version": 2, "gpu": {}})
    assert run(["simulate", "--config", bad]) == 1
    unknown = write_cfg(tmp_path, {"schema_version": 1, "gpu": {}, "bogus": True})
    assert run(["simulate", "--config", unknown]) == 1


def test_tune_pcie_returns_published_period(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1,
        "gpu": {"preset": "v100"},
        "tune": {"target": "pcie"},
    })
    out = tmp_path / "out"
    assert run(["tune", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "cfs_period.json").read_text())
    assert payload["cfs_period"] == 2048


def test_tune_partition_empty_corpus_is_schema_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1,
        "gpu": {"preset": "v100"},
        "tune": {"target": "partition", "corpus": []},
    })
    assert run(["tune", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_simulate_is_deterministic_byte_for_byte(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 5,
        "gpu": {"preset": "v100"},
        "simulate": {
            "scenario": 1, "duration_s": 1.0, "workload": "ablation",
            "partition": {"sm_be": 30, "ch_be": 0.3333, "thres_dram": 2.0},
        },
    })
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0].keys() == outs[1].keys()
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], name


def test_simulate_nice_sweep_produces_one_run_per_value(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 2,
        "gpu": {"preset": "v100"},
        "simulate": {
            "scenario": 2, "duration_s": 1.0,
            "ls_models": ["mobilenet_v3"], "be_models": ["bert"],
            "ls_rate": 20.0, "nice_sweep": [1, 10000],
        },
    })
    out = tmp_path / "out"
    assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["runs"]) == {"nice_1", "nice_10000"}
    assert (out / "metrics_nice_1.csv").exists()
    assert (out / "metrics_nice_10000.csv").exists()


def test_bench_pcie_artifacts(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 3,
        "gpu": {"preset": "v100"},
        "bench_pcie": {"duration_s": 1.0, "qps": 500.0},
    })
    out = tmp_path / "out"
    assert run(["bench-pcie", "--config", cfg, "--out", str(out)]) == 0
    comparison = (out / "pcie_comparison.csv").read_bytes()
    assert b"\r\n" in comparison  # RFC 4180
    lines = comparison.decode().strip().splitlines()
    assert lines[0] == "policy,ls_p99_us,be_throughput_gib_s"
    assert len(lines) == 4
    for pol in ("cfs", "fcfs_baymax", "preempt_streambox"):
        assert (out / f"pcie_{pol}.csv").exists()


def test_inspect_dumps_layout_artifacts(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1,
        "gpu": {"preset": "p40"},
        "inspect": {"tensor_bytes": 32768},
    })
    out = tmp_path / "out"
    assert run(["inspect", "--config", cfg, "--out", str(out)]) == 0
    info = json.loads((out / "inspect.json").read_text())
    assert info["coloring_granularity"] == 4096
    assert len(info["be_channels"]) == 4
    spt = json.loads((out / "shadow_page_table.json").read_text())
    assert len(spt["entries"]) == 8  # 32 KiB over 4 KiB pages
    period = (out / "permutation_period.csv").read_text().splitlines()
    assert period[0] == "block_index,channel_id"
    spec = json.loads((out / "gpu_spec.json").read_text())
    assert spec["num_channels"] == 12


def test_reveng_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, {
        "schema_version": 1, "seed": 4,
        "gpu": {"preset": "a2000"},
        "reveng": {"crack": "auto", "holdout": 500},
    })
    blobs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert run(["reveng", "--config", cfg, "--out", str(out)]) == 0
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0] == blobs[1]
