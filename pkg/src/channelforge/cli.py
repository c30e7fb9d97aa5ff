"""Command-line front end for probing, simulation, and tuning experiments.

Every subcommand is pure given (config, seed): re-running writes
byte-identical artifacts.  Exit codes: 0 success, 1 usage or config
error, 2 domain failure such as an infeasible tune or a crack that the
layout genuinely defeats.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import random
import statistics
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from . import coloring, profiles
from .colocation_sim import (
    ContentionModel,
    InfeasibleError,
    PartitionConfig,
    TuningPair,
    grid_search_tune,
    run_scenario,
)
from .gpu_model import GpuSpec, make_device, make_mapping, make_preset
from .pcie_cfs import (
    BusSpec,
    ClosedLoopTask,
    CopyRequest,
    Direction,
    Policy,
    autotune_cfs_period,
    run_policy,
)
from .reveng import (
    XorLinearityError,
    alignment_map,
    model_to_json,
    predict_channel,
    reverse_engineer,
)

log = logging.getLogger("channelforge")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DOMAIN = 2


def load_schema() -> dict:
    with resources.files("channelforge").joinpath("experiment_schema.json").open() as fh:
        return json.load(fh)


def load_config(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    jsonschema.validate(cfg, load_schema())
    return cfg


def build_gpu(cfg: dict) -> GpuSpec:
    gpu = cfg.get("gpu", {})
    if "custom" in gpu:
        return make_preset("custom", **gpu["custom"])
    return make_preset(gpu.get("preset", "p40"))


def write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_table(rows, header) -> None:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_reveng(cfg: dict, out: Path, seed: int, fmt: str) -> int:
    spec = build_gpu(cfg)
    opts = cfg.get("reveng", {})
    dev = make_device(spec)
    try:
        result = reverse_engineer(
            dev,
            crack=opts.get("crack", "auto"),
            window_blocks=opts.get("window_blocks"),
            wide_marks=opts.get("wide_marks", 16),
            votes=opts.get("votes", 1),
            seed=seed,
            mlp_epochs=opts.get("mlp_epochs", 200),
        )
    except XorLinearityError as exc:
        print(f"crack failed: {exc}", file=sys.stderr)
        return EXIT_DOMAIN

    align = alignment_map(result, dev.truth)
    rng = random.Random(seed ^ 0x0DDC0FFE)
    holdout = opts.get("holdout", 10_000)
    gran = spec.interleave_granularity
    hits = 0
    for _ in range(holdout):
        addr = rng.randrange(spec.blocks) * gran
        if align[predict_channel(result.model, addr)] == dev.truth.channel_of(addr):
            hits += 1

    result.labeling.to_csv(out / "labeling.csv")
    write_json(out / "model.json", model_to_json(result.model))
    report = {
        "gpu": spec.name,
        "crack_mode": result.crack_mode,
        "probe_count": result.probe_count,
        "samples": len(result.labeling.samples),
        "marked_addresses": len(result.marked),
        "holdout": holdout,
        "holdout_accuracy": hits / holdout,
        "alignment": {str(k): v for k, v in align.items()},
    }
    write_json(out / "report.json", report)
    print(
        f"{spec.name}: cracked via {result.crack_mode}, held-out accuracy "
        f"{hits / holdout:.4f} over {holdout} addresses, "
        f"{result.probe_count} timed probes"
    )
    return EXIT_OK


def _partition_from(cfg_sim: dict, spec: GpuSpec) -> PartitionConfig:
    p = cfg_sim.get("partition", {})
    total = spec.total_sms or 80
    return PartitionConfig(
        sm_be=p.get("sm_be", 30),
        ch_be=p.get("ch_be", 1 / 3),
        thres_dram=p.get("thres_dram", 40.0),
        total_sms=total,
        sm_partitioning=p.get("sm_partitioning", True),
        vram_coloring=p.get("vram_coloring", True),
        pcie_policy=p.get("pcie_policy", True),
    )


def _tasks_from(cfg_sim: dict, spec: GpuSpec, nice: int | None = None):
    total = spec.total_sms or 80
    workload = cfg_sim.get("workload", "default")
    if workload == "ablation":
        return profiles.ablation_tasks(spec.name, total, ls_rate=cfg_sim.get("ls_rate", 50.0))
    scenario = cfg_sim.get("scenario", 1)
    kwargs = dict(
        ls_rate=cfg_sim.get("ls_rate", 50.0),
        ls_nice=nice if nice is not None else cfg_sim.get("ls_nice", 10_000),
        arrival_kind=cfg_sim.get("arrival_kind", "poisson"),
        arrival_scale=cfg_sim.get("arrival_scale", 1.0),
    )
    if "ls_models" in cfg_sim:
        kwargs["ls_models"] = cfg_sim["ls_models"]
    if "be_models" in cfg_sim:
        kwargs["be_models"] = cfg_sim["be_models"]
    tasks = profiles.default_scenario_tasks(spec.name, total, scenario, **kwargs)
    if "ls_instances" in cfg_sim:
        from dataclasses import replace

        tasks = [
            replace(t, instances=cfg_sim["ls_instances"]) if t.cls == "ls" else t
            for t in tasks
        ]
    return tasks


def _metrics_rows(metrics):
    rows = []
    for tid, tm in sorted(metrics.per_task.items()):
        if tm.cls == "ls":
            rows.append(
                [tid, "ls", f"{tm.percentile(0.5) / 1000:.3f}",
                 f"{tm.percentile(0.99) / 1000:.3f}", ""]
            )
        else:
            rows.append([tid, "be", "", "", f"{metrics.be_throughput(tid):.4f}"])
    return rows


def _simulate_one(payload):
    """One independent simulation; module level so worker processes can run it."""
    cfg, name, ov, seed = payload
    spec = build_gpu(cfg)
    sim_cfg = cfg.get("simulate", {})
    partition = _partition_from(sim_cfg, spec)
    if ov.get("toggles"):
        from dataclasses import replace

        partition = replace(partition, **ov["toggles"])
    tasks = _tasks_from(sim_cfg, spec, nice=ov.get("nice"))
    metrics = run_scenario(
        spec,
        tasks,
        partition,
        duration=sim_cfg.get("duration_s", 10.0) * 1e9,
        seed=seed,
        scenario=sim_cfg.get("scenario", 1),
        contention=ContentionModel(**sim_cfg.get("contention", {})),
    )
    return name, metrics.summary(), _metrics_rows(metrics)


def cmd_simulate(cfg: dict, out: Path, seed: int, fmt: str, jobs: int = 1) -> int:
    spec = build_gpu(cfg)
    sim_cfg = cfg.get("simulate", {})
    partition = _partition_from(sim_cfg, spec)

    runs: list[tuple[str, dict]] = []
    if sim_cfg.get("ablate"):
        runs = [
            ("no_isolation", {"toggles": dict(sm_partitioning=False, vram_coloring=False)}),
            ("sm_partitioning", {"toggles": dict(sm_partitioning=True, vram_coloring=False)}),
            ("sm_and_coloring", {"toggles": dict(sm_partitioning=True, vram_coloring=True)}),
        ]
    elif "nice_sweep" in sim_cfg:
        runs = [(f"nice_{n}", {"nice": n}) for n in sim_cfg["nice_sweep"]]
    else:
        runs = [("run", {})]

    payloads = [(cfg, name, ov, seed) for name, ov in runs]
    if jobs > 1 and len(payloads) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_simulate_one, payloads))
    else:
        results = [_simulate_one(p) for p in payloads]

    summary = {
        "gpu": spec.name,
        "scenario": sim_cfg.get("scenario", 1),
        "seed": seed,
        "runs": {},
    }
    for name, run_summary, rows in results:
        summary["runs"][name] = run_summary
        with open(out / f"metrics_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "class", "p50_us", "p99_us", "throughput_per_s"])
            w.writerows(rows)
        print(f"[{name}]")
        _print_table(rows, ["task_id", "class", "p50_us", "p99_us", "throughput_per_s"])
    summary["partition"] = {
        "sm_be": partition.sm_be,
        "ch_be": partition.ch_be,
        "thres_dram": partition.thres_dram,
        "total_sms": partition.total_sms,
    }
    write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_tune(cfg: dict, out: Path, seed: int, fmt: str, jobs: int = 1) -> int:
    spec = build_gpu(cfg)
    tcfg = cfg.get("tune", {"target": "pcie"})
    if tcfg["target"] == "pcie":
        period = autotune_cfs_period(BusSpec(), epsilon=tcfg.get("epsilon", 0.01))
        write_json(out / "cfs_period.json", {"cfs_period": period})
        print(f"auto-tuned cfs_period: {period}")
        return EXIT_OK

    total = spec.total_sms or 80
    if "corpus" in tcfg:
        corpus = [
            TuningPair(
                ls_kernel=coloring.KernelProfile(
                    p["ls"]["kernel_id"], p["ls"]["runtime_ms"] * 1e6,
                    p["ls"]["sm_demand"], p["ls"]["dram_throughput"],
                ),
                be_kernel=coloring.KernelProfile(
                    p["be"]["kernel_id"], p["be"]["runtime_ms"] * 1e6,
                    p["be"]["sm_demand"], p["be"]["dram_throughput"],
                ),
                ls_rate=p.get("ls_rate", 50.0),
                ls_instances=p.get("ls_instances", 1),
                be_instances=p.get("be_instances", 2),
            )
            for p in tcfg["corpus"]
        ]
    else:
        corpus = profiles.default_tuning_corpus(total)
    contention = ContentionModel(**tcfg.get("contention", profiles.TUNING_CONTENTION))
    try:
        best = grid_search_tune(
            spec,
            corpus,
            latency_budget=tcfg.get("latency_budget", 0.25),
            duration=tcfg.get("duration_s", 2.0) * 1e9,
            seed=seed,
            contention=contention,
        )
    except InfeasibleError as exc:
        print(f"tune infeasible: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    payload = {
        "sm_be": best.sm_be,
        "ch_be": best.ch_be,
        "thres_dram": best.thres_dram,
        "total_sms": best.total_sms,
    }
    write_json(out / "partition.json", payload)
    print(
        f"tuned partition: sm_be={best.sm_be} ch_be={best.ch_be:.4f} "
        f"thres_dram={best.thres_dram:.0f}"
    )
    return EXIT_OK


def cmd_bench_pcie(cfg: dict, out: Path, seed: int, fmt: str, jobs: int = 1) -> int:
    b = cfg.get("bench_pcie", {})
    horizon = b.get("duration_s", 10.0) * 1e9
    qps = b.get("qps", 1000.0)
    ls_size = b.get("ls_size", 4096)
    be_size = b.get("be_size", 40 << 20)
    policies = [Policy(p) for p in b.get("policies", ["fcfs_baymax", "preempt_streambox", "cfs"])]

    rng = random.Random(seed)
    t, rid, reqs = 0.0, 1000, []
    while True:
        t += rng.expovariate(qps / 1e9)
        if t > horizon:
            break
        reqs.append(CopyRequest(rid, "ls", Direction.H2D, ls_size, t))
        rid += 1

    rows = []
    for pol in policies:
        metrics = run_policy(
            pol,
            reqs,
            horizon,
            tasks={"ls": (b.get("nice_ls", 10_000), True), "be": (b.get("nice_be", 1), False)},
            closed_loops=[ClosedLoopTask("be", Direction.H2D, be_size, depth=b.get("be_depth", 6))],
            cfs_period=b.get("cfs_period", 2048),
        )
        metrics.to_csv(out / f"pcie_{pol.value}.csv")
        rows.append(
            [
                pol.value,
                f"{metrics.p99('ls', Direction.H2D) / 1000:.1f}",
                f"{metrics.throughput('be', Direction.H2D) * 1e9 / 2**30:.3f}",
            ]
        )
    with open(out / "pcie_comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "ls_p99_us", "be_throughput_gib_s"])
        w.writerows(rows)
    _print_table(rows, ["policy", "ls_p99_us", "be_throughput_gib_s"])
    return EXIT_OK


def cmd_inspect(cfg: dict, out: Path, seed: int, fmt: str) -> int:
    spec = build_gpu(cfg)
    icfg = cfg.get("inspect", {})
    mapping = make_mapping(spec)
    write_json(out / "gpu_spec.json", spec.to_json())
    mapping.export_period_csv(out / "permutation_period.csv")
    gran = coloring.choose_granularity(spec, mapping)
    binding = coloring.bind_channels(spec, icfg.get("ch_be", 1 / 3))

    class _Exact:
        def predict(self, addr):
            return mapping.channel_of(addr)

    tensor_bytes = icfg.get("tensor_bytes", 64 * 1024)
    space_pages = max(64, 4 * -(-tensor_bytes // gran) * spec.num_channels)
    space = coloring.ReservedSpace(0, space_pages * gran, gran, predictor=_Exact())
    spt = coloring.alloc_colored(space, tensor_bytes, binding.ls_channels, tensor_id="demo")
    spt.dump(out / "shadow_page_table.json")
    info = {
        "gpu": spec.name,
        "coloring_granularity": gran,
        "num_channels": spec.num_channels,
        "ls_channels": sorted(binding.ls_channels),
        "be_channels": sorted(binding.be_channels),
        "spt_overhead_fraction": coloring.default_spt_overhead(spec.name),
    }
    write_json(out / "inspect.json", info)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="channelforge",
        description="Simulated GPU channel reverse engineering and isolation experiments",
    )
    parser.add_argument("command", choices=["reveng", "simulate", "tune", "bench-pcie", "inspect"])
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel simulations where applicable")
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=os.environ.get("CHANNELFORGE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except jsonschema.ValidationError as exc:
        print(f"config rejected: {exc.message}", file=sys.stderr)
        return EXIT_USAGE

    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "reveng":
            return cmd_reveng(cfg, out, seed, args.format)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, seed, args.format, args.jobs)
        if args.command == "tune":
            return cmd_tune(cfg, out, seed, args.format, args.jobs)
        if args.command == "bench-pcie":
            return cmd_bench_pcie(cfg, out, seed, args.format, args.jobs)
        if args.command == "inspect":
            return cmd_inspect(cfg, out, seed, args.format)
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
