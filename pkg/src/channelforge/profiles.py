"""Benchmark-derived DNN workload profiles and stock experiment setups.

Runtimes (ms), model sizes (MiB) and average SM / VRAM-bandwidth
utilisation come from offline profiling of common vision and language
models on the four reference GPUs.  Small single-request models serve
as latency-sensitive workloads; the large-batch ones are best-effort.
"""

from __future__ import annotations

from .coloring import KernelProfile
from .colocation_sim import ArrivalSpec, TaskSpec, TuningPair

MIB = 1 << 20
MS = 1e6  # ns

# name: (class, size MiB, {gpu: runtime ms}, SM %, VRAM %)
DNN_PROFILES = {
    "mobilenet_v3": ("ls", 20.9, {"p40": 3.8, "v100": 4.1, "a2000": 3.8, "a5500": 3.0}, 11.1, 9.4),
    "squeezenet": ("ls", 4.7, {"p40": 2.1, "v100": 2.4, "a2000": 2.2, "a5500": 1.6}, 22.0, 7.5),
    "shufflenet": ("ls", 13.3, {"p40": 3.1, "v100": 3.1, "a2000": 3.4, "a5500": 2.5}, 17.2, 7.3),
    "efficientnet": ("ls", 17.7, {"p40": 3.3, "v100": 3.9, "a2000": 3.7, "a5500": 2.6}, 18.1, 12.1),
    "resnet34": ("ls", 83.1, {"p40": 4.5, "v100": 3.8, "a2000": 4.4, "a5500": 2.5}, 40.3, 7.2),
    "mobilebert": ("ls", 93.8, {"p40": 23.0, "v100": 22.6, "a2000": 23.8, "a5500": 19.5}, 4.9, 3.0),
    "mobilevit": ("ls", 21.3, {"p40": 9.3, "v100": 18.7, "a2000": 9.6, "a5500": 7.3}, 19.0, 2.5),
    "efficientformer": ("ls", 109.9, {"p40": 13.5, "v100": 10.9, "a2000": 11.8, "a5500": 9.5}, 24.1, 9.9),
    "resnet152": ("be", 229.3, {"p40": 55.5, "v100": 67.4, "a2000": 32.5, "a5500": 53.7}, 75.2, 13.9),
    "densenet161": ("be", 109.2, {"p40": 69.9, "v100": 83.0, "a2000": 35.9, "a5500": 57.7}, 47.0, 21.7),
    "bert": ("be", 422.1, {"p40": 37.7, "v100": 43.6, "a2000": 21.8, "a5500": 32.4}, 63.5, 13.3),
    "stable_diffusion": ("be", 238.2, {"p40": 289.2, "v100": 193.2, "a2000": 155.8, "a5500": 140.4}, 86.6, 10.4),
}

LS_MODELS = [n for n, p in DNN_PROFILES.items() if p[0] == "ls"]
BE_MODELS = [n for n, p in DNN_PROFILES.items() if p[0] == "be"]


def model_kernels(name: str, gpu_name: str, total_sms: int, n_kernels: int | None = None):
    """Split one model into kernels carrying its profiled utilisation.

    DRAM traffic inside a model is bursty: a few kernels do most of the
    memory work.  A quarter of the kernels are made memory heavy and
    carry 60% of the model's DRAM bytes, the rest split the remainder,
    so the model average matches the profiled VRAM utilisation while
    individual kernels land on realistic extremes.
    """
    cls, size_mib, runtimes, sm_pct, vram_pct = DNN_PROFILES[name]
    runtime = runtimes.get(gpu_name, runtimes["v100"]) * MS
    if n_kernels is None:
        # best-effort models run long chains of short kernels, which also
        # bounds how long an expanded kernel can squat on reclaimed SMs
        n_kernels = 96 if cls == "be" else 12
    sm_demand = max(1, round(sm_pct / 100 * total_sms))
    return synthetic_kernels(
        name,
        runtime=runtime,
        sm_demand=sm_demand,
        dram_avg=vram_pct,
        n_kernels=n_kernels,
        heavy_cap=95.0 if cls == "be" else 35.0,
        total_bytes=int(size_mib * MIB),
    )


def synthetic_kernels(
    name: str,
    *,
    runtime: float,
    sm_demand: int,
    dram_avg: float,
    n_kernels: int,
    heavy_cap: float = 95.0,
    heavy_mass: float = 0.6,
    heavy_runtime_share: float = 0.45,
    total_bytes: int = 0,
) -> tuple[KernelProfile, ...]:
    """Kernel chain whose DRAM burstiness averages out to ``dram_avg``.

    One kernel in six is memory heavy; heavy kernels carry
    ``heavy_mass`` of the model's DRAM bytes (bounded by ``heavy_cap``
    instantaneous throughput) in ``heavy_runtime_share`` of its time.
    """
    n_heavy = max(1, n_kernels // 6)
    total_dram = dram_avg * n_kernels
    heavy_dram = min(heavy_cap, total_dram * heavy_mass / n_heavy)
    light_dram = (total_dram - heavy_dram * n_heavy) / (n_kernels - n_heavy)
    heavy_runtime = heavy_runtime_share * runtime / n_heavy
    light_runtime = (1 - heavy_runtime_share) * runtime / (n_kernels - n_heavy)
    per_kernel_bytes = total_bytes // n_kernels
    kernels = []
    for i in range(n_kernels):
        heavy = i < n_heavy
        kernels.append(
            KernelProfile(
                kernel_id=f"{name}_k{i}",
                isolated_runtime=heavy_runtime if heavy else light_runtime,
                sm_demand=sm_demand,
                dram_throughput=heavy_dram if heavy else light_dram,
                tensor_sizes=(per_kernel_bytes,),
            )
        )
    return tuple(kernels)


def model_task(
    name: str,
    gpu_name: str,
    total_sms: int,
    *,
    instances: int | None = None,
    nice: int | None = None,
    arrival: ArrivalSpec | None = None,
    ls_rate: float = 50.0,
) -> TaskSpec:
    cls = DNN_PROFILES[name][0]
    size = int(DNN_PROFILES[name][1] * MIB)
    if cls == "ls":
        arrival = arrival or ArrivalSpec("poisson", rate=ls_rate)
        instances = 4 if instances is None else instances
        nice = 10_000 if nice is None else nice
    else:
        arrival = None
        instances = 1 if instances is None else instances
        nice = 100 if nice is None else nice
    return TaskSpec(
        task_id=name,
        cls=cls,
        kernels=model_kernels(name, gpu_name, total_sms),
        model_size=size,
        arrival=arrival,
        instances=instances,
        nice=nice,
    )


def default_scenario_tasks(
    gpu_name: str,
    total_sms: int,
    scenario: int,
    *,
    ls_models=None,
    be_models=None,
    ls_rate: float = 50.0,
    ls_nice: int = 10_000,
    arrival_kind: str = "poisson",
    arrival_scale: float = 1.0,
) -> list[TaskSpec]:
    """LS models on request streams plus closed-loop BE co-runners.

    Scenario 1 serves fully resident models; scenario 2 stages each
    model over PCIe before it runs, with fewer instances per LS model
    because host-side staging multiplies the footprint.
    """
    ls_models = ls_models if ls_models is not None else LS_MODELS[:4]
    be_models = be_models if be_models is not None else BE_MODELS[:2]
    instances = 4 if scenario == 1 else 2
    tasks = []
    for name in ls_models:
        arrival = ArrivalSpec(arrival_kind, rate=ls_rate, scale=arrival_scale)
        tasks.append(
            model_task(
                name, gpu_name, total_sms,
                instances=instances, nice=ls_nice, arrival=arrival,
            )
        )
    for name in be_models:
        tasks.append(model_task(name, gpu_name, total_sms, nice=100))
    return tasks


def membound_be_task(
    total_sms: int,
    *,
    instances: int = 4,
    sm_pct: float = 36.0,
    dram_avg: float = 50.0,
    runtime_ms: float = 60.0,
    n_kernels: int = 768,
    model_mib: float = 200.0,
) -> TaskSpec:
    """A deliberately memory-hungry best-effort co-runner.

    Its kernels are small on SMs so several instances fit the BE box,
    and their bursts comfortably overdrive the per-channel service
    rate, which is what channel isolation is supposed to contain.
    """
    kernels = synthetic_kernels(
        "be_membound",
        runtime=runtime_ms * MS,
        sm_demand=max(1, round(sm_pct / 100 * total_sms)),
        dram_avg=dram_avg,
        n_kernels=n_kernels,
        heavy_cap=85.0,
        total_bytes=int(model_mib * MIB),
    )
    return TaskSpec(
        task_id="be_membound",
        cls="be",
        kernels=kernels,
        model_size=int(model_mib * MIB),
        instances=instances,
        nice=100,
    )


def ablation_tasks(gpu_name: str, total_sms: int, *, ls_rate: float = 50.0) -> list[TaskSpec]:
    """Stock setup for isolation ablations.

    Two lightly loaded LS services against one memory-hungry BE task,
    so the LS tail is shaped by the co-runner rather than by the LS
    services trampling each other, which is the regime channel
    isolation targets.
    """
    tasks = [
        model_task(name, gpu_name, total_sms, ls_rate=ls_rate, instances=4)
        for name in ("mobilenet_v3", "squeezenet")
    ]
    tasks.append(membound_be_task(total_sms))
    return tasks


# partition used by the stock ablation experiment; the low memory-bound
# threshold colors every kernel, which is the full-partition regime the
# chain comparison is about
ABLATION_THRES_DRAM = 2.0


def default_tuning_corpus(total_sms: int) -> list[TuningPair]:
    """Kernel pairs whose contention structure pins the partition search.

    The kernels sit just above the useful memory-bound threshold, so
    raising the threshold past them uncolors everything and breaks the
    latency budget; the LS kernels are wide enough that the LS pool
    cannot shrink below them; and their memory heat is mild enough that
    binding LS to two thirds of the channels stays within budget while
    binding it to half does not.
    """
    def k(name, ms, sm, vram):
        return KernelProfile(name, ms * MS, sm, vram)

    wide = max(1, round(0.60 * total_sms))
    small = max(1, round(0.17 * total_sms))
    return [
        TuningPair(
            ls_kernel=k("ls_wide", 4.0, wide, 45.0),
            be_kernel=k("be_heavy", 30.0, small, 48.0),
            ls_rate=50.0,
            ls_instances=1,
            be_instances=2,
        ),
        TuningPair(
            ls_kernel=k("ls_mem", 5.0, wide - 2, 44.0),
            be_kernel=k("be_mid", 24.0, small - 1, 46.0),
            ls_rate=40.0,
            ls_instances=1,
            be_instances=2,
        ),
    ]


# contention configuration the stock partition search is calibrated for
TUNING_CONTENTION = dict(beta=1.0, service_pct=60.0)
