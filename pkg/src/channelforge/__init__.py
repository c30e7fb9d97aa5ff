"""channelforge: simulated GPU channel reverse engineering and isolation testbed."""

from .gpu_model import (
    GpuSpec,
    GroundTruthMapping,
    LatencyModel,
    MappingKind,
    MemoryDevice,
    make_device,
    make_mapping,
    make_preset,
)

__version__ = "0.1.0"

__all__ = [
    "GpuSpec",
    "GroundTruthMapping",
    "LatencyModel",
    "MappingKind",
    "MemoryDevice",
    "make_device",
    "make_mapping",
    "make_preset",
    "__version__",
]
