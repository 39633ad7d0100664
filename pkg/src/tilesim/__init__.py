"""Cycle-level performance and functional simulator for tile-based many-core
accelerators, with schedule generators for fused attention dataflows,
distributed GEMM, tile-size autotuning, and a multi-die MoE serving
estimator."""

from .arch import (
    ArchConfig,
    HbmSpec,
    NocSpec,
    PeakSummary,
    TileSpec,
    derive_peaks,
    from_mapping,
)
from .dataflows import (
    DATAFLOW_NAMES,
    FlatParams,
    InstanceSpec,
    IoModel,
    SummaMapping,
    WorkloadTensors,
    assemble_outputs,
    build_schedule,
    gen_flashattention,
    gen_flat_decode,
    gen_flatattention,
    gen_summa,
    io_flash,
    io_flat,
    make_workload_tensors,
    select_summa_mapping,
)
from .engines import (
    GemmJob,
    HbmRequest,
    VectorJob,
    VectorKind,
    gemm_cycles,
    gemm_utilization,
    hbm_service,
    vector_cycles,
)
from .noc import (
    Axis,
    CollectiveKind,
    CollectiveRequest,
    Strategy,
    TileCoord,
    collective_time,
    route_xy,
)
from .numerics import (
    AttentionWorkload,
    Variant,
    absorb_mla_weights,
    reference_attention,
    reference_gemm,
)
from .sim import Schedule, SimError, SimReport, Step, StepKind, check_schedule, simulate
from .tiling import TilingChoice, l1_footprint, select_tiling, select_tiling_for_group
from .wafer import (
    KernelTime,
    ModelSpec,
    ParallelismPlan,
    ServingReport,
    WaferConfig,
    layer_time,
    required_hbm_bytes,
    serve,
)

__version__ = "0.1.0"
