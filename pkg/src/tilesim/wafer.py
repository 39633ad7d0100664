"""Multi-die serving estimator for an MoE decoder with latent attention.

Composes the single-chip simulator into a wafer of mesh-connected chips
running expert-parallel (EP) and pipeline-parallel (PP) speculative decode.
Per-layer kernels are timed on one chip: GEMMs through distributed
stationary-C schedules, attention through a full flat or flash schedule over
the latent KV cache, elementwise work through a bandwidth/compute closed
form.  Expert dispatch/combine cross chip boundaries as all-to-all phases
over the die-to-die mesh.

One pipeline stage holds ceil(layers/pp) layers; with a single decode batch
in flight the iteration latency is pp times the stage latency.  Kernel times
are memoized on (shape, chip) since decode repeats identical shapes across
layers and experts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .arch import ArchConfig
from .dataflows import gen_flashattention, gen_summa, select_summa_mapping
from .engines import VectorJob, VectorKind, vector_cycles
from .noc import Strategy, TileCoord, route_xy
from .numerics import AttentionWorkload, Variant
from .sim import SimError, simulate

ATTENTION_DATAFLOWS = ("FlatAttention", "FlashMLA_like")
_FLASH_KV_BLOCK = 64  # keeps the per-tile flash working set inside L1 at 576-wide K


@dataclass(frozen=True, slots=True)
class ModelSpec:
    """MoE decoder dimensions (defaults: DeepSeek-V3 public configuration)."""

    d_model: int = 7168
    n_heads: int = 128
    d_nope: int = 128
    d_rope: int = 64
    d_v: int = 128
    q_rank: int = 1536
    kv_rank: int = 512
    n_routed_experts: int = 256
    n_shared_experts: int = 1
    top_k: int = 8
    d_expert: int = 2048
    context: int = 4096


@dataclass(frozen=True, slots=True)
class WaferConfig:
    """Mesh of identical chips with die-to-die links (bytes/s, seconds/hop)."""

    chips_x: int = 8
    chips_y: int = 8
    d2d_bandwidth: float = 1e12
    d2d_latency: float = 256e-9
    chip: ArchConfig = ArchConfig()


@dataclass(frozen=True, slots=True)
class ParallelismPlan:
    ep: int = 32
    pp: int = 2
    batch_per_chip: int = 256
    layers: int = 61
    spec_len: int = 2
    acceptance_rate: float = 0.7
    routing: str = "uniform"
    routing_seed: int = 0

    def __post_init__(self) -> None:
        if self.ep < 1 or self.pp < 1 or self.layers < 1 or self.spec_len < 1:
            raise ValueError("ep, pp, layers, spec_len must be >= 1")
        if self.batch_per_chip < 0:
            raise ValueError("batch_per_chip must be >= 0")
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError("acceptance_rate must be in [0, 1]")
        if self.routing not in ("uniform", "random"):
            raise ValueError("routing must be 'uniform' or 'random'")

    @property
    def tokens_per_step(self) -> float:
        """Accepted tokens per user per iteration under speculative decode."""
        return 1.0 + self.acceptance_rate * (self.spec_len - 1)


@dataclass(frozen=True, slots=True)
class KernelTime:
    name: str
    seconds: float


@dataclass(frozen=True, slots=True)
class ServingReport:
    t_iter: float
    tpot_ms: float
    system_throughput: float
    per_chip_throughput: float
    c2c_fraction: float
    attention_fraction: float
    layer_seconds: float
    kernels: tuple[KernelTime, ...]
    hbm_required_bytes: int
    hbm_capacity_bytes: int

    def to_row(self) -> dict:
        return {
            "t_iter_s": self.t_iter,
            "tpot_ms": self.tpot_ms,
            "system_throughput_tok_s": self.system_throughput,
            "per_chip_throughput_tok_s": self.per_chip_throughput,
            "c2c_fraction": self.c2c_fraction,
            "attention_fraction": self.attention_fraction,
            "layer_seconds": self.layer_seconds,
            "hbm_required_bytes": self.hbm_required_bytes,
        }


# --- memoized kernel primitives ---------------------------------------------


@lru_cache(maxsize=None)
def _gemm_seconds(m: int, n: int, k: int, arch: ArchConfig) -> float:
    mapping = select_summa_mapping(m, n, k, arch)
    sched = gen_summa(m, n, k, arch, mapping.panel, mapping=mapping)
    report = simulate(sched, arch)
    return report.total_cycles / arch.frequency


@lru_cache(maxsize=None)
def _elementwise_seconds(kind: VectorKind, elements: int, arch: ArchConfig) -> float:
    """max(vector-engine time, HBM streaming time) plus a mesh barrier."""
    sync = arch.noc.sync_barrier_cost
    if elements == 0:
        return sync / arch.frequency
    per_tile = math.ceil(elements / arch.n_tiles)
    compute = vector_cycles(VectorJob(kind, per_tile, arch.dtype_bytes), arch.tile)
    hbm = (
        2 * elements * arch.dtype_bytes / arch.hbm.bytes_per_cycle
        + arch.hbm.access_latency
    )
    return (max(compute, hbm) + sync) / arch.frequency


@lru_cache(maxsize=None)
def _attention_seconds(
    workload: AttentionWorkload, arch: ArchConfig, dataflow: str
) -> float:
    if dataflow == "FlashMLA_like":
        sched = gen_flashattention(workload, arch, "FA2", _FLASH_KV_BLOCK)
    elif dataflow == "FlatAttention":
        from .tiling import params_for_workload

        params = params_for_workload(
            workload, arch, strategy=Strategy.HW, async_=True
        )
        from .dataflows import gen_flatattention

        sched = gen_flatattention(workload, arch, params)
    else:
        raise ValueError(f"unknown attention dataflow '{dataflow}'")
    report = simulate(sched, arch)
    return report.total_cycles / arch.frequency


def _all_to_all_seconds(
    bytes_per_chip: int, plan: ParallelismPlan, wafer: WaferConfig
) -> float:
    """Ring-phase all-to-all over the EP submesh: phase r sends chip i's
    share to chip i+r; transfers serialize per die-to-die link (XY routing)."""
    n = plan.ep
    if n <= 1 or bytes_per_chip == 0:
        return 0.0
    sx = min(wafer.chips_x, n)
    sy = math.ceil(n / sx)
    if sx * sy > wafer.chips_x * wafer.chips_y:
        raise ValueError("EP degree exceeds the wafer")
    coords = [TileCoord(i % sx, i // sx) for i in range(n)]
    per_pair = bytes_per_chip / n
    occ = per_pair / wafer.d2d_bandwidth
    free: dict = {}
    t_end = 0.0
    for r in range(1, n):
        for i in range(n):
            path = route_xy(coords[i], coords[(i + r) % n])
            start = 0.0
            for link in path:
                start = max(start, free.get(link, 0.0))
            for link in path:
                free[link] = start + occ
            t_end = max(t_end, start + occ + len(path) * wafer.d2d_latency)
    return t_end


def _expert_token_counts(model: ModelSpec, plan: ParallelismPlan) -> np.ndarray:
    """Tokens routed to each expert in one EP stage."""
    assignments = plan.batch_per_chip * plan.ep * plan.spec_len * model.top_k
    n = model.n_routed_experts
    if plan.routing == "random":
        rng = np.random.default_rng(plan.routing_seed)
        return rng.multinomial(assignments, np.full(n, 1.0 / n))
    return np.full(n, math.ceil(assignments / n), dtype=np.int64)


def required_hbm_bytes(
    model: ModelSpec, plan: ParallelismPlan, arch: ArchConfig
) -> int:
    """Per-chip residency: stage weights (absorbed attention projections,
    router, shared and local routed experts), latent KV cache, activations."""
    d = model
    dt = arch.dtype_bytes
    d_lat = d.kv_rank + d.d_rope
    experts_local = math.ceil(d.n_routed_experts / plan.ep)
    per_layer = (
        d.d_model * d.q_rank
        + d.q_rank * d.n_heads * d_lat
        + d.d_model * d_lat
        + d.n_heads * d.kv_rank * d.d_v
        + d.n_heads * d.d_v * d.d_model
        + 2 * d.d_model
        + d.d_model * d.n_routed_experts
        + (d.n_shared_experts + experts_local) * 3 * d.d_model * d.d_expert
    )
    stage_layers = math.ceil(plan.layers / plan.pp)
    weights = stage_layers * per_layer * dt
    kv_cache = (
        stage_layers
        * plan.batch_per_chip
        * (d.context + plan.spec_len)
        * d_lat
        * dt
    )
    activations = 8 * plan.batch_per_chip * plan.spec_len * d.d_model * dt
    return weights + kv_cache + activations


# --- decoder layer ------------------------------------------------------------


def layer_time(
    model: ModelSpec,
    arch: ArchConfig,
    plan: ParallelismPlan,
    attention_dataflow: str = "FlatAttention",
    wafer: WaferConfig | None = None,
) -> list[KernelTime]:
    """Kernel-by-kernel time of one decoder layer on one chip."""
    if attention_dataflow not in ATTENTION_DATAFLOWS:
        raise ValueError(f"unknown attention dataflow '{attention_dataflow}'")
    d = model
    tokens = plan.batch_per_chip * plan.spec_len
    barrier = arch.noc.sync_barrier_cost / arch.frequency
    if tokens == 0:
        return [KernelTime("idle", barrier)]

    kernels: list[KernelTime] = []

    def add(name: str, seconds: float) -> None:
        kernels.append(KernelTime(name, seconds))

    def ew(name: str, kind: VectorKind, elements: int) -> None:
        add(name, _elementwise_seconds(kind, elements, arch))

    d_lat = d.kv_rank + d.d_rope
    ew("rmsnorm_in", VectorKind.RMSNORM, tokens * d.d_model)
    add("q_down", _gemm_seconds(tokens, d.q_rank, d.d_model, arch))
    add("q_up_absorbed", _gemm_seconds(tokens, d.n_heads * d_lat, d.q_rank, arch))
    ew("rope_q", VectorKind.ROPE, tokens * d.n_heads * d.d_rope)
    add("kv_down", _gemm_seconds(tokens, d_lat, d.d_model, arch))
    ew("rope_k", VectorKind.ROPE, tokens * d.d_rope)

    attn_wl = AttentionWorkload(
        variant=Variant.MLA_DECODE_ABSORBED,
        B=plan.batch_per_chip,
        H=d.n_heads,
        S_q=plan.spec_len,
        S_kv=d.context,
        D=d.d_nope,
        d_c=d.kv_rank,
        spec_len=plan.spec_len,
        causal=True,
        dtype_bytes=arch.dtype_bytes,
        d_rope=d.d_rope,
        d_v=d.d_v,
        q_rank=d.q_rank,
    )
    add("attention", _attention_seconds(attn_wl, arch, attention_dataflow))

    add("v_up", _gemm_seconds(tokens, d.n_heads * d.d_v, d.kv_rank, arch))
    add("o_proj", _gemm_seconds(tokens, d.d_model, d.n_heads * d.d_v, arch))
    ew("residual_attn", VectorKind.ADD, tokens * d.d_model)
    ew("rmsnorm_post", VectorKind.RMSNORM, tokens * d.d_model)
    add("router_gate", _gemm_seconds(tokens, d.n_routed_experts, d.d_model, arch))

    def expert_seconds(m_tokens: int) -> float:
        m = max(32, 32 * math.ceil(m_tokens / 32))
        return (
            2 * _gemm_seconds(m, d.d_expert, d.d_model, arch)
            + _gemm_seconds(m, d.d_model, d.d_expert, arch)
            + _elementwise_seconds(
                VectorKind.SCALE_ACCUMULATE, m * d.d_expert, arch
            )
        )

    add(
        "shared_expert",
        sum(expert_seconds(tokens) for _ in range(d.n_shared_experts)),
    )

    a2a_bytes = (
        plan.batch_per_chip * plan.spec_len * d.top_k * d.d_model * arch.dtype_bytes
    )
    wafer = wafer or WaferConfig(chip=arch)
    add("dispatch_a2a", _all_to_all_seconds(a2a_bytes, plan, wafer))

    counts = _expert_token_counts(model, plan)
    experts_local = math.ceil(d.n_routed_experts / plan.ep)
    busiest = 0.0
    for chip in range(plan.ep):
        owned = counts[chip * experts_local : (chip + 1) * experts_local]
        busiest = max(
            busiest, sum(expert_seconds(int(c)) for c in owned if c > 0)
        )
    add("routed_experts", busiest)

    # The return path carries the same per-token payload as dispatch.
    add("combine_a2a", _all_to_all_seconds(a2a_bytes, plan, wafer))
    ew("combine_sum", VectorKind.ADD, tokens * d.d_model * d.top_k)
    ew("residual_moe", VectorKind.ADD, tokens * d.d_model)
    return kernels


def serve(
    plan: ParallelismPlan,
    wafer: WaferConfig,
    attention_dataflow: str = "FlatAttention",
    model: ModelSpec | None = None,
) -> ServingReport:
    """End-to-end decode serving estimate for one wafer."""
    model = model or ModelSpec()
    arch = wafer.chip
    if plan.ep * plan.pp > wafer.chips_x * wafer.chips_y:
        raise ValueError(
            f"plan needs {plan.ep * plan.pp} chips, wafer has "
            f"{wafer.chips_x * wafer.chips_y}"
        )
    required = required_hbm_bytes(model, plan, arch)
    capacity = arch.hbm.capacity_bytes
    if capacity and required > capacity:
        raise SimError(
            f"model residency requires {required} B per chip, "
            f"only {capacity} B available"
        )

    kernels = layer_time(model, arch, plan, attention_dataflow, wafer)
    layer_s = sum(k.seconds for k in kernels)
    stage_layers = math.ceil(plan.layers / plan.pp)
    t_iter = plan.pp * stage_layers * layer_s
    tokens_per_step = plan.tokens_per_step
    if plan.batch_per_chip == 0 or t_iter == 0.0:
        per_chip = 0.0
    else:
        per_chip = plan.batch_per_chip * tokens_per_step / t_iter
    c2c = sum(k.seconds for k in kernels if k.name.endswith("_a2a"))
    attn = sum(k.seconds for k in kernels if k.name == "attention")
    return ServingReport(
        t_iter=t_iter,
        tpot_ms=1e3 * t_iter / tokens_per_step,
        system_throughput=per_chip * plan.ep * plan.pp,
        per_chip_throughput=per_chip,
        c2c_fraction=c2c / layer_s if layer_s else 0.0,
        attention_fraction=attn / layer_s if layer_s else 0.0,
        layer_seconds=layer_s,
        kernels=tuple(kernels),
        hbm_required_bytes=required,
        hbm_capacity_bytes=capacity,
    )
