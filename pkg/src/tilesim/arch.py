"""Accelerator architecture description and derived peak quantities.

The simulator is parameterized by a single :class:`ArchConfig` describing a 2D
mesh of tiles.  Each tile couples a matrix engine (a rows x cols array of
compute elements, one FMA per CE per cycle), a vector engine, a
software-managed L1 scratchpad, and DMA channels.  Tiles are connected by a
mesh NoC; HBM channels sit on one mesh edge.

All structures are immutable after construction and safe to share between
concurrent simulations.  This module performs no file I/O; the CLI parses
config files and calls :func:`from_mapping`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

KIB = 1024
MIB = 1024 * 1024


@dataclass(frozen=True, slots=True)
class TileSpec:
    """Per-tile compute resources."""

    matrix_ce_rows: int = 32
    matrix_ce_cols: int = 16
    matrix_setup_cycles: int = 85
    # Idle cycles between consecutive matrix-engine invocations on one tile:
    # models control-core reconfiguration and descriptor setup between runs.
    matrix_issue_gap_cycles: int = 256
    vector_lanes_flop_per_cycle: int = 128
    l1_capacity: int = 384 * KIB
    l1_bandwidth: int = 512
    dma_channels: int = 2
    dma_setup_cycles: int = 16

    @property
    def matrix_peak_flop_per_cycle(self) -> int:
        # One FMA (2 FLOPs) per CE per cycle.
        return 2 * self.matrix_ce_rows * self.matrix_ce_cols


@dataclass(frozen=True, slots=True)
class NocSpec:
    """2D-mesh interconnect parameters."""

    mesh_x: int = 32
    mesh_y: int = 32
    link_bytes_per_cycle: float = 128.0
    hop_latency: int = 1
    hw_collectives_enabled: bool = True
    sync_barrier_cost: int = 64


@dataclass(frozen=True, slots=True)
class HbmSpec:
    """HBM channel array on one mesh edge."""

    num_channels: int = 32
    channel_bytes_per_cycle: float = 64.767
    access_latency: int = 200
    edge: str = "south"
    # 0 means capacity is not modeled (no residency checks).
    capacity_bytes: int = 0

    @property
    def bytes_per_cycle(self) -> float:
        return self.num_channels * self.channel_bytes_per_cycle


@dataclass(frozen=True, slots=True)
class ArchConfig:
    """Full single-chip accelerator description."""

    tile: TileSpec = field(default_factory=TileSpec)
    noc: NocSpec = field(default_factory=NocSpec)
    hbm: HbmSpec = field(default_factory=HbmSpec)
    frequency: float = 965e6
    dtype_bytes: int = 2

    @property
    def n_tiles(self) -> int:
        return self.noc.mesh_x * self.noc.mesh_y

    def hbm_channel_of(self, x: int, y: int) -> int:
        """Channel serving tile (x, y): column-striped, rows interleave when
        there are more channels than mesh columns.  The row index is
        XOR-folded so tiles vertically aligned at a power-of-two stride still
        spread over a column's channel group."""
        nch = self.hbm.num_channels
        per_col = max(1, nch // self.noc.mesh_x)
        fold = y ^ (y >> 4)
        fold ^= fold >> 2
        fold ^= fold >> 1
        return ((x % nch) * per_col + (fold % per_col)) % nch


@dataclass(frozen=True, slots=True)
class PeakSummary:
    """Closed-form peak quantities derived from an ArchConfig."""

    peak_flops: float
    peak_hbm_bytes_per_second: float
    tile_flop_per_cycle: int
    link_bytes_per_second: float


@dataclass(frozen=True, slots=True)
class ValidationResult:
    ok: bool
    violations: tuple[str, ...] = ()


def validate(config: ArchConfig) -> ValidationResult:
    """Check structural invariants; violations are returned as data."""
    v: list[str] = []
    t, n, h = config.tile, config.noc, config.hbm
    for name, val in (
        ("matrix_ce_rows", t.matrix_ce_rows),
        ("matrix_ce_cols", t.matrix_ce_cols),
        ("vector_lanes_flop_per_cycle", t.vector_lanes_flop_per_cycle),
        ("l1_bandwidth", t.l1_bandwidth),
        ("dma_channels", t.dma_channels),
        ("mesh_x", n.mesh_x),
        ("mesh_y", n.mesh_y),
        ("num_channels", h.num_channels),
    ):
        if val < 1:
            v.append(f"{name} >= 1")
    if t.l1_capacity < 64 * KIB:
        v.append("l1_capacity >= 64 KiB")
    if t.matrix_setup_cycles < 0:
        v.append("matrix_setup_cycles >= 0")
    if t.matrix_issue_gap_cycles < 0:
        v.append("matrix_issue_gap_cycles >= 0")
    if n.link_bytes_per_cycle <= 0:
        v.append("link_bytes_per_cycle > 0")
    if n.hop_latency < 1:
        v.append("hop_latency >= 1")
    if n.sync_barrier_cost < 0:
        v.append("sync_barrier_cost >= 0")
    if h.channel_bytes_per_cycle <= 0:
        v.append("channel_bytes_per_cycle > 0")
    if h.access_latency < 0:
        v.append("access_latency >= 0")
    if h.edge not in ("north", "south", "east", "west"):
        v.append("edge in {north, south, east, west}")
    if config.frequency <= 0:
        v.append("frequency > 0")
    if config.dtype_bytes < 1:
        v.append("dtype_bytes >= 1")
    return ValidationResult(ok=not v, violations=tuple(v))


def derive_peaks(config: ArchConfig) -> PeakSummary:
    """Pure closed-form peaks; identical configs give identical summaries."""
    tile_flops = config.tile.matrix_peak_flop_per_cycle
    return PeakSummary(
        peak_flops=config.n_tiles * tile_flops * config.frequency,
        peak_hbm_bytes_per_second=config.hbm.bytes_per_cycle * config.frequency,
        tile_flop_per_cycle=tile_flops,
        link_bytes_per_second=config.noc.link_bytes_per_cycle * config.frequency,
    )


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: Any, target_type: type) -> Any:
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in _BOOL_TRUE:
            return True
        if s in _BOOL_FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if target_type is int:
        # Accept "384 * 1024"-free plain ints and float-ish ints like "1e3".
        f = float(raw)
        i = int(f)
        if i != f:
            raise ValueError(f"not an integer: {raw!r}")
        return i
    if target_type is float:
        return float(raw)
    return str(raw)


def _build(cls: type, section: Mapping[str, Any], where: str) -> Any:
    kwargs = {}
    fields = {f: t for f, t in cls.__annotations__.items()}
    for key, raw in section.items():
        if key not in fields:
            raise ValueError(f"unknown key '{key}' in [{where}]")
        target = {"int": int, "float": float, "bool": bool, "str": str}[fields[key]]
        try:
            kwargs[key] = _coerce(raw, target)
        except ValueError as e:
            raise ValueError(f"bad value for '{key}' in [{where}]: {e}") from e
    return cls(**kwargs)


def from_mapping(mapping: Mapping[str, Mapping[str, Any]]) -> ArchConfig:
    """Build an ArchConfig from a nested mapping (e.g. a parsed INI file).

    Expected sections: [tile], [noc], [hbm], [chip] (frequency, dtype_bytes).
    Missing sections or keys fall back to reference defaults.
    """
    tile = _build(TileSpec, mapping.get("tile", {}), "tile")
    noc = _build(NocSpec, mapping.get("noc", {}), "noc")
    hbm = _build(HbmSpec, mapping.get("hbm", {}), "hbm")
    chip = mapping.get("chip", {})
    known = {"frequency", "dtype_bytes"}
    unknown = set(chip) - known
    if unknown:
        raise ValueError(f"unknown key '{sorted(unknown)[0]}' in [chip]")
    return ArchConfig(
        tile=tile,
        noc=noc,
        hbm=hbm,
        frequency=_coerce(chip.get("frequency", 965e6), float),
        dtype_bytes=_coerce(chip.get("dtype_bytes", 2), int),
    )
