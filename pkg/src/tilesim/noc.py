"""2D-mesh NoC model: XY routing, link occupancy, and collective cost forms.

Three collective strategies are modeled for row/column multicast and
reduction:

* ``HW``     - flit-level in-fabric replication/combination: one transfer
  pipelined along the span, one hop of added latency per extra destination.
* ``SW_SEQ`` - the root unicasts to each member in turn.
* ``SW_TREE``- recursive doubling; every step pays a synchronization barrier.

Software reductions additionally pay a local vector add (read two operands,
write one: 3 bytes of L1 traffic per byte reduced) per received operand.
Hardware reduction combines in the routers at no added cycle cost.

Contention is modeled at whole-transfer link-occupancy granularity: a
transfer (or collective) reserves every link it spans for its duration, and
overlapping requests serialize per link in grant order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

from .arch import NocSpec, TileSpec


class TileCoord(NamedTuple):
    x: int
    y: int


Link = tuple[TileCoord, TileCoord]


class CollectiveKind(str, Enum):
    MULTICAST = "multicast"
    REDUCE_SUM = "reduce_sum"
    REDUCE_MAX = "reduce_max"


class Axis(str, Enum):
    ROW = "row"
    COLUMN = "column"


class Strategy(str, Enum):
    SW_SEQ = "SW_Seq"
    SW_TREE = "SW_Tree"
    HW = "HW"


@dataclass(frozen=True, slots=True)
class CollectiveRequest:
    kind: CollectiveKind
    axis: Axis
    strategy: Strategy
    root: TileCoord
    size: int
    group_extent: int

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError("collective size must be > 0")
        if self.group_extent < 1:
            raise ValueError("group_extent must be >= 1")


def route_xy(src: TileCoord, dst: TileCoord) -> list[Link]:
    """Dimension-ordered (X then Y) shortest path as directed links."""
    links: list[Link] = []
    x, y = src
    step = 1 if dst.x > x else -1
    while x != dst.x:
        links.append((TileCoord(x, y), TileCoord(x + step, y)))
        x += step
    step = 1 if dst.y > y else -1
    while y != dst.y:
        links.append((TileCoord(x, y), TileCoord(x, y + step)))
        y += step
    return links


def _tree_steps(extent: int) -> list[int]:
    """Hop distance per recursive-doubling step; distances sum to extent-1."""
    steps: list[int] = []
    covered = 1
    while covered < extent:
        steps.append(min(covered, extent - covered))
        covered = min(2 * covered, extent)
    return steps


def collective_time(req: CollectiveRequest, noc: NocSpec, tile: TileSpec) -> float:
    """Uncontended latency of one row/column collective (cycles)."""
    e = req.group_extent
    if e == 1:
        return 0.0
    axis_extent = noc.mesh_x if req.axis is Axis.ROW else noc.mesh_y
    if e > axis_extent:
        raise ValueError(f"group_extent {e} exceeds mesh extent {axis_extent}")
    xfer = req.size / noc.link_bytes_per_cycle
    reducing = req.kind is not CollectiveKind.MULTICAST
    add = 3.0 * req.size / tile.l1_bandwidth  # read 2 operands, write 1

    if req.strategy is Strategy.HW:
        # One flit-pipelined pass down the span; in-router combine is free.
        return xfer + (e - 1) * noc.hop_latency
    if req.strategy is Strategy.SW_SEQ:
        t = (e - 1) * xfer + noc.hop_latency * e * (e - 1) // 2
        if reducing:
            t += (e - 1) * add
        return t
    # SW_TREE: ceil(log2 e) barrier-separated steps.
    steps = _tree_steps(e)
    t = len(steps) * (xfer + noc.sync_barrier_cost) + noc.hop_latency * sum(steps)
    if reducing:
        t += len(steps) * add
    return t


def span_links(
    root: TileCoord, axis: Axis, extent: int, origin: int, toward_root: bool
) -> list[Link]:
    """Directed links of a contiguous row/column segment starting at
    ``origin`` along ``axis``; outward from the root for multicast,
    inward for reductions."""
    if axis is Axis.ROW:
        members = [TileCoord(origin + i, root.y) for i in range(extent)]
    else:
        members = [TileCoord(root.x, origin + i) for i in range(extent)]
    links: set[Link] = set()
    for m in members:
        if m == root:
            continue
        path = route_xy(m, root) if toward_root else route_xy(root, m)
        links.update(path)
    return sorted(links)


@dataclass(slots=True)
class LinkTimeline:
    """Per-directed-link next-free times.

    Reservations are granted in call order and never overlap on a link; a
    debug mode records intervals so the non-overlap invariant can be audited.
    """

    noc: NocSpec
    record_intervals: bool = False
    free: dict[Link, float] = field(default_factory=dict)
    intervals: dict[Link, list[tuple[float, float]]] = field(default_factory=dict)

    def _reserve(self, link: Link, grant: float, duration: float) -> None:
        self.free[link] = grant + duration
        if self.record_intervals:
            self.intervals.setdefault(link, []).append((grant, grant + duration))

    def reserve_path(self, path: list[Link], start: float, size: int) -> float:
        """Unicast over an explicit path: each link is occupied for the burst,
        serialized after prior reservations; the head flit pays one
        hop_latency per hop."""
        if not path:
            return start
        occupancy = size / self.noc.link_bytes_per_cycle
        tail = start
        for link in path:
            grant = max(start, self.free.get(link, 0.0))
            self._reserve(link, grant, occupancy)
            tail = max(tail, grant + occupancy)
        return tail + len(path) * self.noc.hop_latency

    def reserve_span(self, links: list[Link], start: float, duration: float) -> float:
        """Collective over a link set: a coordinated grant once every span
        link is free, all links held for the collective's duration."""
        if not links or duration <= 0:
            return start + max(duration, 0.0)
        grant = start
        for link in links:
            grant = max(grant, self.free.get(link, 0.0))
        for link in links:
            self._reserve(link, grant, duration)
        return grant + duration

    def assert_no_overlap(self) -> None:
        for link, ivals in self.intervals.items():
            prev_end = -math.inf
            for s, e in sorted(ivals):
                if s < prev_end - 1e-9:
                    raise AssertionError(f"overlapping reservations on {link}")
                prev_end = e


def schedule_transfer(
    timeline: LinkTimeline, path: list[Link], start: float, size: int
) -> float:
    """Reserve a unicast transfer; returns its completion cycle."""
    if start < 0:
        raise ValueError("start must be >= 0")
    return timeline.reserve_path(path, start, size)
