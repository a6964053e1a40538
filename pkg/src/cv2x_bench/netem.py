"""Deterministic emulation of a dedicated 5G standalone cell pair.

The link is modeled as a fluid per-tick system: one tick spans a full TDD
pattern period (default DDDSU at 0.5 ms slots = 2.5 ms) and each direction
of each cell gets a bit budget per tick derived from its configured
capacity (the capacity figures already embed the uplink/downlink symbol
split).  Queued packets are drained against that budget and a packet is
delivered at the end of the tick in which its last bit is served, so an
uncongested packet picks up at most one tick of slot-alignment delay.

Two scheduler disciplines are provided:

  BL  best-effort baseline: all flows in a direction share one logical
      pipe, served strictly in arrival order (no QoS differentiation), so
      overload traffic queues ahead of application packets.
  AP  absolute priority: application-class queues are drained first, and
      whatever budget remains is split max-min fair across background
      flows.

Reliable flows (the TCP-carried application stream) never drop; droppable
flows (UDP background load) tail-drop on enqueue above their queue cap.
Conservation, work-conservation, priority-dominance, and cap invariants
are asserted on every tick and raise InvariantViolation when broken.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable


class SlotKind(Enum):
    DOWNLINK = "D"
    UPLINK = "U"
    SPECIAL = "S"


class Direction(Enum):
    UPLINK = "UL"
    DOWNLINK = "DL"


class PriorityClass(Enum):
    APPLICATION = "application"
    BACKGROUND = "background"


class Reliability(Enum):
    RELIABLE = "reliable"
    DROPPABLE = "droppable"


class SchedulerKind(Enum):
    BL = "BL"
    AP = "AP"


class InvariantViolation(RuntimeError):
    """A per-tick scheduler invariant (conservation, work conservation,
    priority dominance, or queue cap) was broken."""


@dataclass(frozen=True)
class TddPattern:
    """TDD slot structure; the default is three downlink slots, one special
    slot (10 downlink + 2 uplink symbols of 14), and one uplink slot."""

    slots: tuple[SlotKind, ...] = (SlotKind.DOWNLINK, SlotKind.DOWNLINK,
                                   SlotKind.DOWNLINK, SlotKind.SPECIAL,
                                   SlotKind.UPLINK)
    slot_duration_ns: int = 500_000
    special_dl_symbols: int = 10
    special_ul_symbols: int = 2
    symbols_per_slot: int = 14

    def __post_init__(self) -> None:
        if not self.slots:
            raise ValueError("pattern needs at least one slot")
        if self.slot_duration_ns <= 0:
            raise ValueError("slot duration must be positive")
        if self.special_dl_symbols + self.special_ul_symbols > self.symbols_per_slot:
            raise ValueError("special slot symbol split exceeds symbols per slot")

    @classmethod
    def from_string(cls, pattern: str, slot_duration_ns: int = 500_000) -> "TddPattern":
        try:
            slots = tuple(SlotKind(ch) for ch in pattern.upper())
        except ValueError:
            raise ValueError(f"pattern {pattern!r} may only contain D, U, S") from None
        return cls(slots=slots, slot_duration_ns=slot_duration_ns)

    @property
    def period_ns(self) -> int:
        return len(self.slots) * self.slot_duration_ns

    def direction_symbol_ratio(self) -> float:
        """Downlink-to-uplink symbol ratio over one pattern period."""
        dl = ul = 0
        for kind in self.slots:
            if kind is SlotKind.DOWNLINK:
                dl += self.symbols_per_slot
            elif kind is SlotKind.UPLINK:
                ul += self.symbols_per_slot
            else:
                dl += self.special_dl_symbols
                ul += self.special_ul_symbols
        if ul == 0:
            raise ValueError("pattern has no uplink symbols")
        return dl / ul


def slot_kind_at(pattern: TddPattern, time_ns: int) -> tuple[SlotKind, float, float]:
    """Slot kind at a given time plus the usable (dl, ul) symbol fractions."""
    if time_ns < 0:
        raise ValueError("time must be nonnegative")
    index = (time_ns // pattern.slot_duration_ns) % len(pattern.slots)
    kind = pattern.slots[index]
    if kind is SlotKind.DOWNLINK:
        return kind, 1.0, 0.0
    if kind is SlotKind.UPLINK:
        return kind, 0.0, 1.0
    return (kind,
            pattern.special_dl_symbols / pattern.symbols_per_slot,
            pattern.special_ul_symbols / pattern.symbols_per_slot)


@dataclass(frozen=True)
class CellConfig:
    cell_id: int
    position: tuple[float, float] = (0.0, 0.0)
    ul_capacity_bps: int = 40_000_000
    dl_capacity_bps: int = 130_000_000

    def __post_init__(self) -> None:
        if self.ul_capacity_bps <= 0 or self.dl_capacity_bps <= 0:
            raise ValueError("cell capacities must be strictly positive")


def tick_budget(cell: CellConfig, pattern: TddPattern,
                tick_interval_ns: int) -> tuple[int, int]:
    """Per-tick (uplink, downlink) bit budgets for one cell.

    The direction capacities already embed the TDD symbol split, so the
    budget is simply capacity x tick length.
    """
    ul = (cell.ul_capacity_bps * tick_interval_ns) // 1_000_000_000
    dl = (cell.dl_capacity_bps * tick_interval_ns) // 1_000_000_000
    return ul, dl


@dataclass(frozen=True)
class FlowSpec:
    flow_id: str
    direction: Direction
    priority_class: PriorityClass
    reliability: Reliability
    queue_cap_bytes: int = 1_000_000

    def __post_init__(self) -> None:
        if (self.reliability is Reliability.RELIABLE
                and self.priority_class is not PriorityClass.APPLICATION):
            raise ValueError(
                f"flow {self.flow_id}: only application-class flows may be reliable")
        if self.reliability is Reliability.DROPPABLE and self.queue_cap_bytes <= 0:
            raise ValueError(f"flow {self.flow_id}: droppable flows need a positive queue cap")


@dataclass(frozen=True)
class HandoverEvent:
    time_ns: int
    from_cell: int
    to_cell: int
    interruption_ns: int = 50_000_000


@dataclass(frozen=True)
class MobilityRoute:
    """Piecewise-linear vehicle trajectory: (time_ns, x_m, y_m) waypoints."""

    waypoints: tuple[tuple[int, float, float], ...]

    def __post_init__(self) -> None:
        if not self.waypoints:
            raise ValueError("route needs at least one waypoint")
        times = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")

    @property
    def start_ns(self) -> int:
        return self.waypoints[0][0]

    @property
    def end_ns(self) -> int:
        return self.waypoints[-1][0]

    def position_at(self, time_ns: int) -> tuple[float, float]:
        pts = self.waypoints
        if time_ns <= pts[0][0]:
            return pts[0][1], pts[0][2]
        if time_ns >= pts[-1][0]:
            return pts[-1][1], pts[-1][2]
        for (t0, x0, y0), (t1, x1, y1) in zip(pts, pts[1:]):
            if t0 <= time_ns <= t1:
                f = (time_ns - t0) / (t1 - t0)
                return x0 + f * (x1 - x0), y0 + f * (y1 - y0)
        raise AssertionError("unreachable")


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def apply_handover(route: MobilityRoute, cells: list[CellConfig],
                   hysteresis_m: float = 5.0,
                   interruption_ns: int = 50_000_000,
                   sample_ns: int = 2_500_000) -> list[HandoverEvent]:
    """Compute the handover events a vehicle following the route triggers.

    The serving cell starts as the nearest cell and switches only once
    another cell is closer by more than the hysteresis margin.  The route
    is sampled on the tick grid, so an event time is the first sampled
    instant at which the switch condition holds.
    """
    if len(cells) < 2:
        raise ValueError("handover needs at least two cells")
    if sample_ns <= 0:
        raise ValueError("sample interval must be positive")
    start_pos = route.position_at(route.start_ns)
    serving = min(cells, key=lambda c: _distance(start_pos, c.position))
    events: list[HandoverEvent] = []
    t = route.start_ns
    while t <= route.end_ns:
        pos = route.position_at(t)
        nearest = min(cells, key=lambda c: _distance(pos, c.position))
        if (nearest.cell_id != serving.cell_id
                and _distance(pos, nearest.position)
                < _distance(pos, serving.position) - hysteresis_m):
            events.append(HandoverEvent(time_ns=t, from_cell=serving.cell_id,
                                        to_cell=nearest.cell_id,
                                        interruption_ns=interruption_ns))
            serving = nearest
        t += sample_ns
    return events


def initial_serving_cell(route: MobilityRoute, cells: list[CellConfig]) -> int:
    pos = route.position_at(route.start_ns)
    return min(cells, key=lambda c: _distance(pos, c.position)).cell_id


@dataclass
class QueuedPacket:
    size_bits: int
    remaining_bits: int
    enqueue_ns: int
    arrival_idx: int
    meta: dict | None = None


@dataclass(frozen=True)
class Delivery:
    flow_id: str
    size_bits: int
    enqueue_ns: int
    delivery_ns: int
    cell_id: int
    meta: dict | None = None


class FlowQueue:
    """One flow's queue plus its cumulative accounting counters."""

    def __init__(self, spec: FlowSpec, cell_id: int | None = None,
                 mobile: bool = False, suspendable: bool = False) -> None:
        if cell_id is None and not mobile:
            raise ValueError(f"flow {spec.flow_id}: fixed flows need a cell")
        self.spec = spec
        self.cell_id = cell_id
        self.mobile = mobile
        self.suspendable = suspendable
        self.packets: deque[QueuedPacket] = deque()
        self.backlog_bits = 0
        self.offered_bits = 0
        self.served_bits = 0
        self.dropped_bits = 0

    def enqueue(self, size_bits: int, time_ns: int, arrival_idx: int,
                meta: dict | None = None) -> bool:
        self.offered_bits += size_bits
        if (self.spec.reliability is Reliability.DROPPABLE
                and self.backlog_bits + size_bits > self.spec.queue_cap_bytes * 8):
            self.dropped_bits += size_bits
            return False
        self.packets.append(QueuedPacket(size_bits=size_bits,
                                         remaining_bits=size_bits,
                                         enqueue_ns=time_ns,
                                         arrival_idx=arrival_idx,
                                         meta=meta))
        self.backlog_bits += size_bits
        return True

    def serve_bits(self, bits: int) -> tuple[int, list[QueuedPacket]]:
        """Drain up to `bits` from the head of the queue; returns the bits
        actually served and the packets completed in the process."""
        served = 0
        done: list[QueuedPacket] = []
        while bits > 0 and self.packets:
            pkt = self.packets[0]
            take = min(bits, pkt.remaining_bits)
            pkt.remaining_bits -= take
            bits -= take
            served += take
            if pkt.remaining_bits == 0:
                done.append(self.packets.popleft())
        self.backlog_bits -= served
        self.served_bits += served
        return served, done


def _serve_fifo(queues: list[FlowQueue], budget: int,
                completed: list[tuple[FlowQueue, QueuedPacket]]) -> int:
    """Serve queues in global arrival order (one best-effort pipe)."""
    served_total = 0
    while budget > 0:
        head: FlowQueue | None = None
        for q in queues:
            if q.packets and (head is None
                              or q.packets[0].arrival_idx < head.packets[0].arrival_idx):
                head = q
        if head is None:
            break
        take = min(budget, head.packets[0].remaining_bits)
        served, done = head.serve_bits(take)
        budget -= served
        served_total += served
        completed.extend((head, pkt) for pkt in done)
    return served_total


def _serve_waterfill(queues: list[FlowQueue], budget: int,
                     completed: list[tuple[FlowQueue, QueuedPacket]]) -> int:
    """Max-min fair (byte-fair round-robin) split of a budget across flows."""
    served_total = 0
    active = [q for q in queues if q.backlog_bits > 0]
    while budget > 0 and active:
        share = budget // len(active)
        if share == 0:
            for q in active:
                served, done = q.serve_bits(min(budget, q.backlog_bits))
                budget -= served
                served_total += served
                completed.extend((q, pkt) for pkt in done)
                if budget == 0:
                    break
            break
        progressed = 0
        for q in active:
            served, done = q.serve_bits(min(share, q.backlog_bits))
            budget -= served
            served_total += served
            progressed += served
            completed.extend((q, pkt) for pkt in done)
        if progressed == 0:
            break
        active = [q for q in active if q.backlog_bits > 0]
    return served_total


class LinkSimulator:
    """Cells, flows, queues, and the per-tick scheduler."""

    def __init__(self, cells: list[CellConfig], pattern: TddPattern | None = None,
                 scheduler: SchedulerKind = SchedulerKind.BL,
                 tick_ns: int | None = None) -> None:
        if not cells:
            raise ValueError("need at least one cell")
        self.pattern = pattern or TddPattern()
        self.tick_ns = tick_ns if tick_ns is not None else self.pattern.period_ns
        self.scheduler = scheduler
        self.cells: dict[int, CellConfig] = {c.cell_id: c for c in cells}
        if len(self.cells) != len(cells):
            raise ValueError("cell ids must be unique")
        self.flows: dict[str, FlowQueue] = {}
        self._arrival_counter = 0
        default_cell = cells[0].cell_id
        self._cell_switch_times: list[int] = [0]
        self._cell_by_switch: list[int] = [default_cell]
        self._suspensions: list[tuple[int, int]] = []

    def add_flow(self, spec: FlowSpec, cell_id: int | None = None,
                 mobile: bool = False, suspendable: bool = False) -> FlowQueue:
        if spec.flow_id in self.flows:
            raise ValueError(f"duplicate flow id {spec.flow_id}")
        if cell_id is not None and cell_id not in self.cells:
            raise ValueError(f"unknown cell {cell_id}")
        q = FlowQueue(spec, cell_id=cell_id, mobile=mobile, suspendable=suspendable)
        self.flows[spec.flow_id] = q
        return q

    def set_mobility(self, initial_cell: int,
                     events: Iterable[HandoverEvent]) -> None:
        """Install the mobile terminal's serving-cell timeline and the
        service interruption windows implied by the handover events."""
        self._cell_switch_times = [0]
        self._cell_by_switch = [initial_cell]
        self._suspensions = []
        for ev in sorted(events, key=lambda e: e.time_ns):
            self._cell_switch_times.append(ev.time_ns)
            self._cell_by_switch.append(ev.to_cell)
            self._suspensions.append((ev.time_ns, ev.time_ns + ev.interruption_ns))

    def serving_cell(self, time_ns: int) -> int:
        idx = bisect_right(self._cell_switch_times, time_ns) - 1
        return self._cell_by_switch[idx]

    def _suspended(self, tick_start: int, tick_end: int) -> bool:
        return any(tick_start < end and tick_end > start
                   for start, end in self._suspensions)

    def enqueue(self, flow_id: str, size_bits: int, time_ns: int,
                meta: dict | None = None) -> bool:
        if size_bits <= 0:
            raise ValueError("packet size must be positive")
        q = self.flows[flow_id]
        self._arrival_counter += 1
        return q.enqueue(size_bits, time_ns, self._arrival_counter, meta)

    def _flow_cell(self, q: FlowQueue, tick_start: int) -> int:
        if q.mobile:
            return self.serving_cell(tick_start)
        assert q.cell_id is not None
        return q.cell_id

    def run_tick(self, tick_start: int) -> list[Delivery]:
        tick_end = tick_start + self.tick_ns
        suspended = self._suspended(tick_start, tick_end)
        deliveries: list[Delivery] = []
        for cell_id, cell in self.cells.items():
            ul_budget, dl_budget = tick_budget(cell, self.pattern, self.tick_ns)
            for direction, budget in ((Direction.UPLINK, ul_budget),
                                      (Direction.DOWNLINK, dl_budget)):
                eligible = [q for q in self.flows.values()
                            if q.spec.direction is direction
                            and self._flow_cell(q, tick_start) == cell_id
                            and not (suspended and q.suspendable)]
                if not eligible:
                    continue
                completed: list[tuple[FlowQueue, QueuedPacket]] = []
                if self.scheduler is SchedulerKind.AP:
                    app = [q for q in eligible
                           if q.spec.priority_class is PriorityClass.APPLICATION]
                    bg = [q for q in eligible
                          if q.spec.priority_class is PriorityClass.BACKGROUND]
                    served = _serve_fifo(app, budget, completed)
                    bg_served = _serve_waterfill(bg, budget - served, completed)
                    served += bg_served
                    if bg_served > 0 and any(q.backlog_bits for q in app):
                        raise InvariantViolation(
                            f"priority dominance broken in cell {cell_id} {direction.value}")
                else:
                    served = _serve_fifo(eligible, budget, completed)
                if served > budget:
                    raise InvariantViolation(
                        f"served {served} bits over budget {budget} "
                        f"in cell {cell_id} {direction.value}")
                if served < budget and any(q.backlog_bits for q in eligible):
                    raise InvariantViolation(
                        f"work conservation broken in cell {cell_id} {direction.value}")
                for q, pkt in completed:
                    deliveries.append(Delivery(flow_id=q.spec.flow_id,
                                               size_bits=pkt.size_bits,
                                               enqueue_ns=pkt.enqueue_ns,
                                               delivery_ns=tick_end,
                                               cell_id=cell_id,
                                               meta=pkt.meta))
        for q in self.flows.values():
            if q.offered_bits - q.served_bits - q.dropped_bits != q.backlog_bits:
                raise InvariantViolation(
                    f"conservation broken for flow {q.spec.flow_id}")
            if (q.spec.reliability is Reliability.DROPPABLE
                    and q.backlog_bits > q.spec.queue_cap_bytes * 8):
                raise InvariantViolation(
                    f"queue cap exceeded for flow {q.spec.flow_id}")
        return deliveries


class SimWorld:
    """Single-threaded deterministic event loop around a LinkSimulator.

    Time advances tick by tick.  Within a tick, all timed events falling
    before the tick's end fire in (time, insertion) order; constant-bitrate
    sources inject their packet arrivals for the window first, then queues
    are served and deliveries dispatched to the handler.  Two worlds built
    from the same configuration and seeds produce identical event logs.
    """

    def __init__(self, link: LinkSimulator, base_delay_ns: int = 2_000_000,
                 record_events: bool = False, start_ns: int = 0) -> None:
        self.link = link
        self.tick_ns = link.tick_ns
        self.base_delay_ns = base_delay_ns
        self.record_events = record_events
        self.start_ns = start_ns
        self.now_ns = start_ns
        self.event_log: list[str] = []
        self.on_delivery: Callable[[Delivery], None] | None = None
        self.cbr_sources: list = []  # objects with .flow_id and .arrivals(t0, t1)
        self._heap: list[tuple[int, int, Callable[[int], None]]] = []
        self._heap_seq = 0

    def schedule(self, time_ns: int, callback: Callable[[int], None]) -> None:
        if time_ns < self.now_ns:
            raise ValueError(f"cannot schedule event at {time_ns} before now {self.now_ns}")
        self._heap_seq += 1
        heapq.heappush(self._heap, (time_ns, self._heap_seq, callback))

    def _make_bg_enqueue(self, flow_id: str, size_bits: int) -> Callable[[int], None]:
        def enqueue(now_ns: int) -> None:
            self.link.enqueue(flow_id, size_bits, now_ns,
                              meta={"kind": "background"})
        return enqueue

    def run_tick(self) -> list[Delivery]:
        tick_start = self.now_ns
        tick_end = tick_start + self.tick_ns
        if self.record_events:
            self.event_log.append(f"tick {tick_start}")
        # CBR arrivals go through the heap so queue order follows true
        # arrival time, interleaved with agent events.
        for src in self.cbr_sources:
            for arrival_ns, size_bits in src.arrivals(tick_start, tick_end):
                self.schedule(arrival_ns, self._make_bg_enqueue(src.flow_id,
                                                                size_bits))
        while self._heap and self._heap[0][0] < tick_end:
            time_ns, _, callback = heapq.heappop(self._heap)
            callback(time_ns)
        deliveries = self.link.run_tick(tick_start)
        for d in deliveries:
            if self.record_events:
                self.event_log.append(
                    f"deliver flow={d.flow_id} bits={d.size_bits} "
                    f"enq={d.enqueue_ns} t={d.delivery_ns} cell={d.cell_id}")
            if self.on_delivery is not None:
                self.on_delivery(d)
        self.now_ns = tick_end
        return deliveries

    def run_until(self, until_ns: int) -> None:
        while self.now_ns < until_ns:
            self.run_tick()

    @property
    def pending_events(self) -> int:
        return len(self._heap)


def step_simulation(world: SimWorld, until_ns: int) -> list[str]:
    """Advance the world to the given time and return its event log."""
    world.run_until(until_ns)
    return world.event_log
