"""Link emulator tests: TDD structure, budgets, scheduling disciplines,
queue invariants, handover geometry, and event-loop determinism."""

from __future__ import annotations

import pytest

from cv2x_bench.loadgen import CbrPacketSource
from cv2x_bench.netem import (CellConfig, Direction, FlowSpec, HandoverEvent,
                              InvariantViolation, LinkSimulator, MobilityRoute,
                              PriorityClass, Reliability, SchedulerKind,
                              SimWorld, SlotKind, TddPattern, apply_handover,
                              initial_serving_cell, slot_kind_at,
                              step_simulation, tick_budget)

MS = 1_000_000


def default_pattern() -> TddPattern:
    return TddPattern()


def test_pattern_defaults():
    pattern = default_pattern()
    assert [s.value for s in pattern.slots] == ["D", "D", "D", "S", "U"]
    assert pattern.period_ns == 2_500_000
    assert TddPattern.from_string("DDDSU") == pattern


def test_pattern_rejects_bad_characters():
    with pytest.raises(ValueError):
        TddPattern.from_string("DDXSU")


def test_slot_kind_at_pattern_positions():
    pattern = default_pattern()
    kind, dl, ul = slot_kind_at(pattern, 0)
    assert kind is SlotKind.DOWNLINK and (dl, ul) == (1.0, 0.0)
    kind, dl, ul = slot_kind_at(pattern, 2_000_000)
    assert kind is SlotKind.UPLINK and (dl, ul) == (0.0, 1.0)
    kind, dl, ul = slot_kind_at(pattern, 1_500_000)
    assert kind is SlotKind.SPECIAL
    assert dl == pytest.approx(10 / 14)
    assert ul == pytest.approx(2 / 14)
    # wraps around the period
    assert slot_kind_at(pattern, 2_500_000)[0] is SlotKind.DOWNLINK


def test_direction_symbol_ratio_and_derived_downlink_capacity():
    pattern = default_pattern()
    # three full DL slots + 10 special symbols over one UL slot + 2 symbols
    assert pattern.direction_symbol_ratio() == pytest.approx(3.25)
    assert int(40_000_000 * pattern.direction_symbol_ratio()) == 130_000_000


def test_tick_budget_defaults():
    cell = CellConfig(cell_id=1)
    pattern = default_pattern()
    assert tick_budget(cell, pattern, pattern.period_ns) == (100_000, 325_000)
    assert tick_budget(cell, pattern, 0) == (0, 0)


def _one_cell_link(scheduler: SchedulerKind) -> LinkSimulator:
    return LinkSimulator([CellConfig(cell_id=1)], scheduler=scheduler)


def _app_spec(flow_id="app", direction=Direction.UPLINK) -> FlowSpec:
    return FlowSpec(flow_id, direction, PriorityClass.APPLICATION,
                    Reliability.RELIABLE)


def _bg_spec(flow_id="bg", direction=Direction.UPLINK,
             cap_bytes=10_000_000) -> FlowSpec:
    return FlowSpec(flow_id, direction, PriorityClass.BACKGROUND,
                    Reliability.DROPPABLE, queue_cap_bytes=cap_bytes)


def test_background_flows_must_be_droppable():
    with pytest.raises(ValueError):
        FlowSpec("x", Direction.UPLINK, PriorityClass.BACKGROUND,
                 Reliability.RELIABLE)


def test_ap_serves_application_first():
    link = _one_cell_link(SchedulerKind.AP)
    link.add_flow(_app_spec(), cell_id=1)
    link.add_flow(_bg_spec(), cell_id=1)
    link.enqueue("bg", 1_000_000, 0)
    link.enqueue("app", 16_000, 0)
    deliveries = link.run_tick(0)
    app_q, bg_q = link.flows["app"], link.flows["bg"]
    assert app_q.served_bits == 16_000 and app_q.backlog_bits == 0
    assert bg_q.served_bits == 84_000
    assert {d.flow_id for d in deliveries} == {"app"}


def test_ap_background_residual_split_fairly():
    link = _one_cell_link(SchedulerKind.AP)
    link.add_flow(_app_spec(), cell_id=1)
    link.add_flow(_bg_spec("bg0"), cell_id=1)
    link.add_flow(_bg_spec("bg1"), cell_id=1)
    link.enqueue("bg0", 1_000_000, 0)
    link.enqueue("bg1", 1_000_000, 0)
    link.enqueue("app", 16_000, 0)
    link.run_tick(0)
    assert link.flows["app"].served_bits == 16_000
    assert link.flows["bg0"].served_bits == 42_000
    assert link.flows["bg1"].served_bits == 42_000


def test_bl_work_conserving_when_application_arrives_first():
    # the application packet is older than the backlog, so it drains fully
    # and the residual budget goes to the background queue
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_app_spec(), cell_id=1)
    link.add_flow(_bg_spec(), cell_id=1)
    link.enqueue("app", 16_000, 0)
    link.enqueue("bg", 1_000_000, 0)
    link.run_tick(0)
    assert link.flows["app"].served_bits == 16_000
    assert link.flows["bg"].served_bits == 84_000


def test_bl_is_arrival_ordered_best_effort():
    # under BL there is no QoS differentiation: earlier background bytes
    # delay the application packet
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_app_spec(), cell_id=1)
    link.add_flow(_bg_spec(), cell_id=1)
    link.enqueue("bg", 150_000, 0)
    link.enqueue("app", 16_000, 0)
    deliveries = link.run_tick(0)
    assert link.flows["bg"].served_bits == 100_000
    assert link.flows["app"].served_bits == 0
    assert deliveries == []
    deliveries = link.run_tick(link.tick_ns)
    assert {d.flow_id for d in deliveries} == {"bg", "app"}


def test_bl_overload_backlog_grows_at_excess_rate_until_cap():
    # two background flows each offering 40 Mbps into 40 Mbps of capacity:
    # the aggregate backlog grows by one tick budget per tick (40 Mbps)
    # until the per-flow caps engage
    cap_bytes = 125_000  # 1 Mbit per flow
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_bg_spec("bg0", cap_bytes=cap_bytes), cell_id=1)
    link.add_flow(_bg_spec("bg1", cap_bytes=cap_bytes), cell_id=1)
    per_tick_per_flow = 100_000  # 40 Mbps x 2.5 ms
    growth = []
    for tick in range(40):
        t = tick * link.tick_ns
        for flow in ("bg0", "bg1"):
            link.enqueue(flow, per_tick_per_flow, t)
        link.run_tick(t)
        growth.append(link.flows["bg0"].backlog_bits
                      + link.flows["bg1"].backlog_bits)
    deltas = [b - a for a, b in zip(growth, growth[1:])]
    assert deltas[0] == 100_000  # 40 Mbps of growth while below cap
    assert all(d == 100_000 for d in deltas[:8])
    assert growth[-1] <= 2 * cap_bytes * 8
    assert link.flows["bg0"].dropped_bits > 0


def test_droppable_tail_drop_on_enqueue_only():
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_bg_spec(cap_bytes=10_000), cell_id=1)
    assert link.enqueue("bg", 60_000, 0) is True
    assert link.enqueue("bg", 60_000, 0) is False  # would exceed 80k bit cap
    q = link.flows["bg"]
    assert q.backlog_bits == 60_000
    assert q.dropped_bits == 60_000
    assert q.offered_bits == 120_000


def test_reliable_flow_never_drops():
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_app_spec(), cell_id=1)
    for i in range(100):
        assert link.enqueue("app", 500_000, 0) is True
    assert link.flows["app"].dropped_bits == 0


def test_conservation_counters_hold_across_ticks():
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_app_spec(), cell_id=1)
    link.add_flow(_bg_spec(cap_bytes=50_000), cell_id=1)
    for tick in range(50):
        t = tick * link.tick_ns
        link.enqueue("app", 30_000, t)
        link.enqueue("bg", 90_000, t)
        link.run_tick(t)  # raises InvariantViolation on any breakage
    for q in link.flows.values():
        assert q.offered_bits - q.served_bits - q.dropped_bits == q.backlog_bits


def test_invariant_checks_are_live():
    link = _one_cell_link(SchedulerKind.BL)
    link.add_flow(_app_spec(), cell_id=1)
    link.enqueue("app", 10_000, 0)
    link.flows["app"].backlog_bits += 1  # corrupt the accounting
    with pytest.raises(InvariantViolation):
        link.run_tick(0)


# -- handover ---------------------------------------------------------------

TWO_CELLS = [CellConfig(cell_id=1, position=(0.0, 0.0)),
             CellConfig(cell_id=2, position=(200.0, 0.0))]


def test_route_near_one_cell_yields_no_events():
    route = MobilityRoute(((0, 10.0, 0.0), (10_000_000_000, 20.0, 0.0)))
    assert apply_handover(route, TWO_CELLS) == []


def test_straight_route_emits_one_event_at_hysteresis_crossing():
    # vehicle drives 200 m from cell 2 toward cell 1 at 1 m/s; the switch
    # condition dist(c1) < dist(c2) - 5 m first holds past s = 102.5 m, so
    # with 2.5 ms route sampling the event lands at 102.5025 s
    route = MobilityRoute(((0, 200.0, 0.0), (200_000_000_000, 0.0, 0.0)))
    events = apply_handover(route, TWO_CELLS, hysteresis_m=5.0,
                            interruption_ns=50 * MS, sample_ns=2_500_000)
    assert len(events) == 1
    ev = events[0]
    assert (ev.from_cell, ev.to_cell) == (2, 1)
    assert ev.time_ns == 102_502_500_000
    assert ev.interruption_ns == 50 * MS
    assert initial_serving_cell(route, TWO_CELLS) == 2


def test_empty_route_rejected():
    with pytest.raises(ValueError):
        MobilityRoute(())


def test_no_service_to_suspended_terminal_inside_window():
    link = LinkSimulator(TWO_CELLS, scheduler=SchedulerKind.BL)
    link.add_flow(_app_spec("dl", Direction.DOWNLINK), mobile=True,
                  suspendable=True)
    event = HandoverEvent(time_ns=10 * link.tick_ns, from_cell=2, to_cell=1,
                          interruption_ns=20 * link.tick_ns)
    link.set_mobility(2, [event])
    window_end = event.time_ns + event.interruption_ns
    deliveries = []
    for tick in range(40):
        if tick == 11:
            link.enqueue("dl", 8_000, tick * link.tick_ns)
        deliveries += link.run_tick(tick * link.tick_ns)
    assert len(deliveries) == 1
    assert deliveries[0].delivery_ns == window_end + link.tick_ns
    assert deliveries[0].cell_id == 1  # served by the new cell


def test_serving_cell_timeline():
    link = LinkSimulator(TWO_CELLS)
    link.set_mobility(2, [HandoverEvent(time_ns=1000, from_cell=2, to_cell=1)])
    assert link.serving_cell(0) == 2
    assert link.serving_cell(999) == 2
    assert link.serving_cell(1000) == 1
    assert link.serving_cell(5000) == 1


# -- event loop -------------------------------------------------------------

def test_empty_world_log_contains_only_tick_markers():
    link = LinkSimulator([CellConfig(cell_id=1)])
    world = SimWorld(link, record_events=True)
    log = step_simulation(world, 1_000_000_000)
    assert len(log) == 400
    assert all(line.startswith("tick ") for line in log)


def _world_with_cbr(seed_rate: int) -> SimWorld:
    link = LinkSimulator([CellConfig(cell_id=1)], scheduler=SchedulerKind.BL)
    link.add_flow(_bg_spec(), cell_id=1)
    world = SimWorld(link, record_events=True)
    world.cbr_sources.append(CbrPacketSource("bg", seed_rate, 1400))
    return world


def test_same_config_produces_byte_identical_logs():
    log_a = step_simulation(_world_with_cbr(17_000_000), 500_000_000)
    log_b = step_simulation(_world_with_cbr(17_000_000), 500_000_000)
    assert "\n".join(log_a).encode() == "\n".join(log_b).encode()
    assert any(line.startswith("deliver ") for line in log_a)


def test_idle_link_latency_is_alignment_plus_constant():
    # 1 kB frames at 10 Hz on an idle uplink: every packet is delivered at
    # the end of its arrival tick, i.e. within one tick of slot alignment
    link = LinkSimulator([CellConfig(cell_id=1)], scheduler=SchedulerKind.BL)
    link.add_flow(_app_spec(), cell_id=1)
    world = SimWorld(link)
    delays = []
    world.on_delivery = lambda d: delays.append(d.delivery_ns - d.enqueue_ns)

    def enqueue(now_ns: int) -> None:
        link.enqueue("app", 8_000, now_ns)

    for k in range(20):
        world.schedule(k * 100_000_000, enqueue)
    world.run_until(2_100_000_000)
    assert len(delays) == 20
    assert all(0 < d <= link.tick_ns for d in delays)
    assert len(set(delays)) == 1  # constant across packets


def test_schedule_in_the_past_rejected():
    world = SimWorld(LinkSimulator([CellConfig(cell_id=1)]))
    world.run_tick()
    with pytest.raises(ValueError):
        world.schedule(0, lambda t: None)
