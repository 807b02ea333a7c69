import math

import pytest

from nnsplit.netsim import (
    AblationFlags,
    EventKind,
    SimError,
    Topology,
    calibrate_rate,
    client_payload,
    simulate,
)
from nnsplit.planner import SERVER, make_plan, place, plan_full, upf

from conftest import chain_profile
from simcases import check_invariants, run_case

GBPS = 1e9


def forwarding_time_ns(payload, mtu, bw, prop_s, hops):
    """Store-and-forward recurrence over hops+1 links.

    Packet i leaves link j at max(arrival at j, previous packet done on j) + tx_i
    and reaches the next node one propagation delay later.
    """
    sizes = [mtu] * (payload // mtu) + ([payload % mtu] if payload % mtu else [])
    prop = round(prop_s * 1e9)
    ready = [0] * len(sizes)
    for _ in range(hops + 1):
        free = 0
        for i, size in enumerate(sizes):
            free = max(ready[i], free) + math.ceil(size * 8 * 1e9 / bw)
            ready[i] = free + prop
    return ready[-1]


def test_closed_form_equal_packets():
    # With equal packets the recurrence reduces to N*tau + H*tau + (H+1)*D.
    tau = 11_776
    assert forwarding_time_ns(1472 * 10, 1472, GBPS, 0.010, 3) == 10 * tau + 3 * tau + 4 * 10_000_000


@pytest.mark.parametrize("hops", [1, 2, 4])
@pytest.mark.parametrize("payload", [1472 * 10, 5000, 100])
def test_pure_forwarding_closed_form(hops, payload):
    prof = chain_profile([1, 1], macs=[0, 0])
    plan = make_plan(prof, [0])
    placement = place(plan, hops, 0)
    topo = Topology(hops, client_payload_bytes=payload)
    trace = simulate(prof, plan, placement, topo)
    assert trace.completion_time_ns == forwarding_time_ns(payload, 1472, GBPS, 0.010, hops)
    assert trace.per_link_bytes == (payload,) * (hops + 1)


def test_compute_one_millisecond():
    prof = chain_profile([1, 1], macs=[1_000_000, 0], frames=1)
    plan = make_plan(prof, [0])
    trace = simulate(prof, plan, place(plan, 1, 1), Topology(1, compute_rate_macs_per_s=1e9))
    assert trace.nodes[upf(1)].compute_ns == 1_000_000
    assert trace.nodes[upf(1)].compute_s == 0.001


def test_calibrate_rate_definition():
    prof = chain_profile([1], macs=[310_000_000], frames=1)
    assert calibrate_rate(prof, None, 0.310) == pytest.approx(1e9)
    assert calibrate_rate(prof, None, 0.155) == pytest.approx(2e9)
    with pytest.raises(SimError):
        calibrate_rate(chain_profile([1], macs=[0]), None, 0.1)
    with pytest.raises(SimError):
        calibrate_rate(prof, None, 0.0)


def test_calibrated_centralised_compute(fixture_profile):
    rate = calibrate_rate(fixture_profile, None, 0.310)
    plan, placement = plan_full(fixture_profile, 3, 0)
    trace = simulate(fixture_profile, plan, placement, Topology(3, compute_rate_macs_per_s=rate))
    assert abs(trace.nodes[SERVER].compute_s - 0.310) <= 1e-9


def test_client_payload_default(fixture_profile):
    assert client_payload(fixture_profile, Topology(1)) == 2 * 32000


@pytest.mark.parametrize(
    "kwargs",
    [
        {"bandwidth_bps": 0},
        {"compute_rate_macs_per_s": 0},
        {"prop_delay_s": -1},
        {"mtu_payload_bytes": 0},
        {"hops": 0},
        {"link_policy": "random"},
    ],
)
def test_topology_validation(kwargs):
    prof = chain_profile([1, 1])
    plan = make_plan(prof, [0])
    topo = Topology(**{"hops": 1, **kwargs})
    with pytest.raises(SimError):
        simulate(prof, plan, place(plan, 1, 1), topo)


def test_hops_mismatch():
    prof = chain_profile([1, 1])
    plan = make_plan(prof, [0])
    with pytest.raises(SimError):
        simulate(prof, plan, place(plan, 2, 1), Topology(1))


def test_determinism(fixture_profile):
    plan, placement = plan_full(fixture_profile, 5, 2)
    topo = Topology(5, compute_rate_macs_per_s=calibrate_rate(fixture_profile, None, 0.31))
    a = simulate(fixture_profile, plan, placement, topo)
    b = simulate(fixture_profile, plan, placement, topo)
    assert a.events == b.events
    assert a.to_csv() == b.to_csv()


def test_trace_csv_header(fixture_profile):
    plan, placement = plan_full(fixture_profile, 1, 1)
    trace = simulate(fixture_profile, plan, placement, Topology(1))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "time_ns,kind,node,id"
    assert len(lines) == len(trace.events) + 1
    assert {e.kind for e in trace.events} == set(EventKind)


def _fixture_run(prof, hops, delta, flags=AblationFlags(), policy="round_robin"):
    plan, placement = plan_full(prof, hops, delta)
    topo = Topology(hops, compute_rate_macs_per_s=calibrate_rate(prof, None, 0.31), link_policy=policy)
    return simulate(prof, plan, placement, topo, flags)


def test_fixture_invariants(fixture_profile):
    for hops in (3, 5):
        for delta in range(5):
            for flags in (AblationFlags(), AblationFlags(False, True), AblationFlags(True, False)):
                trace = _fixture_run(fixture_profile, hops, delta, flags)
                check_invariants(fixture_profile, trace, Topology(hops))


def test_skip_flow_is_parallel(fixture_profile):
    trace = _fixture_run(fixture_profile, 5, 2)
    skip = next(s for s in trace.streams if s.id.startswith("skip"))
    assert (skip.src, skip.dst) == (1, 6)
    assert skip.start_ns == trace.nodes[upf(1)].compute_end_ns


def test_sequential_skip_carried_by_every_hop(fixture_profile):
    trace = _fixture_run(fixture_profile, 5, 2, AblationFlags(principle3=False))
    assert not any(s.id.startswith("skip") for s in trace.streams)
    seq = [s for s in trace.streams if s.id.startswith("seq")]
    assert all(any(kind == "skip" for kind, _ in s.segments) for s in seq)


def test_principle3_reduces_server_cache(fixture_profile):
    on = _fixture_run(fixture_profile, 5, 2)
    off = _fixture_run(fixture_profile, 5, 2, AblationFlags(principle3=False))
    assert on.nodes[SERVER].cache_wait_ns < 0.4 * off.nodes[SERVER].cache_wait_ns


def test_fifo_policy_runs(fixture_profile):
    a = _fixture_run(fixture_profile, 5, 2, policy="fifo")
    check_invariants(fixture_profile, a, Topology(5))


def test_plateau_traces_identical(fixture_profile):
    ref = _fixture_run(fixture_profile, 5, 2)
    for delta in (3, 4):
        assert _fixture_run(fixture_profile, 5, delta).events == ref.events


@pytest.mark.parametrize("seed", range(150))
def test_random_scenarios(seed):
    prof, trace, topo = run_case(seed)
    check_invariants(prof, trace, topo)


def test_random_scenario_deterministic():
    for seed in range(5):
        assert run_case(seed)[1].to_csv() == run_case(seed)[1].to_csv()
