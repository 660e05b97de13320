import json
import logging

import pytest
from hypothesis import given, settings, strategies as st

from cloudrts.fleet import (CloudManager, FaultEvent, FaultPlan, Fleet, FixedCostExecutor,
                            Instance, InstanceState, ManagerState, SpotEvent, SpotKind, Trigger,
                            evaluate_trigger, execute_rescale, interruption_plan, on_spot_event,
                            replacement_ready)
from cloudrts.machine import CheckpointMode, ConfigError
from cloudrts.simkernel import Engine

from fleet_harness import check_case, random_case, run_case

REC = SpotKind.REBALANCE_RECOMMENDATION
NOTICE = SpotKind.INTERRUPTION_NOTICE


def _manager(n=4, mode="C", t_timeout=120.0, launch_delay=30.0, evacuate=2.0, rest=10.0, **kw):
    eng = Engine(0)
    fleet = Fleet()
    fleet.bootstrap("p", n)
    ex = FixedCostExecutor(eng, evacuate, rest)
    mgr = CloudManager(eng, fleet, mode, ex, CheckpointMode.IN_MEMORY, "p", t_timeout=t_timeout,
                       launch_delay=launch_delay, **kw)
    ex.manager = mgr
    return eng, mgr, ex


def _run(plan, **kw):
    eng, mgr, ex = _manager(**kw)
    mgr.start(plan)
    eng.run()
    return mgr, ex


def _requests(ex):
    return [(s, e, sorted(r.remove), sorted(r.add)) for s, e, r in ex.started]


# -- instances


def test_instance_transitions():
    inst = Instance(0, "p", InstanceState.LAUNCHING, 0.0)
    inst.transition(InstanceState.RUNNING, 1.0)
    inst.transition(InstanceState.INTERRUPTING, 2.0)   # at_risk is optional
    inst.transition(InstanceState.TERMINATED, 3.0)
    with pytest.raises(ValueError):
        inst.transition(InstanceState.RUNNING, 4.0)
    inst2 = Instance(1, "p", InstanceState.RUNNING, 0.0)
    inst2.transition(InstanceState.AT_RISK, 1.0)
    with pytest.raises(ValueError):
        inst2.transition(InstanceState.RUNNING, 2.0)


# -- pure state machine


def test_first_recommendation_and_idempotence():
    st_ = ManagerState()
    launches = []
    on_spot_event(SpotEvent(REC, 7, 100.0), st_, launch=lambda a: launches.append(a) or 50)
    assert set(st_.at_risk) == {7} and st_.oldest_rec_at == 100.0 and launches == [7]
    assert st_.replacements_pending == {7: 50}
    snapshot = (dict(st_.at_risk), dict(st_.replacements_pending), st_.oldest_rec_at)
    on_spot_event(SpotEvent(REC, 7, 110.0), st_, launch=lambda a: launches.append(a) or 51)
    assert (dict(st_.at_risk), dict(st_.replacements_pending), st_.oldest_rec_at) == snapshot
    assert launches == [7]


def test_notice_without_recommendation_is_emergency():
    st_ = ManagerState()
    on_spot_event(SpotEvent(NOTICE, 3, 42.0, 120.0), st_)
    assert st_.at_risk == {3: 42.0} and st_.noticed == {3}
    assert evaluate_trigger(st_, 42.0) is Trigger.EMERGENCY_OVERRIDE


def _state(at_risk, ready=(), noticed=(), t_timeout=120.0):
    st_ = ManagerState(t_timeout=t_timeout)
    for k, (a, t) in enumerate(sorted(at_risk.items())):
        st_.at_risk[a] = t
        st_.replacements_pending[a] = 100 + k
    for k, a in enumerate(sorted(at_risk)):
        if a in ready:
            st_.replacements_ready[100 + k] = 0.0
    st_.noticed = set(noticed)
    st_.oldest_rec_at = min(at_risk.values()) if at_risk else None
    return st_


def test_trigger_examples():
    assert evaluate_trigger(_state({1: 0.0, 2: 5.0}, ready={1, 2}), 10.0) \
        is Trigger.COMPLETE_REPLACEMENT
    assert evaluate_trigger(_state({1: 0.0, 2: 5.0}, ready={1}, noticed={2}), 10.0) \
        is Trigger.EMERGENCY_OVERRIDE
    st_ = _state({1: 0.0, 2: 5.0}, ready={1})
    assert evaluate_trigger(st_, 119.999) is None
    assert evaluate_trigger(st_, 120.0) is Trigger.TIMEOUT
    assert evaluate_trigger(ManagerState(), 0.0) is None


@settings(max_examples=1000, deadline=None)
@given(st.dictionaries(st.integers(0, 9), st.floats(0, 500), min_size=1, max_size=6),
       st.sets(st.integers(0, 9)), st.sets(st.integers(0, 9)), st.floats(0, 1000),
       st.sampled_from([30.0, 120.0]))
def test_priority_law(at_risk, ready, noticed, now, t_timeout):
    st_ = _state(at_risk, ready & set(at_risk), noticed & set(at_risk), t_timeout)
    st_.check()
    trig = evaluate_trigger(st_, now)
    emergency = bool(st_.noticed)
    complete = all(a in ready for a in at_risk)
    timeout = now >= min(at_risk.values()) + t_timeout
    if emergency:
        assert trig is Trigger.EMERGENCY_OVERRIDE
    elif complete:
        assert trig is Trigger.COMPLETE_REPLACEMENT
    elif timeout:
        assert trig is Trigger.TIMEOUT
    else:
        assert trig is None


def test_execute_complete_replacement():
    st_ = _state({1: 0.0, 2: 0.0}, ready={1, 2})
    req, pairs = execute_rescale(Trigger.COMPLETE_REPLACEMENT, st_, {1, 2, 3})
    assert req.remove == {1, 2} and req.add == {100, 101}
    assert pairs == {1: 100, 2: 101}
    assert not st_.cycle_open


def test_execute_partial_prioritises_noticed_instance():
    st_ = _state({1: 0.0, 2: 0.0}, ready={1}, noticed={2})
    req, pairs = execute_rescale(Trigger.EMERGENCY_OVERRIDE, st_, {1, 2, 3})
    assert req.remove == {2} and req.add == {100}
    assert pairs == {2: 100}
    assert 1 not in req.remove and not st_.cycle_open


def test_execute_timeout_with_nothing_ready_is_noop_close():
    st_ = _state({1: 0.0}, ready=set())
    req, pairs = execute_rescale(Trigger.TIMEOUT, st_, {1, 2})
    assert req is None and pairs == {}
    assert not st_.cycle_open
    assert st_.carryover == {1: 100}


def test_execute_needs_trigger():
    with pytest.raises(ValueError):
        execute_rescale(None, ManagerState(), set())


def test_carryover_replacement_reopens_cycle_when_ready():
    st_ = _state({1: 0.0}, ready=set())
    execute_rescale(Trigger.TIMEOUT, st_, {1, 2})
    replacement_ready(100, 200.0, st_, {1, 2})
    assert st_.at_risk == {1: 200.0}
    assert evaluate_trigger(st_, 200.0, {1, 2}) is Trigger.COMPLETE_REPLACEMENT


# -- driven by the event loop


def test_reactive_notice_gives_shrink_then_expand():
    mgr, ex = _run(FaultPlan([FaultEvent(300.0, NOTICE, 1)]), mode="B", launch_delay=30.0)
    reqs = _requests(ex)
    assert len(reqs) == 2
    (s1, e1, rem1, add1), (s2, _, rem2, add2) = reqs
    assert rem1 == [1] and add1 == [] and s1 == 300.0
    assert mgr.fleet.instances[1].evacuated_at <= 300.0 + mgr.t_grace
    assert rem2 == [] and add2 == [4]
    assert s2 == 300.0 + mgr.t_grace + 30.0


def test_reactive_modes_drop_recommendations():
    for mode in "AB":
        mgr, ex = _run(FaultPlan([FaultEvent(10.0, REC, 0)]), mode=mode)
        assert ex.started == [] and len(mgr.fleet.instances) == 4


def test_eight_recommendations_one_combined_rescale():
    plan = interruption_plan(range(8), 100.0, notice_after=None)
    mgr, ex = _run(plan, n=8, launch_delay=30.0)
    reqs = _requests(ex)
    assert len(reqs) == 1
    s, _, rem, add = reqs[0]
    assert s == 130.0 and rem == list(range(8)) and add == list(range(8, 16))
    assert [t for t, trig, _, _ in mgr.requests] == [130.0]
    assert mgr.requests[0][1] is Trigger.COMPLETE_REPLACEMENT


def test_empty_plan_no_rescales():
    mgr, ex = _run(FaultPlan())
    assert ex.started == [] and mgr.log == []


def test_timeout_fires_exactly():
    mgr, ex = _run(FaultPlan([FaultEvent(10.0, REC, 0), FaultEvent(50.0, REC, 1)]),
                   t_timeout=120.0, launch_delay=500.0)
    trig = [e for e in mgr.log if e[1] == "trigger"]
    assert trig[0][:3] == (130.0, "trigger", "timeout")


def test_notice_overrides_pending_replacement():
    plan = FaultPlan([FaultEvent(0.0, REC, 0), FaultEvent(0.0, REC, 1),
                      FaultEvent(40.0, NOTICE, 1)])
    mgr, ex = _run(plan, launch_delay=30.0, t_timeout=300.0)
    first = mgr.requests[0]
    # both replacements were ready at t=30, so the cycle completed before the notice
    assert first[0] == 30.0 and first[1] is Trigger.COMPLETE_REPLACEMENT
    plan = FaultPlan([FaultEvent(0.0, REC, 0), FaultEvent(0.0, REC, 1),
                      FaultEvent(20.0, NOTICE, 1)])
    mgr, ex = _run(plan, launch_delay=30.0, t_timeout=300.0)
    t, trig, req, _ = mgr.requests[0]
    assert t == 20.0 and trig is Trigger.EMERGENCY_OVERRIDE and req.remove == {1}


def test_signal_for_terminated_instance_ignored_with_warning(caplog):
    plan = FaultPlan([FaultEvent(10.0, NOTICE, 0), FaultEvent(500.0, NOTICE, 0),
                      FaultEvent(500.0, REC, 99)])
    with caplog.at_level(logging.WARNING, logger="cloudrts.fleet"):
        mgr, _ = _run(plan, mode="B")
    assert [e[2:] for e in mgr.log if e[1] == "ignored"] == [("interruption-notice", 0),
                                                             ("rebalance-recommendation", 99)]
    assert "ignored" in caplog.text


def test_flagged_replacement_joins_cycle_and_is_discarded(caplog):
    plan = FaultPlan([FaultEvent(0.0, REC, 0), FaultEvent(10.0, REC, 4)])
    with caplog.at_level(logging.WARNING, logger="cloudrts.fleet"):
        mgr, ex = _run(plan, launch_delay=30.0, t_timeout=120.0)
    assert "before it joined the fleet" in caplog.text
    assert all(4 not in r.add for _, _, r in ex.started)
    assert mgr.fleet.instances[4].state is InstanceState.TERMINATED


def test_grace_violation_is_detected():
    eng, mgr, ex = _manager(mode="B", evacuate=200.0, strict_grace=False)
    mgr.start(FaultPlan([FaultEvent(0.0, NOTICE, 2)]))
    eng.run()
    assert mgr.violations and "before its chares were evacuated" in mgr.violations[0]


def test_periodic_manager_tick():
    eng, mgr, ex = _manager(tick_period=5.0)
    mgr.start(FaultPlan())
    eng.run(until=21.0)
    assert sum(1 for _, _, tag in eng.trace if tag == "manager-tick") == 4


# -- fault plans


def test_fault_plan_validation():
    with pytest.raises(ConfigError, match=r"fault_plan\[1\].time_s"):
        FaultPlan([FaultEvent(5.0, REC, 0), FaultEvent(4.0, REC, 1)])
    with pytest.raises(ConfigError, match=r"fault_plan\[0\]"):
        FaultPlan([FaultEvent(-1.0, REC, 0)])
    with pytest.raises(ConfigError, match=r"fault_plan\[0\]: missing field"):
        FaultPlan.from_records([{"time_s": 1.0, "kind": "interruption-notice"}])
    with pytest.raises(ConfigError, match="bad value"):
        FaultPlan.from_records([{"time_s": 1.0, "kind": "meteor", "instance_index": 0}])
    with pytest.raises(ConfigError, match="instance_index"):
        FaultPlan.from_records([{"time_s": 1.0, "kind": "interruption-notice",
                                 "instance_index": -2}])
    with pytest.raises(ConfigError):
        FaultPlan(launch_delay=-1.0)


def test_fault_plan_file_round_trip(tmp_path):
    plan = interruption_plan([0, 3], 10.0, 60.0)
    p = tmp_path / "plan.json"
    p.write_text(json.dumps(plan.to_records()))
    again = FaultPlan.load(p)
    assert again.events == plan.events and again.launch_delay is None
    p.write_text(json.dumps({"events": plan.to_records(), "launch_delay": 5.0}))
    assert FaultPlan.load(p).launch_delay == 5.0


# -- randomised state-machine suite


def test_checker_catches_tampered_logs():
    seeds = {}
    for seed in range(2000):
        case = random_case(seed)
        mgr, ex = run_case(case)
        kinds = {e[2] for e in mgr.log if e[1] == "trigger"}
        for k in kinds:
            seeds.setdefault(k, (case, mgr, ex))
        if len(seeds) == 4:
            break
    case, mgr, ex = seeds["timeout"]
    k = next(i for i, e in enumerate(mgr.log) if e[1] == "trigger" and e[2] == "timeout")
    e = mgr.log[k]
    mgr.log[k] = (e[0] + 1.0, *e[1:])
    assert any("timeout fired" in m for m in check_case(case, mgr, ex))

    case, mgr, ex = seeds["emergency-override"]
    k = next(i for i, e in enumerate(mgr.log) if e[1] == "trigger" and e[2] == "emergency-override")
    mgr.log[k] = (mgr.log[k][0], "trigger", "timeout", mgr.log[k][3])
    assert check_case(case, mgr, ex)

    case, mgr, ex = seeds["complete-replacement"]
    mgr.log.append((1e9, "cycle-open"))
    assert any("cycle" in m for m in check_case(case, mgr, ex))


@pytest.mark.parametrize("block", range(10))
def test_random_spot_sequences_have_no_violations(block):
    logging.disable(logging.WARNING)
    try:
        bad = {}
        for seed in range(block * 1000, (block + 1) * 1000):
            case = random_case(seed)
            problems = check_case(case, *run_case(case))
            if problems:
                bad[seed] = problems
    finally:
        logging.disable(logging.NOTSET)
    assert bad == {}
