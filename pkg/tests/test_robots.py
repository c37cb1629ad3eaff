from __future__ import annotations

import math

import pytest

from piezonet.channel import sphere_radius
from piezonet.link import FskParams
from piezonet.robots import RobotState, energy_report, module_layout, volume_step
from piezonet.signals import FRAME_S
from piezonet.sim import inchworm_scenario, lift_scenario, link_scenario, load_scenario, run


def frames(seconds):
    return int(round(seconds / FRAME_S))


def test_layout_and_geodesic():
    st = RobotState(1, 4, 0.25)
    assert len(module_layout(6, poles=True)) == 6
    assert st.geodesic(0, 2) == pytest.approx(math.pi * sphere_radius(0.25))
    assert st.geodesic(0, 1) == pytest.approx(math.pi / 2 * sphere_radius(0.25))
    with pytest.raises(ValueError):
        RobotState(1, volume=0.6)


def test_volume_integration():
    st = RobotState(1, volume=0.05, pump_on=True)
    assert volume_step(st, dt=1.0)
    assert st.volume == pytest.approx(0.10, abs=1e-12)
    framed = RobotState(1, volume=0.05, pump_on=True)
    for _ in range(frames(1.0)):
        volume_step(framed)
    assert framed.volume == pytest.approx(0.05 + 0.05 * frames(1.0) * FRAME_S, abs=1e-12)
    idle = RobotState(2, volume=0.3)
    assert not volume_step(idle) and idle.volume == 0.3
    full = RobotState(3, volume=0.05, pump_on=True)
    for _ in range(frames(20.0)):
        volume_step(full)
    assert full.volume == 0.5


def test_energy_examples():
    st = RobotState(1)
    assert st.energy_j == 0.0
    st.driven_frames["sensing"] = frames(10.0)
    assert energy_report(st)["sensing"] == pytest.approx(0.6, abs=1e-3)
    # one packet at k=8 broadcast for four packet durations on one module
    res = run(load_scenario(link_scenario()))
    expected = 0.060 * 4 * FskParams(k=8).t_packet
    assert res.summary["energy"][1]["link"] == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(0.0885, abs=1e-4)


def inflate_times(res):
    start = {e["robot"]: e["t"] for e in res.events if e["kind"] == "inflate-start"}
    done = {e["robot"]: e["t"] for e in res.events if e["kind"] == "inflate-target-reached"}
    return start, done


def test_inchworm_chain_order():
    start, done = inflate_times(run(load_scenario(inchworm_scenario(3, seed=1))))
    assert start[1] < start[2] < start[3]
    assert start[2] > done[1] and start[3] > done[2]


def test_inchworm_single_robot_stalls():
    doc = inchworm_scenario(1, duration_s=45.0)
    res = run(load_scenario(doc))
    kinds = [e["kind"] for e in res.events]
    assert "inflate-target-reached" in kinds and "stall" in kinds


def test_lift_given_offsets():
    doc = lift_scenario(seed=0)
    doc["script"] = [{"t": 0.0, "kind": "lift-init", "offsets_ms": [0.0, 120.0, 250.0]}]
    start, _ = inflate_times(run(load_scenario(doc), stop_when_done=True))
    assert len(start) == 3
    assert max(start.values()) - min(start.values()) <= FRAME_S + 1e-9


def test_lift_presynchronized_waits_four_periods():
    doc = lift_scenario()
    doc["script"] = [{"t": 0.0, "kind": "lift-init", "offsets_ms": [0.0, 0.0, 0.0]}]
    res = run(load_scenario(doc), stop_when_done=True)
    streaks = [e["detail"] for e in res.events if e["kind"] == "sync-period" and e["robot"] == 1]
    assert [s["cycle"] for s in streaks] == [0, 1, 2, 3]
    lift = [e for e in res.events if e["kind"] == "lift-start"]
    assert {e["detail"]["cycle"] for e in lift} == {4}


def test_lone_robot_aborts():
    doc = lift_scenario(robots=1, duration_s=65.0)
    res = run(load_scenario(doc), stop_when_done=True)
    kinds = [e["kind"] for e in res.events]
    assert "sync-period" not in kinds and "inflate-start" not in kinds
    abort = [e for e in res.events if e["kind"] == "lift-abort"]
    assert len(abort) == 1 and abort[0]["detail"]["cycles"] == 30
