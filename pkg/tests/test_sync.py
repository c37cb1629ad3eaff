from __future__ import annotations

import numpy as np
import pytest

from piezonet.signals import FRAME_S
from piezonet.sim import load_scenario, run, sync_scenario
from piezonet.sync import (
    PcoParams, PcoState, PulseCoupledClock, analyze_cycle, circular_diff, convergence_cycle,
    detect_chirps, offset_metric, pco_update, shift_magnitude, sync_trace_csv,
)

FULL = PcoParams(share="full")


def test_frame_quantities():
    p = PcoParams()
    assert p.period_frames == 391
    assert p.chirp_frames == 20
    assert p.shift_cap_frames == 5
    assert p.t_a0_frames == 185
    assert p.run_frames == 22


def test_shift_saturates_at_cap():
    st = PcoState(0.9, 1.0, tally_a=3, tally_b=1, onset_gaps=[-0.08, -0.08, -0.08])
    ta, tb = pco_update(st, FULL)
    assert ta == pytest.approx(0.9 - 0.025)
    assert tb == pytest.approx(1.0 + 0.025)


def test_balanced_tallies_do_not_move():
    st = PcoState(0.9, 1.0, tally_a=2, tally_b=2, onset_gaps=[-0.01, 0.02])
    assert pco_update(st, FULL) == (0.9, 1.0)


def test_small_shift_is_exact_and_period_kept():
    st = PcoState(0.9, 1.0, tally_a=4, tally_b=0, onset_gaps=[-0.008])
    ta, tb = pco_update(st, FULL)
    assert ta == pytest.approx(0.892, abs=1e-12)
    assert ta + tb == pytest.approx(1.9, abs=1e-12)


def test_shifts_never_go_negative():
    st = PcoState(0.01, 1.89, tally_a=5, tally_b=0, onset_gaps=[-0.02])
    ta, tb = pco_update(st, FULL)
    assert ta == 0.0 and tb == pytest.approx(1.9)


def test_half_share_rounding():
    p = PcoParams()
    # a 7-frame gap closes in one step when both sides move: 4 early + 3 late
    assert shift_magnitude([-7 * FRAME_S], True, p) == pytest.approx(4 * FRAME_S)
    assert shift_magnitude([7 * FRAME_S], False, p) == pytest.approx(3 * FRAME_S)
    assert shift_magnitude([-40 * FRAME_S], True, p) == pytest.approx(5 * FRAME_S)
    assert shift_magnitude([], True, p) == 0.0


def test_detect_chirps_examples():
    assert detect_chirps(np.zeros(100), 1e-3) == []
    amps = np.full(200, 1e-3)
    amps[10:30] = 0.2
    amps[88:108] = 0.2
    got = detect_chirps(amps, 1e-3)
    assert [d.onset for d in got] == [10, 88]
    assert all(19 <= d.n_frames <= 20 for d in got)


def cycle_with_peer(peer_onset, t_a=185, floor=1e-3, own=0.9, peer=0.01):
    p = PcoParams()
    amps = np.full(p.period_frames, floor)
    amps[t_a:t_a + 20] = own
    # own ring-down tail
    amps[t_a + 20] = own * 0.08
    amps[t_a + 21] = own * 0.006
    amps[peer_onset:peer_onset + 22] = np.maximum(amps[peer_onset:peer_onset + 22], peer)
    return amps, p


def test_analyze_cycle_early_and_late_peers():
    amps, p = cycle_with_peer(140)
    ta, tb, gaps = analyze_cycle(amps, 185, p, 1e-3)
    assert ta == 22 and tb == 0 and gaps == [-45]
    amps, p = cycle_with_peer(230)
    ta, tb, gaps = analyze_cycle(amps, 185, p, 1e-3)
    assert ta == 0 and tb == 22 and gaps == [45]


def test_analyze_cycle_silence_is_synchronized():
    amps, p = cycle_with_peer(185, peer=0.0)
    assert analyze_cycle(amps, 185, p, 1e-3) == (0, 0, [])


def test_clock_reports_each_cycle():
    p = PcoParams()
    clk = PulseCoupledClock(p, 10, noise_floor=1e-3)
    reports = []
    for f in range(10, 10 + 3 * p.period_frames):
        rep = clk.observe(f, 1e-3)
        if rep:
            reports.append(rep)
    assert [r.cycle for r in reports] == [0, 1, 2]
    assert reports[1].onset_frame - reports[0].onset_frame == p.period_frames
    assert all(r.synchronized for r in reports)


def test_offset_metric_and_convergence():
    on = {1: {0: 0.0, 1: 2.0}, 2: {0: 0.25, 1: 2.0}}
    assert offset_metric(on, 2.0) == {0: pytest.approx(250.0), 1: 0.0}
    assert circular_diff(0.1, 1.95, 2.0) == pytest.approx(0.15)
    assert convergence_cycle({0: 250.0, 1: 100.0, 2: 3.0, 3: 0.0}) == 2
    assert convergence_cycle({0: 1.0, 1: 9.0}) is None
    with pytest.raises(ValueError):
        offset_metric({1: {0: 0.0}}, 2.0)


def test_two_robot_demo_converges_by_cycle_five():
    res = run(load_scenario(sync_scenario()))
    off = res.summary["offsets_ms"]
    assert off[0] == pytest.approx(250.0, abs=5.12)
    assert convergence_cycle(off) <= 5
    header = res.trace_csv.splitlines()[0]
    assert header == "cycle,robot_id,chirp_onset_s,offset_to_nearest_ms,t_a_s,t_b_s"


def test_zero_offset_stays_synchronized():
    res = run(load_scenario(sync_scenario(offset_ms=0.0, cycles=4)))
    assert all(v < 5.12 for v in res.summary["offsets_ms"].values())


def test_two_robot_offsets_shrink_monotonically():
    off = run(load_scenario(sync_scenario(cycles=8))).summary["offsets_ms"]
    seq = [off[c] for c in sorted(off)]
    assert all(b <= a for a, b in zip(seq[1:], seq[2:]))


def test_mean_sync_time_grows_with_robot_count():
    means = []
    for n in (2, 3, 4, 5):
        cycles = []
        for seed in range(6):
            rng = np.random.default_rng([seed, n])
            doc = sync_scenario(robots=n, cycles=10, seed=seed)
            doc["experiment"]["offsets_ms"] = [0.0] + sorted(rng.uniform(0, 250, n - 1).round(3).tolist())
            c = convergence_cycle(run(load_scenario(doc)).summary["offsets_ms"])
            assert c is not None, f"{n} robots, seed {seed} did not converge"
            cycles.append(c)
        means.append(np.mean(cycles))
    assert all(b >= a for a, b in zip(means, means[1:])), means


def test_four_robot_demo_no_faster_than_two():
    two = convergence_cycle(run(load_scenario(sync_scenario(cycles=10))).summary["offsets_ms"])
    four = convergence_cycle(run(load_scenario(sync_scenario(robots=4, cycles=10))).summary["offsets_ms"])
    assert four is not None and four >= two


def test_trace_csv_rows():
    amps = np.full(391, 1e-3)
    clk = PulseCoupledClock(PcoParams(), 0, 1e-3)
    rep = [clk.observe(f, a) for f, a in enumerate(amps)][-1]
    text = sync_trace_csv({1: [rep]}, 2.0)
    assert text.splitlines()[1] == f"0,1,{185 * FRAME_S:.5f},,{185 * FRAME_S:.5f},{186 * FRAME_S:.5f}"
