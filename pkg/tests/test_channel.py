from __future__ import annotations

import math

import numpy as np
import pytest

from piezonet.channel import (
    AirParams, ChannelGraph, ChannelParams, DelayLine, MembraneParams, ModuleInfo, PathKind,
    air_delay_samples, air_gain, joint_gain, membrane_gain, noise_frame, propagate_frame,
    sphere_radius,
)
from piezonet.robots import module_layout
from piezonet.signals import CHIRP_BIN, FRAME, MARK_BIN, SPACE_BIN, bin_freq, goertzel_amp

F31, F97 = bin_freq(CHIRP_BIN), bin_freq(MARK_BIN)


def two_robots(n_contacts=3, distance=0.78, sigma=0.0, volumes=(0.25, 0.25)):
    mods = []
    for r in (1, 2):
        for i, d in enumerate(module_layout(4)):
            mods.append(ModuleInfo(len(mods), r, i, d))
    # robot 1 module 0 is joined to robot 2 module 2 (gid 6)
    return ChannelGraph(mods, {1: (0.0, 0.0, 0.0), 2: (distance, 0.0, 0.0)},
                        {1: volumes[0], 2: volumes[1]}, [(0, 6, n_contacts)],
                        ChannelParams(noise_sigma=sigma))


def tone(b, amp=1.0):
    t = np.arange(FRAME)
    return amp * np.sin(2 * np.pi * b * t / FRAME)


def test_joint_gain_table():
    assert [joint_gain(n) for n in (3, 2, 1, 0)] == [1.0, 0.65, 0.55, 0.0]
    with pytest.raises(ValueError):
        joint_gain(4)


def test_membrane_gain_examples():
    p = MembraneParams()
    assert membrane_gain(p, F31, 0.0) == p.ref_gain
    ratio = membrane_gain(p, F31, 0.15) / membrane_gain(p, F97, 0.15)
    assert ratio == pytest.approx(math.exp((p.beta(F97) - p.beta(F31)) * 0.15), rel=1e-12)
    assert ratio > 1
    assert membrane_gain(p, F31, 1e3) < 1e-300
    # beta is clamped at its 1 kHz value below 1 kHz
    assert p.beta(500.0) == p.beta0


def test_air_gain_examples():
    p = AirParams()
    g1 = air_gain(p, F31, 1.0)
    absorb_db = p.absorption_db_per_m(F31)
    assert absorb_db < 0.1
    assert g1 == pytest.approx(p.coupling_ref, rel=0.02)
    assert air_gain(p, F31, 2.0) == pytest.approx(g1 / 2 * 10 ** (-absorb_db / 20), rel=1e-12)
    assert p.absorption_db_per_m(1000.0) == pytest.approx(0.005)
    assert p.absorption_db_per_m(20000.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        air_gain(p, F31, 1.0, vol_tx=0.7)


def test_air_delay():
    assert air_delay_samples(1.0) == round(50000 / 343)
    assert air_delay_samples(0.0) == 0


def test_paths_and_delays():
    g = two_robots()
    kinds = {pa.kind for pa in g.paths}
    assert kinds == {PathKind.MEMBRANE, PathKind.AIR, PathKind.JOINT}
    for pa in g.paths:
        assert pa.delay_samples >= 0
        if pa.kind is not PathKind.AIR:
            assert pa.delay_samples == 0
        for f in (F31, F97):
            assert 0.0 <= g.path_gain(pa, f) <= 1.0


def test_joint_validation():
    mods = [ModuleInfo(i, 1 if i < 4 else 2, i % 4, d) for i, d in enumerate(module_layout(4) * 2)]
    pos, vol = {1: (0, 0, 0), 2: (1, 0, 0)}, {1: 0.25, 2: 0.25}
    with pytest.raises(ValueError):
        ChannelGraph(mods, pos, vol, [(0, 1, 3)])
    with pytest.raises(ValueError):
        ChannelGraph(mods, pos, vol, [(0, 4, 3), (0, 5, 3)])


def test_tables_agree_with_path_gain():
    g = two_robots(n_contacts=2)
    g.set_contact(1, True)
    bins = (CHIRP_BIN, SPACE_BIN, MARK_BIN)
    direct, delayed = g.gain_tables(bins)
    total = direct + sum(delayed.values())
    for i, b in enumerate(bins):
        ref = np.zeros((g.n_modules, g.n_modules))
        for pa in g.paths:
            ref[pa.dst, pa.src] += g.path_gain(pa, bin_freq(b))
        assert np.allclose(total[i], ref, rtol=1e-12, atol=1e-18)


def test_silence_gives_zero():
    rx = propagate_frame(two_robots(), {}, 0, bins=[CHIRP_BIN])
    assert all(not x.any() for x in rx.values())


def test_joint_composition():
    for n, ratio in ((2, 0.65), (1, 0.55)):
        g = two_robots(n_contacts=n, distance=50.0)
        rx = propagate_frame(g, {0: {MARK_BIN: tone(MARK_BIN)}}, 0)
        assert goertzel_amp(rx[6], MARK_BIN) == pytest.approx(ratio, rel=1e-9)


def test_superposition_of_two_bins():
    g = two_robots()
    rx = propagate_frame(g, {1: {CHIRP_BIN: tone(CHIRP_BIN), MARK_BIN: tone(MARK_BIN)}}, 0)
    pa = next(p for p in g.paths if p.src == 1 and p.dst == 0)
    assert goertzel_amp(rx[0], CHIRP_BIN) == pytest.approx(g.path_gain(pa, F31), rel=1e-9)
    assert goertzel_amp(rx[0], MARK_BIN) == pytest.approx(g.path_gain(pa, F97), rel=1e-9)


def test_contact_damping_and_restoration():
    g = two_robots()
    bins = (CHIRP_BIN,)
    before = [t.copy() for t in (g.gain_tables(bins)[0],)]
    pa = next(p for p in g.paths if p.src == 1 and p.dst == 0)
    base = g.path_gain(pa, F31)
    g.set_contact(1, True)
    assert g.path_gain(pa, F31) == pytest.approx(0.05 * base)
    # locality: a path that avoids module 1 keeps its gain
    other = next(p for p in g.paths if p.src == 2 and p.dst == 3)
    assert g.path_gain(other, F31) == membrane_gain(MembraneParams(), F31, sphere_radius(0.25) * other.param)
    g.set_contact(1, False)
    assert np.array_equal(g.gain_tables(bins)[0], before[0])


def test_volume_changes_geodesic():
    g = two_robots()
    pa = next(p for p in g.paths if p.src == 1 and p.dst == 0)
    small = g.path_gain(pa, F31)
    g.set_volume(1, 0.5)
    assert g.path_gain(pa, F31) < small


def test_noise_is_counter_keyed():
    a = noise_frame(7, 3, 11, 1e-3)
    assert np.array_equal(a, noise_frame(7, 3, 11, 1e-3))
    assert not np.array_equal(a, noise_frame(7, 3, 12, 1e-3))
    assert not np.array_equal(a, noise_frame(8, 3, 11, 1e-3))
    assert np.std(np.concatenate([noise_frame(1, 0, f, 1e-3) for f in range(200)])) == pytest.approx(1e-3, rel=0.03)


def test_air_delay_is_causal():
    g = two_robots(distance=1.0)
    d = air_delay_samples(1.0)
    dl = DelayLine(g.n_modules, [CHIRP_BIN], g.max_delay())
    x = tone(CHIRP_BIN)
    first = propagate_frame(g, {4: {CHIRP_BIN: x}}, 0, delay_line=dl, bins=[CHIRP_BIN])
    # module 0 hears nothing before the delay has elapsed
    assert not first[0][:d].any()
    assert first[0][d:].any()
    second = propagate_frame(g, {}, 1, delay_line=dl, bins=[CHIRP_BIN])
    pa = next(p for p in g.paths if p.src == 4 and p.dst == 0)
    expected = g.path_gain(pa, F31) * x[FRAME - d:]
    assert np.allclose(second[0][:d], expected, atol=1e-15)
    assert not second[0][d:].any()


def test_superposition():
    g = two_robots(sigma=0.0)
    a = {1: {CHIRP_BIN: tone(CHIRP_BIN, 0.3)}}
    b = {4: {CHIRP_BIN: tone(CHIRP_BIN, 0.2)}, 2: {MARK_BIN: tone(MARK_BIN, 0.4)}}
    both = {1: a[1], **b}
    bins = [CHIRP_BIN, MARK_BIN]
    ra, rb, rab = (propagate_frame(g, t, 0, bins=bins) for t in (a, b, both))
    for m in rab:
        assert np.allclose(rab[m], ra[m] + rb[m], atol=1e-9)


def test_membrane_frequency_ordering_and_reciprocity():
    g = two_robots(n_contacts=2)
    for pa in g.paths:
        if pa.kind is PathKind.MEMBRANE and pa.param > 0:
            g31, g87, g97 = (g.path_gain(pa, bin_freq(b)) for b in (CHIRP_BIN, SPACE_BIN, MARK_BIN))
            assert g31 > g87 > g97
        if pa.kind is not PathKind.AIR:
            back = next(q for q in g.paths if q.src == pa.dst and q.dst == pa.src and q.kind is pa.kind)
            assert g.path_gain(back, F31) == g.path_gain(pa, F31)


def test_rx_energy_bounded_by_tx():
    g = two_robots(sigma=0.0)
    x = tone(SPACE_BIN, 0.5)
    rx = propagate_frame(g, {0: {SPACE_BIN: x}}, 0)
    for m, y in rx.items():
        if m != 0:
            assert np.sum(y ** 2) <= np.sum(x ** 2)
