from __future__ import annotations

import json

import numpy as np
import pytest

from piezonet.cli import FIXTURE_BUILDERS, fixture_names, read_fixture
from piezonet.link import measure_pdr, pdr_csv
from piezonet.signals import CHIRP_BIN, read_wav
from piezonet.sim import (
    ScenarioError, air_scenario, inchworm_scenario, load_scenario, measure_air_snr, pdr_scenario,
    run, sync_scenario,
)

MINIMAL = {
    "duration_s": 1.0,
    "robots": [{"id": 1}, {"id": 2, "position": [0.78, 0.0]}],
    "joints": [{"a": [1, 0], "b": [2, 2]}],
}


def errors_of(doc):
    with pytest.raises(ScenarioError) as exc:
        load_scenario(doc)
    return exc.value.errors


def test_minimal_scenario_defaults():
    sc = load_scenario(MINIMAL)
    assert sc.seed == 0 and sc.noise_sigma == 1e-3
    assert sc.joints[0].n_contacts == 3
    assert sc.robots[0].n_modules == 4 and sc.robots[0].volume == 0.25
    assert sc.experiment == {"kind": "network"}
    assert load_scenario(json.dumps(MINIMAL)).n_frames == sc.n_frames


def test_one_second_is_196_frames():
    res = run(load_scenario({"duration_s": 1.0, "robots": [{"id": 1}]}))
    assert res.n_frames == 196
    assert res.events == []


def test_missing_module_names_joint():
    doc = dict(MINIMAL, joints=[{"a": [1, 0], "b": [2, 7]}])
    assert any(e.startswith("$.joints[0].b") for e in errors_of(doc))


def test_validation_errors():
    assert any("duplicate" in e for e in errors_of(dict(MINIMAL, robots=[{"id": 1}, {"id": 1}])))
    assert any("different robots" in e for e in errors_of(dict(MINIMAL, joints=[{"a": [1, 0], "b": [1, 1]}])))
    assert any("$.params.bogus" in e for e in errors_of(dict(MINIMAL, params={"bogus": 1})))
    assert any(e.startswith("$.duration_s") or "duration_s" in e for e in errors_of({"robots": [{"id": 1}]}))
    bad_script = dict(MINIMAL, script=[{"t": 0, "kind": "send", "robot": 9, "nibble": 1, "modules": [0]}])
    assert any("unknown robot 9" in e for e in errors_of(bad_script))
    assert errors_of(dict(MINIMAL, experiment={"kind": "inchworm"}))
    shared = dict(MINIMAL, joints=[{"a": [1, 0], "b": [2, 2]}, {"a": [1, 0], "b": [2, 1]}])
    assert any("already used" in e for e in errors_of(shared))


def test_pdr_scenario_matches_standalone():
    doc = pdr_scenario(k_list=(8, 1), packets=40, seed=5)
    res = run(load_scenario(doc))
    assert res.trace_csv == pdr_csv([measure_pdr(8, 40, 40.0, 5), measure_pdr(1, 40, 40.0, 5)])


def test_runs_are_deterministic():
    doc = sync_scenario(cycles=2, audio=True)
    a, b = run(load_scenario(doc)), run(load_scenario(doc))
    assert a.events_jsonl() == b.events_jsonl()
    assert a.trace_csv == b.trace_csv
    assert all(np.array_equal(a.audio[k], b.audio[k]) for k in a.audio)
    other = run(load_scenario(dict(doc, seed=1)))
    assert not np.array_equal(other.audio["r1m1"], a.audio["r1m1"])


def test_output_layout(tmp_path):
    doc = sync_scenario(cycles=1, audio=True)
    res = run(load_scenario(doc))
    res.write(tmp_path)
    assert (tmp_path / "events.jsonl").read_text() == res.events_jsonl()
    assert (tmp_path / "trace.csv").read_text() == res.trace_csv
    wav = read_wav(tmp_path / "audio" / "r1m1.wav")
    assert len(wav) == res.n_frames * 256


def test_events_are_time_ordered():
    res = run(load_scenario(inchworm_scenario(2)))
    times = [e["t"] for e in res.events]
    assert times == sorted(times)
    for line in res.events_jsonl().splitlines():
        assert set(json.loads(line)) == {"t", "robot", "kind", "detail"}


def test_fixtures_are_builder_defaults():
    assert set(fixture_names()) == set(FIXTURE_BUILDERS)
    for name, build in FIXTURE_BUILDERS.items():
        assert read_fixture(name) == build(), name
        load_scenario(read_fixture(name))


def test_inchworm_fixture_runs_to_completion():
    res = run(load_scenario(read_fixture("inchworm3")))
    assert res.n_frames == load_scenario(read_fixture("inchworm3")).n_frames
    assert sum(e["kind"] == "inflate-target-reached" for e in res.events) == 3


def test_air_snr_follows_coupling():
    base = measure_air_snr()
    assert measure_air_snr(2 * 3.345e-3) == pytest.approx(base + 20 * np.log10(2), abs=0.3)
    res = run(load_scenario(air_scenario(n_frames=12)))
    assert res.trace_csv.splitlines()[0] == "frame,t_s,bin_amp"
    assert list(res.audio) == ["r2m0"]
    assert load_scenario(air_scenario()).experiment["bin"] == CHIRP_BIN


def test_air_experiment_validation():
    doc = air_scenario()
    doc["experiment"]["rx"] = [3, 0]
    assert any("unknown robot 3" in e for e in errors_of(doc))
