"""Deterministic frame-major simulation engine.

Each 256-sample frame runs the same pipeline: apply scripted events, let every
robot choose what its modules emit, synthesize the emissions with ring
dynamics, mix them through the channel, and hand each robot the spectrum of
the one module its receiver is connected to. All randomness comes from
generators keyed by the scenario seed, so a scenario and seed always produce
byte-identical outputs.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from piezonet.channel import (
    AirParams, ChannelGraph, ChannelParams, DelayLine, MembraneParams, ModuleInfo,
    VOLUME_RANGE, propagate_frame, sphere_radius,
)
from piezonet.link import FskParams, Mac, measure_pdr, pdr_csv
from piezonet.robots import (
    InchwormBehavior, LiftBehavior, RobotState, energy_report, module_layout, volume_step,
)
from piezonet.sensing import ContactReport, ContactSensor, SensitizedRegion, sensing_trace_csv
from piezonet.signals import (
    CHIRP_BIN, FRAME, FRAME_S, MARK_BIN, RATE, SPACE_BIN, TransducerModel,
    bin_freq, bin_projector, frame_snr_db, projected_amplitudes, spectral_frames,
    transducer_tx_gain, write_wav,
)
from piezonet.sync import PcoParams, offset_metric, sync_trace_csv

BINS = (CHIRP_BIN, SPACE_BIN, MARK_BIN)
NOISE_FLOOR_FRAMES = 20
EXPERIMENTS = ("network", "pdr", "sync", "lift", "inchworm", "contact", "tone")

_ref = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["robots", "duration_s"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "duration_s": {"type": "number"},
        "noise": {"type": "object", "properties": {"sigma": {"type": "number", "minimum": 0}},
                  "additionalProperties": False},
        "robots": {"type": "array", "items": {
            "type": "object", "required": ["id"], "additionalProperties": False,
            "properties": {
                "id": {"type": "integer", "minimum": 0},
                "n_modules": {"type": "integer", "minimum": 1, "maximum": 16},
                "volume": {"type": "number", "minimum": VOLUME_RANGE[0], "maximum": VOLUME_RANGE[1]},
                "position": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 3},
                "poles": {"type": "boolean"},
                "rear": {"type": "integer", "minimum": 0},
                "front": {"type": "integer", "minimum": 0},
            }}},
        "joints": {"type": "array", "items": {
            "type": "object", "required": ["a", "b"], "additionalProperties": False,
            "properties": {"a": _ref, "b": _ref,
                           "n_contacts": {"type": "integer", "minimum": 0, "maximum": 3}}}},
        "script": {"type": "array", "items": {
            "type": "object", "required": ["t", "kind"],
            "properties": {"t": {"type": "number", "minimum": 0},
                           "kind": {"enum": ["command", "send", "contact", "lift-init"]},
                           "robot": {"type": "integer"},
                           "module": {"type": "integer"},
                           "modules": {"type": "array", "items": {"type": "integer"}},
                           "nibble": {"type": "integer", "minimum": 0, "maximum": 14},
                           "on": {"type": "boolean"},
                           "robots": {"type": "array", "items": {"type": "integer"}},
                           "offsets_ms": {"type": "array", "items": {"type": "number", "minimum": 0}},
                           "max_offset_ms": {"type": "number", "minimum": 0}}}},
        "experiment": {"type": "object", "required": ["kind"],
                       "properties": {"kind": {"enum": list(EXPERIMENTS)}}},
        "params": {"type": "object"},
        "audio": {"type": "array", "items": _ref},
    },
}

DEFAULT_PARAMS: dict[str, Any] = {
    "ring_time_constant": 0.002,
    "highpass_cutoff": 2000.0,
    "resonance_gain_db": 6.0,
    "delta_contact": 0.05,
    "coupling_ref": AirParams().coupling_ref,
    "absorption_1k": 0.005,
    "absorption_20k": 0.5,
    "beta0": 0.5,
    "beta_slope": 2.5,
    "membrane_ref_gain": 0.3,
    "k": 8,
    "tx_amplitude": 0.5,
    "squelch": 0.02,
    "retry_limit": 8,
    "pump_rate": 0.05,
    "target_volume": 0.4,
    "deflate_after": 4.0,
    "lift_required": 4,
    "lift_max_cycles": 30,
    "sync_tap": 0,
    "pco": {},
}


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class RobotSpec:
    id: int
    n_modules: int = 4
    volume: float = 0.25
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    poles: bool = False
    rear: int | None = None
    front: int | None = None


@dataclass
class JointSpec:
    a: tuple[int, int]
    b: tuple[int, int]
    n_contacts: int = 3


@dataclass
class Scenario:
    robots: list[RobotSpec]
    duration_s: float
    joints: list[JointSpec] = field(default_factory=list)
    noise_sigma: float = 1e-3
    seed: int = 0
    script: list[dict] = field(default_factory=list)
    experiment: dict = field(default_factory=lambda: {"kind": "network"})
    params: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_PARAMS))
    audio: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return math.ceil(round(self.duration_s * RATE, 6) / FRAME)


def _path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def load_scenario(text: str | dict) -> Scenario:
    """Parse and validate a scenario, reporting every problem with its location."""
    try:
        doc = json.loads(text) if isinstance(text, str) else copy.deepcopy(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"$: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = [f"{_path(e.absolute_path)}: {e.message}"
              for e in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))]
    if errors:
        raise ScenarioError(errors)

    if doc["duration_s"] <= 0:
        errors.append("$.duration_s: must be positive")
    robots = {}
    for i, r in enumerate(doc["robots"]):
        if r["id"] in robots:
            errors.append(f"$.robots[{i}].id: duplicate robot id {r['id']}")
        pos = list(r.get("position", [0.0, 0.0])) + [0.0] * (3 - len(r.get("position", [0.0, 0.0])))
        spec = RobotSpec(r["id"], r.get("n_modules", 4), r.get("volume", 0.25), tuple(pos),
                         r.get("poles", False), r.get("rear"), r.get("front"))
        if spec.poles and spec.n_modules < 3:
            errors.append(f"$.robots[{i}].n_modules: poles need at least 3 modules")
        for key in ("rear", "front"):
            v = getattr(spec, key)
            if v is not None and v >= spec.n_modules:
                errors.append(f"$.robots[{i}].{key}: module {v} does not exist")
        robots[spec.id] = spec

    def check_ref(ref, where: str) -> None:
        rid, mod = ref
        if rid not in robots:
            errors.append(f"{where}: unknown robot {rid}")
        elif mod >= robots[rid].n_modules:
            errors.append(f"{where}: robot {rid} has no module {mod}")

    joints = []
    used: dict[tuple[int, int], int] = {}
    for i, j in enumerate(doc.get("joints", [])):
        for side in ("a", "b"):
            check_ref(j[side], f"$.joints[{i}].{side}")
            key = tuple(j[side])
            if key in used:
                errors.append(f"$.joints[{i}].{side}: module {list(key)} already used by joint {used[key]}")
            used[key] = i
        if j["a"][0] == j["b"][0]:
            errors.append(f"$.joints[{i}]: a joint must connect two different robots")
        joints.append(JointSpec(tuple(j["a"]), tuple(j["b"]), j.get("n_contacts", 3)))

    for i, ev in enumerate(doc.get("script", [])):
        where = f"$.script[{i}]"
        if ev["kind"] in ("command", "send", "contact"):
            if ev.get("robot") not in robots:
                errors.append(f"{where}.robot: unknown robot {ev.get('robot')}")
                continue
        if ev["kind"] == "contact":
            if "module" not in ev:
                errors.append(f"{where}.module: required for contact events")
            else:
                check_ref([ev["robot"], ev["module"]], f"{where}.module")
        if ev["kind"] == "send":
            if "nibble" not in ev or not ev.get("modules"):
                errors.append(f"{where}: send events need nibble and modules")
            else:
                for m in ev["modules"]:
                    check_ref([ev["robot"], m], f"{where}.modules")
        if ev["kind"] == "lift-init":
            ids = ev.get("robots", sorted(robots))
            for r in ids:
                if r not in robots:
                    errors.append(f"{where}.robots: unknown robot {r}")
            if "offsets_ms" in ev and len(ev["offsets_ms"]) != len(ids):
                errors.append(f"{where}.offsets_ms: expected {len(ids)} offsets")

    exp = doc.get("experiment", {"kind": "network"})
    if exp["kind"] == "contact":
        rid = exp.get("robot")
        if rid not in robots:
            errors.append(f"$.experiment.robot: unknown robot {rid}")
        else:
            for m in [exp.get("rx", 0), *exp.get("tx", [1, 3])]:
                check_ref([rid, m], "$.experiment")
    if exp["kind"] == "inchworm":
        for rid, spec in robots.items():
            if spec.rear is None or spec.front is None:
                errors.append(f"$.robots: robot {rid} needs rear and front modules for inchworm")
    if exp["kind"] == "tone":
        for key, dflt in (("tx", [0, 0]), ("rx", [1, 0])):
            check_ref(exp.get(key, dflt), f"$.experiment.{key}")
        if exp.get("bin", CHIRP_BIN) not in BINS:
            errors.append(f"$.experiment.bin: must be one of {list(BINS)}")
    for i, ref in enumerate(doc.get("audio", [])):
        check_ref(ref, f"$.audio[{i}]")

    params = copy.deepcopy(DEFAULT_PARAMS)
    for key, val in doc.get("params", {}).items():
        if key not in DEFAULT_PARAMS:
            errors.append(f"$.params.{key}: unknown parameter")
        else:
            params[key] = val
    if errors:
        raise ScenarioError(errors)
    return Scenario(robots=list(robots.values()), duration_s=float(doc["duration_s"]), joints=joints,
                    noise_sigma=doc.get("noise", {}).get("sigma", 1e-3), seed=doc.get("seed", 0),
                    script=sorted(doc.get("script", []), key=lambda e: e["t"]), experiment=exp,
                    params=params, audio=[tuple(a) for a in doc.get("audio", [])])


@dataclass
class RunResult:
    events: list[dict]
    trace_csv: str
    audio: dict[str, np.ndarray]
    n_frames: int
    summary: dict = field(default_factory=dict)

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.jsonl").write_text(self.events_jsonl())
        (out / "trace.csv").write_text(self.trace_csv)
        if self.audio:
            (out / "audio").mkdir(exist_ok=True)
            for label, x in sorted(self.audio.items()):
                write_wav(out / "audio" / f"{label}.wav", x)


def _module_label(robot: int, module: int) -> str:
    return f"r{robot}m{module}"


class _Robot:
    """Engine-side bundle of one robot's state machines."""

    def __init__(self, spec: RobotSpec, gids: list[int], mac: Mac) -> None:
        self.spec = spec
        self.gids = gids
        self.state = RobotState(spec.id, spec.n_modules, spec.volume, layout=module_layout(spec.n_modules, spec.poles))
        self.mac = mac
        self.inchworm: InchwormBehavior | None = None
        self.lift: LiftBehavior | None = None
        self.sensor: ContactSensor | None = None
        self.last_report: ContactReport | None = None
        self.floor_samples: list[float] = []
        self.noise_floor: float | None = None


class Engine:
    def __init__(self, scenario: Scenario) -> None:
        self.sc = scenario
        p = scenario.params
        self.model = TransducerModel(highpass_cutoff=p["highpass_cutoff"],
                                     resonance_gain_db=p["resonance_gain_db"],
                                     ring_time_constant=p["ring_time_constant"])
        chan = ChannelParams(
            membrane=MembraneParams(p["beta0"], p["beta_slope"], p["membrane_ref_gain"]),
            air=AirParams(p["absorption_1k"], p["absorption_20k"], p["coupling_ref"]),
            noise_sigma=scenario.noise_sigma, delta_contact=p["delta_contact"])
        self.fsk = FskParams(k=p["k"], tx_amplitude=p["tx_amplitude"])
        self.pco = PcoParams(ring_time_constant=p["ring_time_constant"], **p["pco"])

        modules: list[ModuleInfo] = []
        self.robots: dict[int, _Robot] = {}
        self.gid_of: dict[tuple[int, int], int] = {}
        for spec in scenario.robots:
            layout = module_layout(spec.n_modules, spec.poles)
            gids = []
            for i, d in enumerate(layout):
                g = len(modules)
                modules.append(ModuleInfo(g, spec.id, i, d))
                self.gid_of[(spec.id, i)] = g
                gids.append(g)
            rng = np.random.default_rng([scenario.seed, 0x4D4143, spec.id])
            mac = Mac(spec.n_modules, self.fsk, rng, squelch=p["squelch"], retry_limit=p["retry_limit"])
            self.robots[spec.id] = _Robot(spec, gids, mac)
            self.robots[spec.id].state.pump_rate = p["pump_rate"]
        joints = [(self.gid_of[j.a], self.gid_of[j.b], j.n_contacts) for j in scenario.joints]
        self.graph = ChannelGraph(modules, {s.id: s.position for s in scenario.robots},
                                  {s.id: s.volume for s in scenario.robots}, joints, chan)
        self.delay_line = DelayLine(len(modules), BINS, self.graph.max_delay())
        self.tx_gain = np.array([transducer_tx_gain(self.model, bin_freq(b)) for b in BINS])
        t = np.arange(FRAME)
        self.sines = np.stack([np.sin(2 * np.pi * b * t / FRAME) for b in BINS])
        self.decay = self.model.ring_decay(FRAME)
        self.frame_decay = 0.0 if self.model.ring_time_constant <= 0 else math.exp(
            -FRAME / (RATE * self.model.ring_time_constant))
        self.env = np.zeros((len(modules), len(BINS)))
        self.projector = bin_projector(BINS)
        self.events: list[tuple[int, int, str, int, dict]] = []
        self._seq = 0
        self.audio = {g: [] for g in (self.gid_of[tuple(a)] for a in scenario.audio)}
        self.sync_reports: dict[int, list] = {}
        self.sensing_rows: list = []
        self.volume_rows: list = []
        self._script = [(self._frame_of(ev["t"]), i, ev) for i, ev in enumerate(scenario.script)]
        self._setup_experiment()

    # ------------------------------------------------------------------ setup
    @staticmethod
    def _frame_of(t: float) -> int:
        return math.ceil(round(t / FRAME_S, 9))

    def _setup_experiment(self) -> None:
        exp = self.sc.experiment
        p = self.sc.params
        kind = exp["kind"]
        for r in self.robots.values():
            if r.spec.rear is not None and r.spec.front is not None:
                r.inchworm = InchwormBehavior(r.spec.rear, r.spec.front, p["target_volume"], p["deflate_after"])
        if kind == "contact":
            rob = self.robots[exp["robot"]]
            region = SensitizedRegion(exp.get("rx", 0), tuple(exp.get("tx", [1, 3])))
            rob.sensor = ContactSensor(region)
        self.fixed_tone: tuple[int, int, float] | None = None
        self.tone_rx: int | None = None
        if kind == "tone":
            tx, rx = tuple(exp.get("tx", [0, 0])), tuple(exp.get("rx", [1, 0]))
            self.fixed_tone = (self.gid_of[tx], BINS.index(exp.get("bin", CHIRP_BIN)), exp.get("amplitude", 0.5))
            self.tone_rx = self.gid_of[rx]
            self.audio.setdefault(self.tone_rx, [])
        if kind == "sync":
            offsets = exp.get("offsets_ms", [0.0] * len(self.robots))
            self._script.append((0, -1, {"kind": "lift-init", "offsets_ms": offsets, "sync_only": True}))
            self._script.sort(key=lambda x: (x[0], x[1]))

    def emit(self, frame: int, robot: int, kind: str, detail: dict) -> None:
        self.events.append((frame, robot, kind, self._seq, detail))
        self._seq += 1

    def _apply_script(self, frame: int) -> None:
        while self._script and self._script[0][0] <= frame:
            _, _, ev = self._script.pop(0)
            kind = ev["kind"]
            if kind == "contact":
                self.graph.set_contact(self.gid_of[(ev["robot"], ev["module"])], ev.get("on", True))
                self.emit(frame, ev["robot"], "contact-on" if ev.get("on", True) else "contact-off",
                          {"module": ev["module"]})
            elif kind == "command":
                rob = self.robots[ev["robot"]]
                if rob.inchworm is not None:
                    rob.inchworm.trigger(frame, rob.state, self._emitter(rob.spec.id))
            elif kind == "send":
                self.robots[ev["robot"]].mac.send(ev["nibble"], tuple(ev["modules"]))
            elif kind == "lift-init":
                self._lift_init(frame, ev)

    def _lift_init(self, frame: int, ev: dict) -> None:
        ids = ev.get("robots", sorted(self.robots))
        if "offsets_ms" in ev:
            offsets = [float(o) for o in ev["offsets_ms"]]
        else:
            rng = np.random.default_rng([self.sc.seed, 0x4C494654])
            offsets = [float(x) for x in rng.uniform(0.0, ev.get("max_offset_ms", 300.0), len(ids))]
        p = self.sc.params
        sync_only = ev.get("sync_only", False)
        for rid, off in zip(ids, offsets):
            rob = self.robots[rid]
            rob.lift = LiftBehavior(self.pco, len(ids), p["lift_required"] if not sync_only else 10 ** 9,
                                    p["lift_max_cycles"] if not sync_only else 10 ** 9, p["target_volume"])
            floor = rob.noise_floor if rob.noise_floor is not None else 0.0
            rob.lift.initiate(frame, int(round(off / 1000.0 / FRAME_S)), floor, rob.state)
            self.emit(frame, rid, "lift-init", {"offset_ms": round(off, 3), "group": len(ids)})
            self.sync_reports[rid] = rob.lift.reports

    def _emitter(self, rid: int):
        return lambda frame, kind, detail: self.emit(frame, rid, kind, detail)

    # ---------------------------------------------------------------- frames
    def _tap(self, rob: _Robot) -> int | None:
        if rob.lift is not None and rob.lift.phase in ("syncing", "armed"):
            return self.sc.params["sync_tap"]
        if rob.sensor is not None:
            return rob.sensor.region.rx_module
        return rob.mac.tap()

    def step(self, frame: int) -> None:
        self._apply_script(frame)
        m = self.graph.n_modules
        drive = np.zeros((m, len(BINS)))
        taps: dict[int, int | None] = {}
        for rid, rob in self.robots.items():
            em = self._emitter(rid)
            for ev in rob.mac.begin_frame(frame):
                self._mac_event(rob, ev)
            if rob.inchworm is not None:
                rob.inchworm.step(frame, rob.state, rob.mac, em)
            if rob.lift is not None:
                rob.lift.step(frame, rob.state, em)
            st = rob.state
            if rob.lift is not None and rob.lift.chirping(frame):
                drive[rob.gids, 0] = self.pco.chirp_amplitude
                st.driven_frames["sync"] += len(rob.gids)
            elif (tx := rob.mac.tx_drive()):
                for mod, b in tx.items():
                    drive[rob.gids[mod], BINS.index(b)] = self.fsk.tx_amplitude
                st.driven_frames["link"] += len(tx)
            elif rob.sensor is not None:
                mod, b = rob.sensor.drive(frame)
                drive[rob.gids[mod], BINS.index(b)] = rob.sensor.region.amplitude
                st.driven_frames["sensing"] += 1
            taps[rid] = self._tap(rob)

        if self.fixed_tone is not None:
            g, b, amp = self.fixed_tone
            drive[g, b] = amp
            self.robots[self.graph.modules[g].robot].state.driven_frames["link"] += 1

        # first-order envelope per module and bin, continuous across frames
        env = drive[:, :, None] + (self.env - drive)[:, :, None] * self.decay[None, None, :]
        self.env = drive + (self.env - drive) * self.frame_decay
        emitted = env * (self.tx_gain[:, None] * self.sines)[None, :, :]
        comps = {g: {b: emitted[g, i] for i, b in enumerate(BINS)} for g in np.flatnonzero(np.any(env != 0, axis=(1, 2)))}
        observed = {self.robots[rid].gids[t] for rid, t in taps.items() if t is not None} | set(self.audio)
        rx = propagate_frame(self.graph, comps, frame, self.sc.seed, self.delay_line, BINS, observed)
        for g in self.audio:
            self.audio[g].append(rx[g])

        for rid, rob in self.robots.items():
            tap = taps[rid]
            if tap is None:
                rob.mac.end_frame(frame, None)
                continue
            amps = projected_amplitudes(rx[rob.gids[tap]], self.projector)[0]
            a31, space, mark = float(amps[0]), float(amps[1]), float(amps[2])
            if frame < NOISE_FLOOR_FRAMES:
                rob.floor_samples.append(a31)
                if frame == NOISE_FLOOR_FRAMES - 1:
                    rob.noise_floor = float(np.median(rob.floor_samples))
                    if rob.lift is not None and rob.lift.clock is not None:
                        rob.lift.clock.noise_floor = rob.noise_floor
            if rob.lift is not None:
                rob.lift.observe(frame, a31, self._emitter(rid))
            if rob.sensor is not None:
                up = rob.sensor.step(frame, a31)
                if up is not None:
                    for tx in rob.sensor.region.tx_ring:
                        self.sensing_rows.append((rob.sensor.region.rx_module, up, tx))
                    # log the first report and every change after it
                    if up.index == 0 or up.report != rob.last_report:
                        self.emit(frame, rid, "contact-report",
                                  {"kind": up.report.kind, "sources": list(up.report.sources)})
                    rob.last_report = up.report
            listening = tap == rob.mac.tap()
            for ev in rob.mac.end_frame(frame, (space, mark) if listening else None):
                self._mac_event(rob, ev)

        for rid, rob in self.robots.items():
            if volume_step(rob.state):
                self.graph.set_volume(rid, rob.state.volume)
            if frame % 20 == 0:
                self.volume_rows.append((frame, rid, rob.state.volume, rob.state.pump_on, rob.state.valve_open,
                                         rob.state.energy_j))

    def _mac_event(self, rob: _Robot, ev) -> None:
        rid = rob.spec.id
        em = self._emitter(rid)
        if ev.kind == "packet-received":
            self.emit(ev.frame, rid, "packet-received", {"module": ev.module, "data": ev.data})
            if rob.inchworm is not None:
                rob.inchworm.on_packet(ev.frame, ev.module, ev.data, rob.state, em)
        elif ev.kind == "delivered":
            self.emit(ev.frame, rid, "packet-delivered", {"data": ev.data, "attempt": ev.attempt})
            if rob.inchworm is not None:
                rob.inchworm.on_delivered(ev.frame, ev.data, em)
        elif ev.kind == "delivery-failed":
            self.emit(ev.frame, rid, "delivery-failed", {"data": ev.data, "attempts": ev.attempt})
            if rob.inchworm is not None:
                rob.inchworm.on_failed(ev.frame, ev.data, em)
        elif ev.kind == "sent":
            self.emit(ev.frame, rid, "packet-sent", {"data": ev.data, "attempt": ev.attempt})

    # ---------------------------------------------------------------- output
    def finish(self, n_frames: int) -> RunResult:
        events = [{"t": round(f * FRAME_S, 5), "robot": r, "kind": k, "detail": d}
                  for f, r, k, _, d in sorted(self.events, key=lambda e: (e[0], e[1], e[2], e[3]))]
        kind = self.sc.experiment["kind"]
        if kind in ("sync", "lift"):
            trace = sync_trace_csv(self.sync_reports, self.pco.period_frames * FRAME_S)
        elif kind == "contact":
            trace = sensing_trace_csv(self.sensing_rows)
        elif kind == "tone":
            trace = _tone_csv(np.concatenate(self.audio[self.tone_rx]), self.sc.experiment.get("bin", CHIRP_BIN))
        else:
            trace = _volume_csv(self.volume_rows)
        audio = {_module_label(self.graph.modules[g].robot, self.graph.modules[g].index): np.concatenate(x)
                 for g, x in self.audio.items() if x}
        summary = {"energy": {rid: energy_report(r.state) for rid, r in self.robots.items()}}
        if kind in ("sync", "lift") and len(self.sync_reports) > 1:
            onsets = {rid: {r.cycle: r.onset_frame * FRAME_S for r in reps}
                      for rid, reps in self.sync_reports.items()}
            summary["offsets_ms"] = offset_metric(onsets, self.pco.period_frames * FRAME_S)
        return RunResult(events, trace, audio, n_frames, summary)


def _tone_csv(samples: np.ndarray, tone_bin: int) -> str:
    amps = spectral_frames(samples)[:, tone_bin]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "t_s", "bin_amp"])
    for f, a in enumerate(amps):
        w.writerow([f, f"{f * FRAME_S:.5f}", f"{a:.6e}"])
    return buf.getvalue()


def _volume_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "robot_id", "volume_m3", "pump_on", "valve_open", "energy_j"])
    for f, rid, v, pump, valve, e in rows:
        w.writerow([f"{f * FRAME_S:.5f}", rid, f"{v:.6f}", int(pump), int(valve), f"{e:.6f}"])
    return buf.getvalue()


def run(scenario: Scenario, stop_when_done: bool = False) -> RunResult:
    """Run a validated scenario to its end and collect events and traces.

    With ``stop_when_done`` a lift run ends early once every lifting robot has
    reached its target or aborted.
    """
    kind = scenario.experiment["kind"]
    if kind == "pdr":
        exp = scenario.experiment
        results = [measure_pdr(k, exp.get("packets", 1000), exp.get("snr_db", 40.0), scenario.seed,
                               exp.get("n_contacts", 3), scenario.params["tx_amplitude"],
                               TransducerModel(ring_time_constant=scenario.params["ring_time_constant"]))
                   for k in exp.get("k_list", [32, 16, 8, 4, 2, 1])]
        events = [{"t": 0.0, "robot": -1, "kind": "pdr", "detail": {"k": r.k, "pdr": r.pdr}} for r in results]
        return RunResult(events, pdr_csv(results), {}, 0, {"pdr": {r.k: r.pdr for r in results}})
    eng = Engine(scenario)
    n = scenario.n_frames
    done_frames = n
    for f in range(n):
        eng.step(f)
        if stop_when_done and kind == "lift" and _lift_finished(eng):
            done_frames = f + 1
            break
    return eng.finish(done_frames)


def _lift_finished(eng: Engine) -> bool:
    lifts = [r.lift for r in eng.robots.values() if r.lift is not None]
    return bool(lifts) and all(l.phase in ("done", "aborted") for l in lifts)


# ------------------------------------------------------------ scenario builders

def _polygon(n: int, side: float) -> list[list[float]]:
    if n == 1:
        return [[0.0, 0.0]]
    rad = side / (2.0 * math.sin(math.pi / n))
    return [[round(rad * math.cos(2 * math.pi * i / n), 9), round(rad * math.sin(2 * math.pi * i / n), 9)]
            for i in range(n)]


def sync_scenario(robots: int = 2, offset_ms: float = 250.0, period_ms: float = 2000.0,
                  cycles: int = 10, seed: int = 0, spacing: float = 1.0, audio: bool = False) -> dict:
    """Robots on a regular polygon with the given spacing; chirp offsets spread evenly up to ``offset_ms``."""
    offsets = [offset_ms * i / (robots - 1) if robots > 1 else 0.0 for i in range(robots)]
    doc = {
        "seed": seed,
        "duration_s": round((cycles + 1) * period_ms / 1000.0 + offset_ms / 1000.0 + 0.2, 6),
        "robots": [{"id": i + 1, "position": p} for i, p in enumerate(_polygon(robots, spacing))],
        "experiment": {"kind": "sync", "offsets_ms": offsets},
        "params": {"pco": {"period_s": period_ms / 1000.0}},
    }
    if audio:
        doc["audio"] = [[1, 1]]
    return doc


def lift_scenario(robots: int = 3, max_offset_ms: float = 300.0, seed: int = 0,
                  spacing: float = 1.0, duration_s: float = 70.0) -> dict:
    return {
        "seed": seed,
        "duration_s": duration_s,
        "robots": [{"id": i + 1, "position": p} for i, p in enumerate(_polygon(robots, spacing))],
        "script": [{"t": 0.0, "kind": "lift-init", "max_offset_ms": max_offset_ms}],
        "experiment": {"kind": "lift"},
    }


def inchworm_scenario(robots: int = 3, seed: int = 0, duration_s: float | None = None) -> dict:
    """A chain: each robot's front module (0) touches the next robot's rear module (2)."""
    gap = 2.0 * sphere_radius(0.25)
    return {
        "seed": seed,
        "duration_s": duration_s if duration_s is not None else round(4.5 * robots + 3.0, 6),
        "robots": [{"id": i + 1, "position": [round(i * gap, 9), 0.0], "rear": 2, "front": 0}
                   for i in range(robots)],
        "joints": [{"a": [i + 1, 0], "b": [i + 2, 2], "n_contacts": 3} for i in range(robots - 1)],
        "script": [{"t": 0.2, "kind": "command", "robot": 1}],
        "experiment": {"kind": "inchworm"},
    }


def contact_scenario(sources: int = 2, seed: int = 0, contact_on: float | None = 2.0,
                     contact_off: float | None = 5.0, duration_s: float = 8.0,
                     on_receiver: bool = False) -> dict:
    """One robot, receiver module 0, sources spread over the other equator modules."""
    if not 1 <= sources <= 3:
        raise ValueError("the default layout supports 1 to 3 sources")
    tx = {1: [1], 2: [1, 3], 3: [1, 2, 3]}[sources]
    target = 0 if on_receiver else tx[0]
    script = []
    if contact_on is not None:
        script.append({"t": contact_on, "kind": "contact", "robot": 1, "module": target, "on": True})
        if contact_off is not None:
            script.append({"t": contact_off, "kind": "contact", "robot": 1, "module": target, "on": False})
    return {
        "seed": seed,
        "duration_s": duration_s,
        "robots": [{"id": 1, "position": [0.0, 0.0]}],
        "script": script,
        "experiment": {"kind": "contact", "robot": 1, "rx": 0, "tx": tx},
    }


def link_scenario(nibble: int = 0xA, seed: int = 0, n_contacts: int = 3, duration_s: float = 4.0) -> dict:
    """Two joined robots; robot 1 sends one nibble through its front module."""
    return {
        "seed": seed,
        "duration_s": duration_s,
        "robots": [{"id": 1, "position": [0.0, 0.0]},
                   {"id": 2, "position": [round(2.0 * sphere_radius(0.25), 9), 0.0]}],
        "joints": [{"a": [1, 0], "b": [2, 2], "n_contacts": n_contacts}],
        "script": [{"t": 0.1, "kind": "send", "robot": 1, "nibble": nibble, "modules": [0]}],
        "experiment": {"kind": "network"},
    }


def pdr_scenario(k_list: tuple[int, ...] = (32, 16, 8, 4, 2, 1), packets: int = 1000,
                 snr_db: float = 40.0, seed: int = 0) -> dict:
    return {
        "seed": seed,
        "duration_s": 1.0,
        "robots": [{"id": 1}, {"id": 2, "position": [0.78, 0.0]}],
        "joints": [{"a": [1, 0], "b": [2, 2], "n_contacts": 3}],
        "experiment": {"kind": "pdr", "k_list": list(k_list), "packets": packets, "snr_db": snr_db},
    }


def air_scenario(coupling_ref: float | None = None, seed: int = 0, n_frames: int = 110,
                 distance: float = 1.0) -> dict:
    """One module of robot 1 holds a chirp-bin tone; robot 2's module 0 listens at ``distance``."""
    doc = {
        "seed": seed,
        "duration_s": round(n_frames * FRAME_S, 9),
        "robots": [{"id": 1, "position": [0.0, 0.0]}, {"id": 2, "position": [distance, 0.0]}],
        "experiment": {"kind": "tone", "tx": [1, 0], "rx": [2, 0], "bin": CHIRP_BIN, "amplitude": 0.5},
    }
    if coupling_ref is not None:
        doc["params"] = {"coupling_ref": coupling_ref}
    return doc


AIR_SETTLE_FRAMES = 10


def measure_air_snr(coupling_ref: float | None = None, seed: int = 0, n_frames: int = 100,
                    distance: float = 1.0) -> float:
    """Frame SNR of the chirp-bin tone at the far robot, after the ring-up has settled."""
    res = run(load_scenario(air_scenario(coupling_ref, seed, n_frames + AIR_SETTLE_FRAMES, distance)))
    x = next(iter(res.audio.values()))
    return frame_snr_db(x[AIR_SETTLE_FRAMES * FRAME:], CHIRP_BIN)


def calibrate_air(target_db: float = 7.0, tol_db: float = 0.01, seed: int = 0,
                  n_frames: int = 100) -> tuple[float, float]:
    """Bisect coupling_ref (log scale) until the measured SNR is within ``tol_db`` of the target."""
    lo, hi = 1e-5, 1e-1
    best = (math.sqrt(lo * hi), -math.inf)
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        snr = measure_air_snr(mid, seed, n_frames)
        best = (mid, snr)
        if abs(snr - target_db) <= tol_db:
            break
        if snr < target_db:
            lo = mid
        else:
            hi = mid
    return best
