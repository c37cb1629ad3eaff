"""Robot bodies and the two decentralized behaviors.

A robot is a sphere of variable volume carrying acoustic modules on its
membrane. Its pump and valve change the volume open-loop. The inchworm
behavior passes an inflate command down a chain one robot at a time. The lift
behavior synchronizes chirp clocks and inflates every robot together once the
clocks have agreed for enough consecutive periods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from piezonet.channel import VOLUME_RANGE, sphere_radius
from piezonet.signals import FRAME_S
from piezonet.sync import CycleReport, PcoParams, PulseCoupledClock

INFLATE_NIBBLE = 0x1
POWER_ACTIVE = 0.060
FUNCTIONS = ("link", "sync", "sensing")


def module_layout(n_modules: int, poles: bool = False) -> list[tuple[float, float, float]]:
    """Unit directions: equally spaced longitudes on the equator, optionally plus both poles."""
    n_eq = n_modules - 2 if poles else n_modules
    if n_eq < 1:
        raise ValueError("need at least one equatorial module")
    dirs = [(math.cos(2 * math.pi * i / n_eq), math.sin(2 * math.pi * i / n_eq), 0.0) for i in range(n_eq)]
    if poles:
        dirs += [(0.0, 0.0, 1.0), (0.0, 0.0, -1.0)]
    return [tuple(round(c, 15) for c in d) for d in dirs]


@dataclass
class RobotState:
    id: int
    n_modules: int = 4
    volume: float = 0.25
    pump_on: bool = False
    valve_open: bool = False
    pump_rate: float = 0.05
    layout: list[tuple[float, float, float]] = field(default_factory=list)
    behavior: str = "idle"
    driven_frames: dict[str, int] = field(default_factory=lambda: {f: 0 for f in FUNCTIONS})

    def __post_init__(self) -> None:
        if not self.layout:
            self.layout = module_layout(self.n_modules)
        lo, hi = VOLUME_RANGE
        if not lo <= self.volume <= hi:
            raise ValueError(f"volume must be in [{lo}, {hi}]")

    @property
    def radius(self) -> float:
        return sphere_radius(self.volume)

    def geodesic(self, i: int, j: int) -> float:
        cosang = float(np.clip(np.dot(self.layout[i], self.layout[j]), -1.0, 1.0))
        return self.radius * math.acos(cosang)

    @property
    def energy_j(self) -> float:
        return POWER_ACTIVE * FRAME_S * sum(self.driven_frames.values())


def volume_step(state: RobotState, dt: float = FRAME_S) -> bool:
    """Integrate pump and valve for ``dt``; returns True when the volume changed."""
    v = state.volume
    if state.pump_on:
        v += state.pump_rate * dt
    if state.valve_open:
        v -= state.pump_rate * dt
    lo, hi = VOLUME_RANGE
    v = min(hi, max(lo, v))
    changed = v != state.volume
    state.volume = v
    return changed


def energy_report(state: RobotState) -> dict[str, float]:
    out = {f: POWER_ACTIVE * FRAME_S * n for f, n in state.driven_frames.items()}
    out["total"] = state.energy_j
    return out


class MacPort(Protocol):
    def send(self, data: int, modules: tuple[int, ...]) -> None: ...


Emit = Callable[[int, str, dict], None]


@dataclass
class InchwormBehavior:
    """Inflate on command, forward the command, then deflate after a hold."""

    rear: int
    front: int
    target_volume: float = 0.4
    deflate_after: float = 4.0
    phase: str = "idle"  # idle | inflating | forwarding | holding | deflating | stalled
    _hold_until: int = 0

    def trigger(self, frame: int, state: RobotState, emit: Emit) -> None:
        if self.phase != "idle":
            return
        self.phase = "inflating"
        state.behavior = "inchworm"
        state.pump_on = True
        state.valve_open = False
        emit(frame, "inflate-start", {"volume": round(state.volume, 6)})

    def on_packet(self, frame: int, module: int, data: int, state: RobotState, emit: Emit) -> None:
        if data == INFLATE_NIBBLE and module == self.rear:
            self.trigger(frame, state, emit)

    def step(self, frame: int, state: RobotState, mac: MacPort, emit: Emit) -> None:
        if self.phase == "inflating" and state.volume >= self.target_volume - 1e-12:
            state.pump_on = False
            self.phase = "forwarding"
            emit(frame, "inflate-target-reached", {"volume": round(state.volume, 6)})
            mac.send(INFLATE_NIBBLE, (self.front,))
        elif self.phase == "holding" and frame >= self._hold_until:
            self.phase = "deflating"
            state.valve_open = True
            emit(frame, "deflate-start", {"volume": round(state.volume, 6)})
        elif self.phase == "deflating" and state.volume <= VOLUME_RANGE[0] + 1e-12:
            state.valve_open = False
            self.phase = "idle"
            state.behavior = "idle"

    def on_delivered(self, frame: int, data: int, emit: Emit) -> None:
        if self.phase == "forwarding" and data == INFLATE_NIBBLE:
            self.phase = "holding"
            self._hold_until = frame + int(round(self.deflate_after / FRAME_S))
            emit(frame, "packet-forwarded", {"module": self.front, "data": data})

    def on_failed(self, frame: int, data: int, emit: Emit) -> None:
        if self.phase == "forwarding" and data == INFLATE_NIBBLE:
            self.phase = "stalled"
            emit(frame, "stall", {"module": self.front, "data": data})


@dataclass
class LiftBehavior:
    """Chirp until synchronized for ``required`` periods, then inflate at the next chirp onset."""

    params: PcoParams
    group_size: int
    required: int = 4
    max_cycles: int = 30
    target_volume: float = 0.4
    clock: PulseCoupledClock | None = None
    phase: str = "idle"  # idle | syncing | armed | inflating | done | aborted
    streak: int = 0
    reports: list[CycleReport] = field(default_factory=list)

    def initiate(self, frame: int, offset_frames: int, noise_floor: float, state: RobotState) -> None:
        self.clock = PulseCoupledClock(self.params, frame + offset_frames, noise_floor)
        self.phase = "syncing"
        state.behavior = "lift"

    def chirping(self, frame: int) -> bool:
        return self.phase in ("syncing", "armed") and self.clock.chirping(frame)

    def observe(self, frame: int, amp: float, emit: Emit) -> None:
        if self.phase not in ("syncing", "armed"):
            return
        rep = self.clock.observe(frame, amp)
        if rep is None or self.phase != "syncing":
            return
        self.reports.append(rep)
        # a lone robot has nobody to agree with
        synced = rep.synchronized and self.group_size > 1
        self.streak = self.streak + 1 if synced else 0
        if synced:
            emit(frame, "sync-period", {"cycle": rep.cycle, "streak": self.streak})
        if self.streak >= self.required:
            self.phase = "armed"
        elif rep.cycle + 1 >= self.max_cycles:
            self.phase = "aborted"
            emit(frame, "lift-abort", {"cycles": rep.cycle + 1})

    def step(self, frame: int, state: RobotState, emit: Emit) -> None:
        if self.phase == "armed" and frame == self.clock.onset:
            self.phase = "inflating"
            state.pump_on = True
            emit(frame, "lift-start", {"cycle": self.clock.cycle, "streak": self.streak})
            emit(frame, "inflate-start", {"volume": round(state.volume, 6)})
        elif self.phase == "inflating" and state.volume >= self.target_volume - 1e-12:
            state.pump_on = False
            self.phase = "done"
            emit(frame, "inflate-target-reached", {"volume": round(state.volume, 6)})
