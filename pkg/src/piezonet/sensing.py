"""Contact sensing from tone attenuation around a receiver module.

Modules in a ring around a receiver take turns emitting a steady tone. The
receiver averages the tone amplitude it hears from each source and reports a
1 Hz mean per source. Pressing on a module damps every path through it, so a
source whose mean collapses is in contact, and a collapse of all sources at
once points at the receiver itself.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from piezonet.signals import CHIRP_BIN, FRAME, RATE

A_MOD = 3.141592653589793 * 0.015 ** 2


@dataclass(frozen=True)
class SensitizedRegion:
    rx_module: int
    tx_ring: tuple[int, ...]
    tone_bin: int = CHIRP_BIN
    dwell: float = 0.25
    update_period: float = 1.0
    amplitude: float = 0.5
    settle_frames: int = 2
    engage: float = 0.10
    release: float = 0.5

    def __post_init__(self) -> None:
        if not self.tx_ring:
            raise ValueError("sensitized region needs at least one source")
        if self.rx_module in self.tx_ring:
            raise ValueError("receiver cannot also be a source")
        if self.dwell <= 0 or self.update_period < self.dwell:
            raise ValueError("dwell must be positive and no longer than the update period")

    @property
    def dwell_samples(self) -> int:
        return int(round(self.dwell * RATE))

    @property
    def update_samples(self) -> int:
        return int(round(self.update_period * RATE))

    def slot(self, frame: int) -> int:
        """Dwell slot containing the start of ``frame``."""
        return frame * FRAME // self.dwell_samples

    def active_source(self, frame: int) -> int:
        return self.tx_ring[self.slot(frame) % len(self.tx_ring)]

    def slot_start(self, slot: int) -> int:
        return -(-slot * self.dwell_samples // FRAME)

    def update_index(self, frame: int) -> int:
        return frame * FRAME // self.update_samples


@dataclass(frozen=True)
class ContactReport:
    kind: str  # none | at-source | at-receiver
    sources: tuple[int, ...] = ()


def detect_contact(amps: dict[int, float], baselines: dict[int, float],
                   flagged: set[int] | None = None, engage: float = 0.10,
                   release: float = 0.5) -> tuple[ContactReport, set[int]]:
    """Classify one update of per-source means.

    A source is flagged below ``engage`` times its baseline and stays flagged
    until it climbs back above ``release`` times the baseline.
    """
    prev = set(flagged or ())
    now: set[int] = set()
    for s, a in amps.items():
        base = baselines[s]
        if s in prev:
            if a <= release * base:
                now.add(s)
        elif a < engage * base:
            now.add(s)
    if not now:
        return ContactReport("none"), now
    if now == set(amps):
        return ContactReport("at-receiver", tuple(sorted(now))), now
    return ContactReport("at-source", tuple(sorted(now))), now


@dataclass
class SensingUpdate:
    t_s: float
    index: int
    means: dict[int, float]
    baselines: dict[int, float]
    flagged: set[int]
    report: ContactReport


@dataclass
class ContactSensor:
    """Per-robot sensing state machine driven once per frame."""

    region: SensitizedRegion
    baselines: dict[int, float] = field(default_factory=dict)
    flagged: set[int] = field(default_factory=set)
    _sums: dict[int, float] = field(default_factory=dict)
    _counts: dict[int, int] = field(default_factory=dict)

    def drive(self, frame: int) -> tuple[int, int]:
        """(module, bin) to drive in this frame."""
        return self.region.active_source(frame), self.region.tone_bin

    def step(self, frame: int, amp: float) -> SensingUpdate | None:
        reg = self.region
        slot = reg.slot(frame)
        if frame - reg.slot_start(slot) >= reg.settle_frames:
            src = reg.active_source(frame)
            self._sums[src] = self._sums.get(src, 0.0) + amp
            self._counts[src] = self._counts.get(src, 0) + 1
        u = reg.update_index(frame)
        if reg.update_index(frame + 1) == u:
            return None
        means = {s: self._sums[s] / self._counts[s] for s in reg.tx_ring if self._counts.get(s)}
        self._sums.clear()
        self._counts.clear()
        if not self.baselines:
            # warm-up update: the first full second is taken as contact-free
            self.baselines = dict(means)
            report, self.flagged = ContactReport("none"), set()
        else:
            report, self.flagged = detect_contact(means, self.baselines, self.flagged,
                                                  reg.engage, reg.release)
        t = (frame + 1) * FRAME / RATE
        return SensingUpdate(t, u, means, dict(self.baselines), set(self.flagged), report)


SENSING_COLUMNS = ["t_s", "rx", "tx", "mean_amp", "baseline", "flag"]


def sensing_trace_csv(rows: list[tuple[object, SensingUpdate, int]]) -> str:
    """Rows of ``(rx label, update, tx module)`` rendered as the sensing trace."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SENSING_COLUMNS)
    for rx, up, tx in rows:
        w.writerow([f"{up.t_s:.4f}", rx, tx, f"{up.means.get(tx, 0.0):.6e}",
                    f"{up.baselines.get(tx, 0.0):.6e}", int(tx in up.flagged)])
    return buf.getvalue()
