"""Pulse-coupled clock synchronization over audible chirps.

Each robot runs a cycle of ``t_a`` silent frames, a chirp of ``t_chirp`` on all
of its modules, then ``t_b`` silent frames. Chirps heard during ``t_a`` mean
peers are ahead and chirps heard during ``t_b`` mean they are behind. At cycle
end the chirp moves toward the side with more detected frames while the
period stays fixed.

All timing is kept in whole frames on the receiver's frame grid. The own chirp
and the first frames of its ring-down are blanked; the frame after the blank
uses a raised threshold that accounts for the remaining own ring-down. With
this, a peer offset by a single frame is visible from both sides, so "no
detections" means exact alignment for every robot at once.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from piezonet.signals import CHIRP_BIN, FRAME_S


@dataclass(frozen=True)
class PcoParams:
    period_s: float = 2.0
    t_chirp: float = 0.1
    t_shift_max: float = 0.025
    t_a0: float | None = None
    chirp_bin: int = CHIRP_BIN
    chirp_amplitude: float = 0.5
    detect_threshold: float = 4.0
    tail_blank_frames: int = 2
    tail_guard: float = 3.0
    min_run_frames: int = 3
    expected_run_frames: int | None = None
    share: str = "half"  # half | full
    ring_time_constant: float = 0.002

    def __post_init__(self) -> None:
        if self.share not in ("half", "full"):
            raise ValueError("share must be 'half' or 'full'")
        if self.period_frames <= self.chirp_frames:
            raise ValueError("period must exceed the chirp duration")

    @property
    def period_frames(self) -> int:
        return int(round(self.period_s / FRAME_S))

    @property
    def chirp_frames(self) -> int:
        return int(round(self.t_chirp / FRAME_S))

    @property
    def shift_cap_frames(self) -> int:
        return int(round(self.t_shift_max / FRAME_S))

    @property
    def t_a0_frames(self) -> int:
        if self.t_a0 is None:
            return (self.period_frames - self.chirp_frames) // 2
        return int(round(self.t_a0 / FRAME_S))

    @property
    def run_frames(self) -> int:
        """Frames a peer chirp is expected to stay above threshold (chirp plus ring-down)."""
        if self.expected_run_frames is not None:
            return self.expected_run_frames
        return self.chirp_frames + 2

    def own_tail_fraction(self) -> float:
        """Own ring-down level in the first frame after the blank, relative to steady state."""
        r = FRAME_S / self.ring_time_constant if self.ring_time_constant > 0 else math.inf
        if math.isinf(r):
            return 0.0
        return math.exp(-self.tail_blank_frames * r) * (1.0 - math.exp(-r)) / r


@dataclass
class PcoState:
    t_a: float
    t_b: float
    phase: float = 0.0
    tally_a: int = 0
    tally_b: int = 0
    # signed distances in seconds: negative for peers heard before the own chirp
    onset_gaps: list[float] = field(default_factory=list)
    cycle_count: int = 0


def _frames(seconds: float) -> int:
    return int(round(seconds / FRAME_S))


def shift_magnitude(gaps: Sequence[float], early: bool, params: PcoParams) -> float:
    """Shift for one cycle from the winning side's gaps, in seconds.

    With ``share="full"`` each gap is taken whole. With ``share="half"`` every
    robot moves half of the gap in frames, rounding up on the early side and
    down on the late side, so a mutually visible pair closes it exactly.
    """
    if not gaps:
        return 0.0
    if params.share == "full":
        shares = [abs(g) for g in gaps]
        return min(params.t_shift_max, statistics.median_high(shares))
    n = [_frames(abs(g)) for g in gaps]
    shares = [(-(-x // 2) if early else x // 2) for x in n]
    return min(params.shift_cap_frames, statistics.median_high(shares)) * FRAME_S


def pco_update(state: PcoState, params: PcoParams) -> tuple[float, float]:
    """New ``(t_a, t_b)``; the period is unchanged and neither delay goes negative."""
    if state.tally_a == state.tally_b:
        return state.t_a, state.t_b
    early = state.tally_a > state.tally_b
    side = [g for g in state.onset_gaps if (g < 0) == early and g != 0]
    s = shift_magnitude(side, early, params)
    if early:
        s = min(s, state.t_a)
        return state.t_a - s, state.t_b + s
    s = min(s, state.t_b)
    return state.t_a + s, state.t_b - s


@dataclass
class CycleReport:
    cycle: int
    onset_frame: int
    t_a: int
    t_b: int
    tally_a: int
    tally_b: int
    gaps: list[int]
    synchronized: bool
    new_t_a: int
    new_t_b: int


def analyze_cycle(amps: np.ndarray, t_a: int, params: PcoParams, noise_floor: float
                  ) -> tuple[int, int, list[int]]:
    """Tallies and signed frame gaps for one cycle of bin amplitudes.

    ``amps`` holds one value per frame of the cycle and the own chirp starts at
    index ``t_a``.
    """
    amps = np.asarray(amps, dtype=float)
    c = params.chirp_frames
    thr = params.detect_threshold * noise_floor
    blank_end = t_a + c + params.tail_blank_frames
    own_level = float(np.median(amps[t_a:t_a + c])) if c else 0.0
    det = amps >= thr
    det[t_a:blank_end] = False
    if blank_end < det.size:
        guard = max(thr, params.tail_guard * own_level * params.own_tail_fraction())
        det[blank_end] = amps[blank_end] >= guard

    tally_a = tally_b = 0
    gaps: list[int] = []
    for start, end in _runs(det):
        touches = end == t_a - 1 or start == blank_end
        if not touches and end - start + 1 < params.min_run_frames:
            continue
        if end < t_a:
            tally_a += end - start + 1
            gaps.append(-(t_a - start))
        else:
            tally_b += end - start + 1
            if start == blank_end:
                onset = end - (params.run_frames - 1)
                gaps.append(max(1, onset - t_a))
            else:
                gaps.append(start - t_a)
    return tally_a, tally_b, gaps


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(np.diff(np.concatenate(([0], mask.astype(np.int8), [0]))))
    return [(int(a), int(b) - 1) for a, b in zip(idx[0::2], idx[1::2])]


class PulseCoupledClock:
    """One robot's chirp schedule and detector, advanced one frame at a time."""

    def __init__(self, params: PcoParams, start_frame: int, noise_floor: float | None = None) -> None:
        self.params = params
        self.cycle_start = start_frame
        self.t_a = params.t_a0_frames
        self.t_b = params.period_frames - params.chirp_frames - self.t_a
        self.cycle = 0
        self.noise_floor = noise_floor
        self._amps = np.zeros(params.period_frames)

    @property
    def onset(self) -> int:
        return self.cycle_start + self.t_a

    def chirping(self, frame: int) -> bool:
        return self.onset <= frame < self.onset + self.params.chirp_frames

    def observe(self, frame: int, amp: float) -> CycleReport | None:
        """Record this frame's chirp-bin amplitude; returns a report on the last frame of a cycle."""
        p = self.params
        rel = frame - self.cycle_start
        if 0 <= rel < p.period_frames:
            self._amps[rel] = amp
        if rel != p.period_frames - 1:
            return None
        floor = self.noise_floor if self.noise_floor is not None else 0.0
        ta, tb, gaps = analyze_cycle(self._amps, self.t_a, p, floor)
        state = PcoState(self.t_a * FRAME_S, self.t_b * FRAME_S, tally_a=ta, tally_b=tb,
                         onset_gaps=[g * FRAME_S for g in gaps], cycle_count=self.cycle)
        new_a, new_b = pco_update(state, p)
        report = CycleReport(self.cycle, self.onset, self.t_a, self.t_b, ta, tb, gaps,
                             ta == 0 and tb == 0, _frames(new_a), _frames(new_b))
        self.t_a, self.t_b = report.new_t_a, report.new_t_b
        self.cycle_start += p.period_frames
        self.cycle += 1
        self._amps[:] = 0.0
        return report


@dataclass(frozen=True)
class ChirpDetection:
    onset: int
    n_frames: int


def detect_chirps(amps: Sequence[float], noise_floor: float, threshold: float = 4.0,
                  merge_gap: int = 2) -> list[ChirpDetection]:
    """Onsets of runs of frames at or above ``threshold * noise_floor``.

    Runs separated by at most ``merge_gap`` quiet frames belong to one chirp.
    """
    hits = np.flatnonzero(np.asarray(amps, dtype=float) >= threshold * noise_floor)
    out: list[ChirpDetection] = []
    for f in hits.tolist():
        if out and f - (out[-1].onset + out[-1].n_frames - 1) <= merge_gap + 1:
            out[-1] = ChirpDetection(out[-1].onset, f - out[-1].onset + 1)
        else:
            out.append(ChirpDetection(f, 1))
    return out


def offset_metric(onsets: dict[object, dict[int, float]], period_s: float) -> dict[int, float]:
    """Largest pairwise circular onset difference per cycle, in milliseconds.

    ``onsets`` maps robot id to ``{cycle: onset seconds}``; only cycles every
    robot reached are reported.
    """
    robots = list(onsets)
    if len(robots) < 2:
        raise ValueError("need at least two robots")
    cycles = set.intersection(*(set(v) for v in onsets.values()))
    out = {}
    for c in sorted(cycles):
        worst = 0.0
        for i, a in enumerate(robots):
            for b in robots[i + 1:]:
                worst = max(worst, circular_diff(onsets[a][c], onsets[b][c], period_s))
        # onsets are whole frames; rounding keeps a one-frame offset at exactly one frame
        out[c] = round(worst * 1000.0, 6)
    return out


def circular_diff(a: float, b: float, period: float) -> float:
    d = abs(a - b) % period
    return min(d, period - d)


SYNC_COLUMNS = ["cycle", "robot_id", "chirp_onset_s", "offset_to_nearest_ms", "t_a_s", "t_b_s"]


def sync_trace_csv(reports: dict[object, list[CycleReport]], period_s: float) -> str:
    """Sync trace rows ordered by cycle then robot."""
    by_cycle: dict[int, dict[object, CycleReport]] = {}
    for rid, reps in reports.items():
        for r in reps:
            by_cycle.setdefault(r.cycle, {})[rid] = r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SYNC_COLUMNS)
    for c in sorted(by_cycle):
        row = by_cycle[c]
        for rid in sorted(row, key=str):
            r = row[rid]
            t = r.onset_frame * FRAME_S
            others = [circular_diff(t, o.onset_frame * FRAME_S, period_s) for k, o in row.items() if k != rid]
            near = f"{min(others) * 1000.0:.3f}" if others else ""
            w.writerow([c, rid, f"{t:.5f}", near, f"{r.t_a * FRAME_S:.5f}", f"{r.t_b * FRAME_S:.5f}"])
    return buf.getvalue()


def convergence_cycle(offsets_ms: dict[int, float], limit_ms: float = FRAME_S * 1000.0) -> int | None:
    """First cycle from which every later offset stays below ``limit_ms``."""
    cycles = sorted(offsets_ms)
    first = None
    for c in cycles:
        if offsets_ms[c] < limit_ms:
            if first is None:
                first = c
        else:
            first = None
    return first


