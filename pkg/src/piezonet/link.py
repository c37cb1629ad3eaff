"""FSK physical layer and slotless ALOHA MAC.

A packet is nine bits: the start pattern 0111, a data nibble sent MSB first,
and an even parity bit. Each bit occupies ``k`` frames of either the space
tone (bit 0) or the mark tone (bit 1). The nibble 0xF is reserved for
acknowledgements.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from piezonet.signals import (
    BIN_HZ, FRAME, FRAME_S, MARK_BIN, RATE, SPACE_BIN,
    SpectralFrame, ToneSpec, TransducerModel, bin_freq, transducer_tx_gain,
)

START = (0, 1, 1, 1)
ACK_NIBBLE = 0xF
PACKET_BITS = 9


@dataclass(frozen=True)
class FskParams:
    k: int = 8
    space_bin: int = SPACE_BIN
    mark_bin: int = MARK_BIN
    tx_amplitude: float = 0.5

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("frames per symbol must be >= 1")

    @property
    def bitrate(self) -> float:
        return BIN_HZ / self.k

    @property
    def symbol_s(self) -> float:
        return self.k * FRAME_S

    @property
    def packet_frames(self) -> int:
        return PACKET_BITS * self.k

    @property
    def t_packet(self) -> float:
        return self.packet_frames * FRAME_S


def parity(nibble: int) -> int:
    return bin(nibble & 0xF).count("1") & 1


def encode_packet(data: int) -> list[int]:
    if not 0 <= data <= 15:
        raise ValueError(f"data must be a nibble, got {data}")
    bits = [(data >> i) & 1 for i in (3, 2, 1, 0)]
    return [*START, *bits, parity(data)]


def decode_bits(bits: Sequence[int]) -> int | None:
    """Nibble from a nine-bit frame, or None when the start or parity check fails."""
    if len(bits) != PACKET_BITS or tuple(bits[:4]) != START:
        return None
    data = int("".join(str(b) for b in bits[4:8]), 2)
    return data if parity(data) == bits[8] else None


def modulate(bits: Sequence[int], params: FskParams) -> list[ToneSpec]:
    """Per-frame tone schedule; ring dynamics are added at synthesis time."""
    if not bits:
        raise ValueError("nothing to modulate")
    out = []
    for b in bits:
        tone = ToneSpec(params.mark_bin if b else params.space_bin, params.tx_amplitude)
        out.extend([tone] * params.k)
    return out


def demod_frame(frame: SpectralFrame | np.ndarray, params: FskParams) -> tuple[float, float]:
    amps = frame.amplitudes if isinstance(frame, SpectralFrame) else frame
    return float(amps[params.space_bin]), float(amps[params.mark_bin])


def symbol_decision(margins: Sequence[float]) -> int:
    """Majority of per-frame votes (mark > space); ties go to the summed margin, then to space."""
    votes = sum(1 for m in margins if m > 0)
    n = len(margins)
    if 2 * votes != n:
        return int(2 * votes > n)
    return int(sum(margins) > 0)


@dataclass
class RxEvent:
    kind: str  # start | bit | packet | parity_error | dropout
    frame: int
    data: int | None = None
    # frame index of the last frame of the packet, for packet events
    end_frame: int | None = None


class Demodulator:
    """Frame-by-frame FSK receiver with start-pattern lock.

    While unlocked it keeps the recent soft margins (mark minus space). When
    the last ``4k`` frames majority-decode to 0111 it watches up to ``k-1``
    further frames and locks at the alignment with the best soft correlation
    to the start template, then reads five more symbols. A frame with neither
    tone above the squelch level clears the history.
    """

    def __init__(self, params: FskParams, squelch: float) -> None:
        self.params = params
        self.squelch = squelch
        k = params.k
        self._template = np.array([-1.0] * k + [1.0] * (3 * k))
        self.reset()

    def reset(self) -> None:
        self.margins: list[float] = []
        self.first = 0  # frame index of margins[0]
        self.candidate: int | None = None  # frame index where a 0111 window first matched
        self.lock: int | None = None  # frame index of the first start frame
        self.carrier = False

    def _group_bits(self, start: int, n_sym: int) -> list[int]:
        k = self.params.k
        off = start - self.first
        return [symbol_decision(self.margins[off + i * k: off + (i + 1) * k]) for i in range(n_sym)]

    def _score(self, start: int) -> float:
        off = start - self.first
        seg = np.asarray(self.margins[off:off + 4 * self.params.k])
        return float(seg @ self._template)

    def step(self, frame_index: int, space: float, mark: float) -> list[RxEvent]:
        k = self.params.k
        events: list[RxEvent] = []
        self.carrier = max(space, mark) > self.squelch
        if not self.carrier:
            if self.lock is not None:
                events.append(RxEvent("dropout", frame_index))
            self.reset()
            self.first = frame_index + 1
            return events
        if not self.margins:
            self.first = frame_index
        self.margins.append(mark - space)
        n = len(self.margins)
        last = self.first + n - 1

        if self.lock is None and self.candidate is None and n >= 4 * k:
            start = last - 4 * k + 1
            if self._group_bits(start, 4) == list(START):
                self.candidate = start
        if self.lock is None and self.candidate is not None:
            if last - 4 * k + 1 - self.candidate >= k - 1:
                options = range(self.candidate, last - 4 * k + 2)
                self.lock = max(options, key=lambda s: (self._score(s), -s))
                self.candidate = None
                # forget frames before the start pattern
                drop = self.lock - self.first
                self.margins = self.margins[drop:]
                self.first = self.lock
                events.append(RxEvent("start", frame_index))
        if self.lock is not None and len(self.margins) >= 9 * k:
            bits = self._group_bits(self.lock, 9)
            end = self.lock + 9 * k - 1
            for b in bits[4:]:
                events.append(RxEvent("bit", frame_index, b))
            data = decode_bits(bits)
            if data is None:
                events.append(RxEvent("parity_error", frame_index, end_frame=end))
            else:
                events.append(RxEvent("packet", frame_index, data, end_frame=end))
            # keep frames after the packet so back-to-back trains are followed
            rest = self.margins[9 * k:]
            self.reset()
            self.carrier = True
            self.margins = rest
            self.first = end + 1
            if rest and len(rest) >= 4 * k:
                start = self.first + len(rest) - 4 * k
                if self._group_bits(start, 4) == list(START):
                    self.candidate = start
        elif self.lock is None and self.candidate is None and n > 5 * k:
            # bound the history while hunting for a start pattern
            self.margins = self.margins[-4 * k:]
            self.first = last - 4 * k + 1
        return events


# ---------------------------------------------------------------- PDR harness

def _synth_fsk(bits: Sequence[int], params: FskParams, amp: dict[int, float], offset: int,
               n_frames: int, model: TransducerModel, lead: int = FRAME) -> np.ndarray:
    """Received FSK samples with per-tone first-order envelopes, sample-accurate."""
    total = n_frames * FRAME
    n = np.arange(total)
    out = np.zeros(total)
    a = np.exp(-1.0 / (RATE * model.ring_time_constant)) if model.ring_time_constant > 0 else 0.0
    sym = params.k * FRAME
    for tone_bin in (params.space_bin, params.mark_bin):
        drive = np.zeros(total)
        want = 1 if tone_bin == params.mark_bin else 0
        for i, b in enumerate(bits):
            if b == want:
                s = lead + offset + i * sym
                drive[s:s + sym] = amp[tone_bin]
        # env[n] = a*env[n-1] + (1-a)*drive[n-1]: continuous at every boundary
        env = lfilter([0.0, 1.0 - a], [1.0, -a], drive)
        out += env * np.sin(2.0 * np.pi * tone_bin * n / FRAME)
    return out


def snr_to_sigma(amplitude: float, snr_db: float) -> float:
    """Noise sigma giving a time-domain tone-to-noise power ratio of ``snr_db``."""
    return amplitude / np.sqrt(2.0) * 10.0 ** (-snr_db / 20.0)


def noise_squelch(sigma: float, factor: float = 4.0) -> float:
    """``factor`` times the median bin amplitude of white noise with std ``sigma``."""
    return factor * sigma / 8.0 * np.sqrt(np.log(4.0))


@dataclass
class PdrResult:
    k: int
    bitrate_bps: float
    snr_db: float
    n_packets: int
    pdr: float
    seed: int


def measure_pdr(k: int, n_packets: int = 1000, snr_db: float = 40.0, seed: int = 0,
                n_contacts: int = 3, tx_amplitude: float = 0.5,
                model: TransducerModel | None = None) -> PdrResult:
    """Single-attempt delivery ratio over a joint channel at a fixed frame SNR.

    Each attempt draws a random nibble and a random sub-frame start offset,
    synthesizes the packet with ring dynamics, adds white noise scaled to the
    requested SNR of the received tone and decodes it with a fresh
    demodulator. Only a bit-exact nibble with valid parity counts.
    """
    from piezonet.channel import joint_gain

    if n_packets < 1:
        raise ValueError("n_packets must be >= 1")
    params = FskParams(k=k, tx_amplitude=tx_amplitude)
    model = model or TransducerModel()
    link = joint_gain(n_contacts)
    amp = {b: tx_amplitude * transducer_tx_gain(model, bin_freq(b)) * link
           for b in (params.space_bin, params.mark_bin)}
    sigma = snr_to_sigma(min(amp.values()), snr_db)
    squelch = max(noise_squelch(sigma), 0.02 * min(amp.values()))
    n_frames = 1 + params.packet_frames + 3
    proj_t = np.arange(FRAME)
    basis = np.stack([np.exp(-2j * np.pi * b * proj_t / FRAME) for b in (params.space_bin, params.mark_bin)], 1)
    rng = np.random.default_rng([seed, k])
    ok = 0
    for _ in range(n_packets):
        data = int(rng.integers(16))
        offset = int(rng.integers(FRAME))
        bits = encode_packet(data)
        x = _synth_fsk(bits, params, amp, offset, n_frames, model)
        x = x + sigma * rng.standard_normal(x.size)
        sm = 2.0 * np.abs(x.reshape(n_frames, FRAME) @ basis) / FRAME
        demod = Demodulator(params, squelch)
        got = None
        for f in range(n_frames):
            for ev in demod.step(f, sm[f, 0], sm[f, 1]):
                if ev.kind == "packet" and got is None:
                    got = ev.data
        ok += got == data
    return PdrResult(k, params.bitrate, snr_db, n_packets, ok / n_packets, seed)


PDR_COLUMNS = ["k", "bitrate_bps", "snr_db", "n_packets", "pdr", "seed"]


def pdr_csv(results: Iterable[PdrResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PDR_COLUMNS)
    for r in results:
        w.writerow([r.k, f"{r.bitrate_bps:.4f}", f"{r.snr_db:g}", r.n_packets, f"{r.pdr:.4f}", r.seed])
    return buf.getvalue()


# ---------------------------------------------------------------------- MAC

@dataclass
class MacEvent:
    kind: str  # packet-received | delivered | delivery-failed | ack-sent | sent | parity-error
    frame: int
    module: int
    data: int | None = None
    attempt: int | None = None


@dataclass
class _Send:
    data: int
    modules: tuple[int, ...]
    attempt: int = 0


@dataclass
class Mac:
    """Half-duplex slotless ALOHA state machine for one robot.

    The robot listens on one module at a time, rotating with a dwell of one
    packet duration. A carrier still present when the dwell expires holds the
    receiver on that module, and a data packet is accepted only when the
    repeated train it belongs to ends, so a train never yields a packet read at
    the wrong symbol offset. A sender broadcasts for ``n_modules`` packet
    durations, then listens on its output modules for an acknowledgement for
    the same time, backing off a random 0..3 packet durations before resending.
    """

    n_modules: int
    fsk: FskParams
    rng: np.random.Generator
    squelch: float = 0.02
    retry_limit: int = 8
    ringdown_frames: int = 2
    listen_index: int = 0
    mode: str = "listen"  # listen | send | wait_ack | backoff | ack
    dwell_remaining: int = 0
    queue: list[_Send] = field(default_factory=list)
    current: _Send | None = None
    timer: int = 0
    hold: bool = False
    ack_module: int | None = None
    parity_stay: bool = False

    def __post_init__(self) -> None:
        self.demod = Demodulator(self.fsk, self.squelch)
        # receivers power up at an arbitrary point of their listening rotation
        self.listen_index = int(self.rng.integers(self.n_modules))
        self.dwell_remaining = int(self.rng.integers(1, self.t_packet + 1))
        self._last_packet: RxEvent | None = None
        self._tx_frame = 0
        self._bits: list[int] = []
        self._hold_count = 0
        self._resume_backoff = 0

    @property
    def t_packet(self) -> int:
        return self.fsk.packet_frames

    @property
    def busy(self) -> bool:
        return self.mode != "listen" or bool(self.queue)

    def send(self, data: int, modules: Iterable[int]) -> None:
        if not 0 <= data < ACK_NIBBLE:
            raise ValueError(f"application data must be 0x0..0xE, got {data:#x}")
        mods = tuple(sorted(set(modules)))
        if not mods:
            raise ValueError("at least one output module is required")
        self.queue.append(_Send(data, mods))

    # -- transmit side --------------------------------------------------
    def tx_drive(self) -> dict[int, int]:
        """Modules driven this frame mapped to the tone bin they carry."""
        if self.mode not in ("send", "ack"):
            return {}
        bit = self._bits[(self._tx_frame // self.fsk.k) % PACKET_BITS]
        tone = self.fsk.mark_bin if bit else self.fsk.space_bin
        mods = self.current.modules if self.mode == "send" else (self.ack_module,)
        return {m: tone for m in mods}

    def tap(self) -> int | None:
        """Module connected to the demodulator this frame, or None while transmitting."""
        if self.mode in ("send", "ack"):
            return None
        if self.mode == "wait_ack":
            mods = self.current.modules
            return mods[(self.timer // self.t_packet) % len(mods)]
        return self.listen_index

    def _start_tx(self, mode: str, bits: list[int], frames: int) -> None:
        self.mode = mode
        self._bits = bits
        self._tx_frame = 0
        self.timer = frames
        self.demod.reset()
        self.hold = False

    def begin_frame(self, frame: int) -> list[MacEvent]:
        """Advance transmit-side state before this frame's drives are read."""
        events: list[MacEvent] = []
        if self.mode == "listen" and self.queue and not self.hold and self.demod.lock is None:
            self.current = self.queue.pop(0)
            self._start_send(frame, events)
        return events

    def _start_send(self, frame: int, events: list[MacEvent]) -> None:
        cur = self.current
        cur.attempt += 1
        self._start_tx("send", encode_packet(cur.data), self.n_modules * self.t_packet)
        events.append(MacEvent("sent", frame, cur.modules[0], cur.data, cur.attempt))

    def end_frame(self, frame: int, amps: tuple[float, float] | None) -> list[MacEvent]:
        """Consume this frame's received (space, mark) amplitudes and advance timers."""
        events: list[MacEvent] = []
        if self.mode in ("send", "ack"):
            self._tx_frame += 1
            self.timer -= 1
            if self.timer <= 0:
                if self.mode == "send":
                    self.mode = "wait_ack"
                    self.timer = 0
                    self.demod.reset()
                elif self.current is not None:
                    # an acknowledgement interrupted our own backoff
                    self.mode = "backoff"
                    self.timer = max(self._resume_backoff, 1)
                    self.demod.reset()
                else:
                    self.mode = "listen"
                    self.dwell_remaining = self.t_packet
                    self.demod.reset()
            return events

        tap = self.tap()
        rx = self.demod.step(frame, *amps) if amps is not None else []
        if self.mode == "wait_ack":
            for ev in rx:
                if ev.kind == "packet" and ev.data == ACK_NIBBLE:
                    events.append(MacEvent("delivered", frame, tap, self.current.data, self.current.attempt))
                    self.current = None
                    self.mode = "listen"
                    self.dwell_remaining = self.t_packet
                    self.demod.reset()
                    return events
            self.timer += 1
            if self.timer >= self.n_modules * self.t_packet:
                if self.current.attempt > self.retry_limit:
                    events.append(MacEvent("delivery-failed", frame, self.current.modules[0],
                                           self.current.data, self.current.attempt))
                    self.current = None
                    self.mode = "listen"
                else:
                    self.mode = "backoff"
                    self.timer = int(self.rng.integers(0, 3 * self.t_packet + 1))
                self.dwell_remaining = self.t_packet
                self.demod.reset()
            return events

        # listen or backoff: rotating receiver
        for ev in rx:
            if ev.kind == "packet" and ev.data != ACK_NIBBLE:
                self._last_packet = ev
                self.hold = True
            elif ev.kind == "parity_error":
                events.append(MacEvent("parity-error", frame, tap))
                if not self.parity_stay:
                    self.parity_stay = True
                    self.dwell_remaining = max(self.dwell_remaining, 0) + self.t_packet
        if not self.demod.carrier and self._last_packet is not None:
            # train ended: accept the last packet only if it ran up to the carrier drop
            trailing = frame - self._last_packet.end_frame - 1
            if trailing <= self.ringdown_frames:
                data = self._last_packet.data
                events.append(MacEvent("packet-received", frame, tap, data))
                self.ack_module = tap
                self._last_packet = None
                self.parity_stay = False
                self._resume_backoff = self.timer if self.mode == "backoff" else 0
                self._start_tx("ack", encode_packet(ACK_NIBBLE), self.t_packet)
                events.append(MacEvent("ack-sent", frame, tap, data))
                return events
            self._last_packet = None
        if not self.demod.carrier:
            self.hold = False
            self._hold_count = 0

        if self.mode == "backoff":
            self.timer -= 1
            if self.timer <= 0 and not self.hold and self.demod.lock is None:
                self._start_send(frame + 1, events)
                return events

        self.dwell_remaining -= 1
        if self.dwell_remaining <= 0:
            if self.demod.carrier and self._hold_count <= self.n_modules:
                # carrier still present: stay for another packet duration
                self.hold = True
                self._hold_count += 1
                self.dwell_remaining = self.t_packet
            else:
                self.hold = False
                self._hold_count = 0
                self.parity_stay = False
                self.listen_index = (self.listen_index + 1) % self.n_modules
                self.dwell_remaining = self.t_packet
                self.demod.reset()
        return events
