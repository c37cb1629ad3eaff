"""Sampled signals, tone synthesis, the transducer model and spectral analysis.

Everything runs at a single fixed rate of 50 kS/s and all receiver processing
happens on non-overlapping 256-sample frames. Tones are bin-aligned, so a
tone at bin ``b`` repeats exactly every frame and its spectral amplitude is
exact.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RATE = 50_000
FRAME = 256
N_BINS = FRAME // 2 + 1
BIN_HZ = RATE / FRAME
FRAME_S = FRAME / RATE

CHIRP_BIN = 31
SPACE_BIN = 87
MARK_BIN = 97


def bin_freq(bin_index: int) -> float:
    return bin_index * BIN_HZ


@dataclass(frozen=True)
class SampleStream:
    samples: np.ndarray
    rate: int = RATE

    def __post_init__(self) -> None:
        if self.rate != RATE:
            raise ValueError(f"sample rate must be {RATE}, got {self.rate}")
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def n_frames(self) -> int:
        return self.samples.size // FRAME

    def frame(self, index: int) -> np.ndarray:
        return self.samples[index * FRAME:(index + 1) * FRAME]


@dataclass(frozen=True)
class SpectralFrame:
    amplitudes: np.ndarray
    frame_index: int = 0

    def __getitem__(self, bin_index: int) -> float:
        return float(self.amplitudes[bin_index])


@dataclass(frozen=True)
class ToneSpec:
    bin: int
    amplitude: float = 1.0
    phase: float = 0.0

    def __post_init__(self) -> None:
        if not 1 <= self.bin <= FRAME // 2:
            raise ValueError(f"tone bin must be in [1, {FRAME // 2}], got {self.bin}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"tone amplitude must be in [0, 1], got {self.amplitude}")

    @property
    def frequency(self) -> float:
        return bin_freq(self.bin)


@dataclass(frozen=True)
class TransducerModel:
    highpass_cutoff: float = 2000.0
    resonance_freq: float = bin_freq(CHIRP_BIN)
    resonance_gain_db: float = 6.0
    resonance_halfwidth: float = 500.0
    ring_time_constant: float = 0.002
    power_active: float = field(default=0.060, init=False)

    def ring_decay(self, n: int = FRAME) -> np.ndarray:
        """Per-sample decay weights ``exp(-t/tau)`` for ``t = 0 .. n-1`` samples."""
        if self.ring_time_constant <= 0:
            return np.zeros(n)
        return np.exp(-np.arange(n) / (RATE * self.ring_time_constant))


def synth_tone(spec: ToneSpec, n_samples: int, start: int = 0) -> SampleStream:
    """Sine at the tone's bin frequency; ``start`` offsets the global sample clock."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    n = np.arange(start, start + n_samples)
    x = spec.amplitude * np.sin(2.0 * np.pi * spec.bin * n / FRAME + spec.phase)
    return SampleStream(x)


def transducer_tx_gain(model: TransducerModel, freq: float | np.ndarray) -> float | np.ndarray:
    f = np.asarray(freq, dtype=float)
    if np.any(f < 0) or np.any(f >= RATE / 2):
        raise ValueError("frequency must be in [0, 25000) Hz")
    highpass = f / np.sqrt(f ** 2 + model.highpass_cutoff ** 2)
    peak = 10.0 ** (model.resonance_gain_db / 20.0)
    lorentz = 1.0 / (1.0 + ((f - model.resonance_freq) / model.resonance_halfwidth) ** 2)
    gain = highpass * (1.0 + (peak - 1.0) * lorentz)
    return float(gain) if np.ndim(freq) == 0 else gain


def apply_ring_envelope(stream: SampleStream, model: TransducerModel,
                        boundaries: Sequence[int]) -> SampleStream:
    """Impose first-order ring-up and ring-down at each drive change.

    The stream is split at ``boundaries``. Each segment is treated as a steady
    drive: it rings up as ``1 - exp(-t/tau)`` from its boundary and, once the
    next boundary arrives, keeps oscillating while decaying as ``exp(-t/tau)``.
    The continuation of a finished segment is its own waveform extended with
    the frame period, which is exact for bin-aligned tones. A leading segment
    that starts before the first boundary is assumed to be in steady state.
    """
    x = stream.samples
    n = x.size
    bounds = [int(b) for b in boundaries]
    if bounds != sorted(bounds) or any(b < 0 or b > n for b in bounds):
        raise ValueError("boundaries must be sorted sample indices within the stream")
    if model.ring_time_constant <= 0 or not bounds:
        return SampleStream(x.copy())

    k = 1.0 / (RATE * model.ring_time_constant)
    edges = sorted(set([0] + bounds + [n]))
    out = np.zeros(n)
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        seg = x[a:b]
        steady = a == 0 and 0 not in bounds
        t = np.arange(b - a)
        out[a:b] += seg if steady else seg * (1.0 - np.exp(-t * k))
        if b >= n:
            continue
        # level reached at the end of the segment, then free decay afterwards
        level = 1.0 if steady else 1.0 - math.exp(-(b - a) * k)
        tail_t = np.arange(n - b)
        tail = _periodic_extend(seg, a, b, n)
        out[b:] += level * tail * np.exp(-tail_t * k)
    return SampleStream(out)


def _periodic_extend(seg: np.ndarray, a: int, b: int, n: int) -> np.ndarray:
    """Continue a segment that spans [a, b) over [b, n) with period FRAME."""
    idx = np.arange(b, n)
    if seg.size >= FRAME:
        src = idx - FRAME * ((idx - b) // FRAME + 1)
        return seg[src - a]
    # shorter than a period: fit the best single bin-aligned sinusoid and continue it
    t = np.arange(a, b)
    best, best_fit = None, -1.0
    for k in range(1, FRAME // 2 + 1):
        basis = np.stack([np.cos(2 * np.pi * k * t / FRAME), np.sin(2 * np.pi * k * t / FRAME)], 1)
        coef, *_ = np.linalg.lstsq(basis, seg, rcond=None)
        fit = float(np.sum((basis @ coef) ** 2))
        if fit > best_fit:
            best, best_fit = (k, coef), fit
    k, (c, s) = best
    return c * np.cos(2 * np.pi * k * idx / FRAME) + s * np.sin(2 * np.pi * k * idx / FRAME)


def goertzel_amp(frame: Sequence[float] | np.ndarray, bin_index: int) -> float:
    """Single-bin amplitude ``2|X[k]|/256`` by the Goertzel recursion."""
    x = np.asarray(frame, dtype=float)
    if x.size != FRAME:
        raise ValueError(f"frame must have exactly {FRAME} samples")
    w = 2.0 * math.pi * bin_index / FRAME
    coeff = 2.0 * math.cos(w)
    s1 = s2 = 0.0
    for v in x.tolist():
        s0 = v + coeff * s1 - s2
        s2, s1 = s1, s0
    re = s1 - s2 * math.cos(w)
    im = s2 * math.sin(w)
    scale = 1.0 if bin_index in (0, FRAME // 2) else 2.0
    return scale * math.hypot(re, im) / FRAME


def spectral_frame(frame: Sequence[float] | np.ndarray, frame_index: int = 0) -> SpectralFrame:
    x = np.asarray(frame, dtype=float)
    if x.size != FRAME:
        raise ValueError(f"frame must have exactly {FRAME} samples")
    amps = 2.0 * np.abs(np.fft.rfft(x)) / FRAME
    # DC and Nyquist have no mirrored partner
    amps[0] /= 2.0
    amps[-1] /= 2.0
    return SpectralFrame(amps, frame_index)


def spectral_frames(samples: np.ndarray) -> np.ndarray:
    """Amplitude matrix (n_frames, 129) for every whole frame of ``samples``."""
    x = np.asarray(samples, dtype=float)
    nf = x.size // FRAME
    amps = 2.0 * np.abs(np.fft.rfft(x[:nf * FRAME].reshape(nf, FRAME), axis=1)) / FRAME
    amps[:, 0] /= 2.0
    amps[:, -1] /= 2.0
    return amps


def bin_projector(bins: Iterable[int]) -> np.ndarray:
    """Matrix P (256, 2B) so that ``frames @ P`` holds cos/sin correlations per bin."""
    t = np.arange(FRAME)
    cols = []
    for b in bins:
        cols.append(np.cos(2.0 * np.pi * b * t / FRAME))
        cols.append(np.sin(2.0 * np.pi * b * t / FRAME))
    return np.stack(cols, axis=1)


def projected_amplitudes(frames: np.ndarray, projector: np.ndarray) -> np.ndarray:
    """Bin amplitudes from ``bin_projector`` output, same scale as ``spectral_frame``."""
    c = np.atleast_2d(frames) @ projector
    return 2.0 * np.hypot(c[:, 0::2], c[:, 1::2]) / FRAME


def spectral_energy(frame: SpectralFrame | np.ndarray) -> float:
    """Mean-square sample power implied by a spectral frame (Parseval)."""
    a = frame.amplitudes if isinstance(frame, SpectralFrame) else np.asarray(frame)
    # interior bins carry A^2/2, DC and Nyquist carry A^2
    return float(a[0] ** 2 + a[-1] ** 2 + 0.5 * np.sum(a[1:-1] ** 2))


def frame_snr_db(samples: np.ndarray, bin_index: int) -> float:
    """Time-domain SNR of a tone over whole frames.

    Tone power is ``A^2/2`` from the bin amplitude; noise power is the rest of
    the frame's mean-square value. Powers are averaged over frames first.
    """
    x = np.asarray(samples, dtype=float)
    nf = x.size // FRAME
    frames = x[:nf * FRAME].reshape(nf, FRAME)
    amps = spectral_frames(frames.ravel())[:, bin_index]
    tone = amps ** 2 / 2.0
    total = np.mean(frames ** 2, axis=1)
    return float(10.0 * np.log10(np.mean(tone) / np.mean(total - tone)))


def write_wav(path: str | Path, stream: SampleStream | np.ndarray) -> None:
    """16-bit mono PCM at 50 kHz; full scale maps to +-32767."""
    x = stream.samples if isinstance(stream, SampleStream) else np.asarray(stream, dtype=float)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(RATE)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> SampleStream:
    with wave.open(str(path), "rb") as w:
        if w.getframerate() != RATE or w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError("expected 16-bit mono PCM at 50 kHz")
        raw = w.readframes(w.getnframes())
    return SampleStream(np.frombuffer(raw, dtype="<i2").astype(float) / 32767.0)
