"""Acoustic world model: gain and delay edges between transducer modules.

Three media connect modules. Membrane paths join modules on the same robot,
joint paths join modules on different robots that are mechanically coupled,
and air paths join every pair of modules on different robots. Only direct
edges are modelled. Gains are evaluated at the transmitted tone frequency
(narrowband approximation), which is exact for the bin-aligned tones used
throughout.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from piezonet.signals import FRAME, RATE, bin_freq

SPEED_OF_SOUND = 343.0
REF_VOLUME = 0.25
VOLUME_RANGE = (0.05, 0.5)

# produced by `piezonet calibrate-air` with default settings
DEFAULT_COUPLING_REF = 3.345e-3

JOINT_GAIN = {3: 1.00, 2: 0.65, 1: 0.55, 0: 0.0}


class PathKind(enum.Enum):
    MEMBRANE = "membrane"
    JOINT = "joint"
    AIR = "air"


@dataclass(frozen=True)
class MembraneParams:
    beta0: float = 0.5
    beta_slope: float = 2.5
    ref_gain: float = 0.3

    def beta(self, freq: float) -> float:
        return max(self.beta0, self.beta0 + self.beta_slope * math.log10(freq / 1000.0))


@dataclass(frozen=True)
class AirParams:
    absorption_1k: float = 0.005
    absorption_20k: float = 0.5
    coupling_ref: float = DEFAULT_COUPLING_REF

    def absorption_db_per_m(self, freq: float) -> float:
        """Log-log interpolation between the 1 kHz and 20 kHz coefficients."""
        frac = math.log(freq / 1000.0) / math.log(20.0)
        lo, hi = math.log(self.absorption_1k), math.log(self.absorption_20k)
        return math.exp(lo + frac * (hi - lo))


@dataclass(frozen=True)
class ChannelParams:
    membrane: MembraneParams = field(default_factory=MembraneParams)
    air: AirParams = field(default_factory=AirParams)
    noise_sigma: float = 1e-3
    delta_contact: float = 0.05


def joint_gain(n_contacts: int) -> float:
    if n_contacts not in JOINT_GAIN:
        raise ValueError(f"n_contacts must be 0..3, got {n_contacts}")
    return JOINT_GAIN[n_contacts]


def membrane_gain(params: MembraneParams, freq: float, geodesic_m: float) -> float:
    if freq <= 0 or geodesic_m < 0:
        raise ValueError("membrane gain needs freq > 0 and geodesic_m >= 0")
    return params.ref_gain * math.exp(-params.beta(freq) * geodesic_m)


def air_gain(params: AirParams, freq: float, dist_m: float,
             vol_tx: float = REF_VOLUME, vol_rx: float = REF_VOLUME) -> float:
    if dist_m <= 0:
        raise ValueError("air distance must be positive")
    lo, hi = VOLUME_RANGE
    if not (lo - 1e-12 <= vol_tx <= hi + 1e-12 and lo - 1e-12 <= vol_rx <= hi + 1e-12):
        raise ValueError("volumes must lie in [0.05, 0.5] m^3")
    absorb = 10.0 ** (-params.absorption_db_per_m(freq) * dist_m / 20.0)
    vol = (vol_tx / REF_VOLUME) ** (2.0 / 3.0) * (vol_rx / REF_VOLUME) ** (2.0 / 3.0)
    return params.coupling_ref / dist_m * absorb * vol


def air_delay_samples(dist_m: float) -> int:
    return int(round(dist_m / SPEED_OF_SOUND * RATE))


def sphere_radius(volume: float) -> float:
    return (3.0 * volume / (4.0 * math.pi)) ** (1.0 / 3.0)


@dataclass(frozen=True)
class ModuleInfo:
    gid: int
    robot: int
    index: int
    direction: tuple[float, float, float]


@dataclass(frozen=True)
class AcousticPath:
    src: int
    dst: int
    kind: PathKind
    param: float  # geodesic angle (rad) for membrane, n_contacts for joint, metres for air

    @property
    def delay_samples(self) -> int:
        return air_delay_samples(self.param) if self.kind is PathKind.AIR else 0


class ChannelGraph:
    """Directed path set plus the mutable per-frame state (volumes, contacts).

    ``volumes`` and contact flags are changed only between frames. Gain
    matrices are cached per set of bins and rebuilt when either changes.
    """

    def __init__(self, modules: Sequence[ModuleInfo], positions: Mapping[int, Sequence[float]],
                 volumes: Mapping[int, float], joints: Iterable[tuple[int, int, int]] = (),
                 params: ChannelParams | None = None) -> None:
        self.params = params or ChannelParams()
        self.modules = list(modules)
        if [m.gid for m in self.modules] != list(range(len(self.modules))):
            raise ValueError("module gids must be 0..M-1 in order")
        self.positions = {r: np.asarray(p, dtype=float) for r, p in positions.items()}
        self.volumes = dict(volumes)
        self.damped = np.zeros(len(self.modules), dtype=bool)
        self.paths = self._build_paths(list(joints))
        kinds = np.array([pa.kind.value for pa in self.paths])
        self._arr = {
            "src": np.array([pa.src for pa in self.paths], dtype=int),
            "dst": np.array([pa.dst for pa in self.paths], dtype=int),
            "param": np.array([pa.param for pa in self.paths]),
            "delay": np.array([pa.delay_samples for pa in self.paths], dtype=int),
            "mem": kinds == PathKind.MEMBRANE.value,
            "joint": kinds == PathKind.JOINT.value,
            "air": kinds == PathKind.AIR.value,
        }
        self._cache: dict[tuple, tuple] = {}

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    def _build_paths(self, joints: list[tuple[int, int, int]]) -> list[AcousticPath]:
        paths: list[AcousticPath] = []
        mods = self.modules
        for a in mods:
            for b in mods:
                if a.gid == b.gid:
                    continue
                if a.robot == b.robot:
                    cosang = float(np.clip(np.dot(a.direction, b.direction), -1.0, 1.0))
                    paths.append(AcousticPath(a.gid, b.gid, PathKind.MEMBRANE, math.acos(cosang)))
                else:
                    d = float(np.linalg.norm(self.positions[a.robot] - self.positions[b.robot]))
                    paths.append(AcousticPath(a.gid, b.gid, PathKind.AIR, d))
        seen: set[int] = set()
        for a, b, n in joints:
            if mods[a].robot == mods[b].robot:
                raise ValueError("joints must connect modules on different robots")
            for g in (a, b):
                if g in seen:
                    raise ValueError(f"module {g} is used by more than one joint")
                seen.add(g)
            joint_gain(n)
            paths.append(AcousticPath(a, b, PathKind.JOINT, float(n)))
            paths.append(AcousticPath(b, a, PathKind.JOINT, float(n)))
        return paths

    def set_volume(self, robot: int, volume: float) -> None:
        if self.volumes.get(robot) != volume:
            self.volumes[robot] = volume
            self._cache.clear()

    def set_contact(self, module: int, damped: bool) -> None:
        if not 0 <= module < self.n_modules:
            raise KeyError(f"unknown module {module}")
        if bool(self.damped[module]) != bool(damped):
            self.damped[module] = bool(damped)
            self._cache.clear()

    def path_gain(self, path: AcousticPath, freq: float) -> float:
        p = self.params
        src, dst = self.modules[path.src], self.modules[path.dst]
        if path.kind is PathKind.MEMBRANE:
            g = membrane_gain(p.membrane, freq, sphere_radius(self.volumes[src.robot]) * path.param)
        elif path.kind is PathKind.JOINT:
            g = joint_gain(int(path.param))
        else:
            g = air_gain(p.air, freq, path.param, self.volumes[src.robot], self.volumes[dst.robot])
        if self.damped[path.src]:
            g *= p.delta_contact
        if self.damped[path.dst]:
            g *= p.delta_contact
        return g

    def gain_tables(self, bins: Sequence[int]) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Gain arrays indexed ``[bin, dst, src]``: one for undelayed paths and one per air delay."""
        key = tuple(bins)
        if key not in self._cache:
            self._cache[key] = self._tables(key)
        return self._cache[key]

    def flat_tables(self, bins: Sequence[int]) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """``gain_tables`` reshaped to ``[dst, src * n_bins + bin]`` for a single matrix product."""
        key = ("flat", *bins)
        if key not in self._cache:
            direct, delayed = self.gain_tables(bins)
            flat = lambda t: np.ascontiguousarray(t.transpose(1, 2, 0).reshape(t.shape[1], -1))
            self._cache[key] = (flat(direct), {d: flat(t) for d, t in delayed.items()})
        return self._cache[key]

    def _tables(self, bins: tuple[int, ...]) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        # vectorized equivalent of path_gain over every path and bin
        p = self.params
        a = self._arr
        robot = np.array([m.robot for m in self.modules])
        vol = np.array([self.volumes[r] for r in robot])
        vs, vd = vol[a["src"]], vol[a["dst"]]
        damp = np.where(self.damped, p.delta_contact, 1.0)
        scale = damp[a["src"]] * damp[a["dst"]]
        freqs = [bin_freq(b) for b in bins]
        gains = np.zeros((len(bins), len(self.paths)))
        for i, f in enumerate(freqs):
            g = np.zeros(len(self.paths))
            geo = (3.0 * vs / (4.0 * math.pi)) ** (1.0 / 3.0) * a["param"]
            g[a["mem"]] = p.membrane.ref_gain * np.exp(-p.membrane.beta(f) * geo[a["mem"]])
            g[a["joint"]] = [joint_gain(int(n)) for n in a["param"][a["joint"]]]
            d = a["param"][a["air"]]
            volf = (vs[a["air"]] / REF_VOLUME) ** (2.0 / 3.0) * (vd[a["air"]] / REF_VOLUME) ** (2.0 / 3.0)
            absorb = 10.0 ** (-p.air.absorption_db_per_m(f) * d / 20.0)
            g[a["air"]] = p.air.coupling_ref / np.where(d > 0, d, np.inf) * absorb * volf
            gains[i] = g * scale
        m = self.n_modules
        direct = np.zeros((len(bins), m, m))
        delayed: dict[int, np.ndarray] = {}
        for d in sorted(set(a["delay"].tolist())):
            sel = a["delay"] == d
            table = np.zeros((len(bins), m, m))
            np.add.at(table, (slice(None), a["dst"][sel], a["src"][sel]), gains[:, sel])
            if d == 0:
                direct = table
            else:
                delayed[d] = table
        return direct, delayed

    def max_delay(self) -> int:
        return max((p.delay_samples for p in self.paths), default=0)


def noise_frame(seed: int, module: int, frame_index: int, sigma: float) -> np.ndarray:
    """Gaussian noise for one module and frame from a counter-keyed Philox stream.

    The module and frame sit in the high counter words, so each (module, frame)
    owns a disjoint block of the stream and evaluation order never matters.
    """
    if sigma == 0:
        return np.zeros(FRAME)
    bitgen = np.random.Philox(key=seed & (2 ** 64 - 1), counter=[0, 0, module, frame_index])
    return sigma * np.random.Generator(bitgen).standard_normal(FRAME)


class DelayLine:
    """Past emitted per-bin samples for every source module, enough to serve the longest delay."""

    def __init__(self, n_modules: int, bins: Sequence[int], max_delay: int) -> None:
        self.bins = list(bins)
        self.hist_frames = max_delay // FRAME + 2
        self.buf = np.zeros((n_modules, len(self.bins), self.hist_frames * FRAME))

    def push(self, emitted: np.ndarray) -> None:
        self.buf = np.roll(self.buf, -FRAME, axis=2)
        self.buf[:, :, -FRAME:] = emitted

    def delayed(self, delay: int) -> np.ndarray:
        end = self.buf.shape[2] - delay
        return self.buf[:, :, end - FRAME:end]


def propagate_frame(graph: ChannelGraph, tx: Mapping[int, Mapping[int, np.ndarray]],
                    frame_index: int, seed: int = 0, delay_line: DelayLine | None = None,
                    bins: Sequence[int] | None = None,
                    observed: Iterable[int] | None = None) -> dict[int, np.ndarray]:
    """Mix one frame of per-bin emissions into received samples for every module.

    ``tx`` maps a source module to ``{bin: 256 samples}``. When a delay line is
    given it is advanced with this frame's emissions so consecutive calls see
    the air-path history; without one, earlier frames are taken as silent.
    Only modules in ``observed`` (default: all) are returned. Noise is keyed
    per module and frame, so skipping unobserved modules changes nothing else.
    """
    if bins is None:
        bins = sorted({b for comps in tx.values() for b in comps})
    m = graph.n_modules
    emitted = np.zeros((m, len(bins), FRAME))
    for src, comps in tx.items():
        for b, x in comps.items():
            emitted[src, bins.index(b)] += np.asarray(x, dtype=float)
    dl = delay_line or DelayLine(m, bins, graph.max_delay())
    dl.push(emitted)
    mods = list(range(m)) if observed is None else sorted(set(observed))
    direct, delayed = graph.flat_tables(bins)
    # rx[d, t] = sum over (src, bin) of gain[bin, d, src] * emitted[src, bin, t]
    rx = direct[mods] @ emitted.reshape(m * len(bins), FRAME)
    for d, table in delayed.items():
        rx += table[mods] @ dl.delayed(d).reshape(m * len(bins), FRAME)
    sigma = graph.params.noise_sigma
    return {g: rx[i] + noise_frame(seed, g, frame_index, sigma) for i, g in enumerate(mods)}
