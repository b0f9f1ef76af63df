"""Monte Carlo photon streams from a cw-pumped two-level molecule.

Each emission cycle is an exponential wait in the ground state (rate R)
followed by an exponential wait in the excited state (rate 1/t1). The cycle
ends with a recorded ZPL photon with probability zpl_fraction*filter_purity;
otherwise the photon is lost but the cycle still resets the emitter.

Reproducibility: the stream is split into `partitions` equal time slices.
Slice k draws from ``SeedSequence(seed).spawn(partitions)[k]`` and starts with
the molecule in the ground state, so the output depends on (seed, partitions)
only, never on how the slices are scheduled.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from molhom.model import InvalidParameterError, MoleculeParams

H = np.array([1.0, 0.0], dtype=complex)

_CHUNK = 1 << 16


class Origin(IntEnum):
    MOLECULE = 0
    BACKGROUND = 1


@dataclass(frozen=True)
class PhotonEvent:
    emission_time: float
    polarization: np.ndarray
    origin: Origin


@dataclass
class PhotonStream:
    """Time-ordered photons stored column-wise.

    `times` in ns, `jones` is an (n, 2) complex array of unit vectors and
    `origin` holds :class:`Origin` codes.
    """

    times: np.ndarray
    jones: np.ndarray
    origin: np.ndarray
    duration: float  # ns

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> PhotonEvent:
        return PhotonEvent(float(self.times[i]), self.jones[i].copy(), Origin(int(self.origin[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def rate(self) -> float:
        """Mean photon rate in 1/ns."""
        return len(self) / self.duration if self.duration > 0 else 0.0

    def select(self, origin: Origin) -> "PhotonStream":
        keep = self.origin == origin
        return PhotonStream(self.times[keep], self.jones[keep], self.origin[keep], self.duration)

    @classmethod
    def empty(cls, duration: float = 0.0) -> "PhotonStream":
        return cls(np.empty(0), np.empty((0, 2), dtype=complex), np.empty(0, dtype=np.int8),
                   duration)


@dataclass
class StreamConfig:
    """Source run settings.

    `duration` is in seconds. `background_rate` is in counts/s; None derives
    it from ``params.signal_to_background`` and the mean molecule rate.
    """

    duration: float
    seed: int = 0
    params: MoleculeParams = field(default_factory=MoleculeParams)
    background_rate: float | None = None
    partitions: int = 1
    polarization: np.ndarray = field(default_factory=lambda: H.copy())

    def __post_init__(self):
        if not self.duration >= 0:
            raise InvalidParameterError(f"duration must be >= 0, got {self.duration!r}")
        if int(self.partitions) != self.partitions or self.partitions < 1:
            raise InvalidParameterError(f"partitions must be a positive integer, got {self.partitions!r}")
        if self.background_rate is not None and not self.background_rate >= 0:
            raise InvalidParameterError(
                f"background_rate must be >= 0, got {self.background_rate!r}")
        pol = np.asarray(self.polarization, dtype=complex)
        norm = np.linalg.norm(pol)
        if pol.shape != (2,) or norm == 0:
            raise InvalidParameterError("polarization must be a non-zero 2-component vector")
        self.polarization = pol / norm

    @property
    def duration_ns(self) -> float:
        return self.duration * 1e9

    def resolved_background_rate(self) -> float:
        """Background rate in counts/s."""
        if self.background_rate is not None:
            return float(self.background_rate)
        return self.params.photon_rate * 1e9 / self.params.signal_to_background


def _emission_times(params: MoleculeParams, t0: float, t1: float, rng: np.random.Generator):
    """Recorded emission times in [t0, t1) for one slice."""
    if params.pump_rate == 0 or t1 <= t0:
        return np.empty(0)
    mean_wait = 1.0 / params.pump_rate
    out = []
    clock = t0
    while clock < t1:
        ground = rng.exponential(mean_wait, _CHUNK)
        excited = rng.exponential(params.t1, _CHUNK)
        recorded = rng.random(_CHUNK) < params.branching
        ends = clock + np.cumsum(ground + excited)
        clock = ends[-1]
        out.append(ends[recorded & (ends < t1)])
    return np.concatenate(out)


def _strictly_increasing(times: np.ndarray) -> np.ndarray:
    """Break exact timestamp ties by nudging later events up one ulp."""
    if len(times) < 2:
        return times
    ties = np.flatnonzero(np.diff(times) <= 0)
    if len(ties) == 0:
        return times
    times = times.copy()
    for i in ties:
        if times[i + 1] <= times[i]:
            times[i + 1] = np.nextafter(times[i], np.inf)
    return times


def sample_emission_stream(config: StreamConfig, workers: int | None = None) -> PhotonStream:
    """Molecule photons for the configured run (no background).

    Slices may be generated on `workers` threads; the result is identical
    for any worker count.
    """
    duration = config.duration_ns
    if duration == 0:
        return PhotonStream.empty(0.0)
    n = int(config.partitions)
    edges = np.linspace(0.0, duration, n + 1)
    seeds = np.random.SeedSequence(config.seed).spawn(n)

    def run(k):
        return _emission_times(config.params, edges[k], edges[k + 1],
                               np.random.default_rng(seeds[k]))

    if workers and workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(n)))
    else:
        parts = [run(k) for k in range(n)]
    times = _strictly_increasing(np.concatenate(parts))
    jones = np.broadcast_to(config.polarization, (len(times), 2)).copy()
    origin = np.full(len(times), Origin.MOLECULE, dtype=np.int8)
    return PhotonStream(times, jones, origin, duration)


def random_polarizations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Jones vectors uniformly distributed on the Poincaré sphere."""
    s1 = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    half = 0.5 * np.arccos(s1)
    return np.stack([np.cos(half), np.exp(1j * phi) * np.sin(half)], axis=1)


def merge_background(stream: PhotonStream, background_rate: float, seed: int) -> PhotonStream:
    """Add unpolarized Poisson background at `background_rate` counts/s."""
    if not background_rate >= 0:
        raise InvalidParameterError(f"background_rate must be >= 0, got {background_rate!r}")
    if background_rate == 0 or stream.duration == 0:
        return stream
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = rng.poisson(background_rate * 1e-9 * stream.duration)
    times = np.sort(rng.uniform(0.0, stream.duration, n))
    jones = random_polarizations(n, rng)
    all_times = np.concatenate([stream.times, times])
    order = np.argsort(all_times, kind="stable")
    return PhotonStream(
        _strictly_increasing(all_times[order]),
        np.concatenate([stream.jones, jones])[order],
        np.concatenate([stream.origin, np.full(n, Origin.BACKGROUND, dtype=np.int8)])[order],
        stream.duration,
    )


def sample_stream(config: StreamConfig, workers: int | None = None) -> PhotonStream:
    """Molecule photons plus background as configured."""
    stream = sample_emission_stream(config, workers)
    bg_seed = np.random.SeedSequence([config.seed, 0xB6]).generate_state(1)[0]
    return merge_background(stream, config.resolved_background_rate(), int(bg_seed))


def write_events(path: str | Path, stream: PhotonStream) -> None:
    """Event dump: `time_ns, jones_re0, jones_im0, jones_re1, jones_im1, origin`."""
    names = {int(o): o.name.lower() for o in Origin}
    with open(path, "w") as fh:
        for t, j, o in zip(stream.times, stream.jones, stream.origin):
            fh.write(f"{t:.4f}, {j[0].real:.9g}, {j[0].imag:.9g}, "
                     f"{j[1].real:.9g}, {j[1].imag:.9g}, {names[int(o)]}\n")


def read_events(path: str | Path, duration: float | None = None) -> PhotonStream:
    codes = {o.name.lower(): int(o) for o in Origin}
    times, jones, origin = [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            t, a, b, c, d, o = (x.strip() for x in line.split(","))
            times.append(float(t))
            jones.append((complex(float(a), float(b)), complex(float(c), float(d))))
            origin.append(codes[o])
    times = np.array(times)
    if duration is None:
        duration = float(times[-1]) if len(times) else 0.0
    return PhotonStream(times, np.array(jones, dtype=complex).reshape(-1, 2),
                        np.array(origin, dtype=np.int8), duration)
