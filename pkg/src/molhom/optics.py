"""Jones optics and the delayed two-arm interferometer.

Conventions: angles are measured from horizontal, in radians. Jones vectors
are (H, V) amplitudes; right circular is R = (1, -i)/sqrt(2), which a
quarter-wave plate at 45 degrees produces from H.

Arm ``a`` is the short arm and feeds recombiner input port a; arm ``b`` carries
the extra delay and feeds port b. Output port +1 is detector d3, -1 is d4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numba import njit

from molhom.model import InvalidParameterError
from molhom.source import Origin, PhotonStream

SQ2 = math.sqrt(2.0)

JONES = {
    "H": np.array([1.0, 0.0], dtype=complex),
    "V": np.array([0.0, 1.0], dtype=complex),
    "D": np.array([1.0, 1.0], dtype=complex) / SQ2,
    "A": np.array([1.0, -1.0], dtype=complex) / SQ2,
    "R": np.array([1.0, -1.0j], dtype=complex) / SQ2,
    "L": np.array([1.0, 1.0j], dtype=complex) / SQ2,
}

D3, D4 = 3, 4


class ElementKind(str, Enum):
    HALF_WAVE_PLATE = "half_wave_plate"
    QUARTER_WAVE_PLATE = "quarter_wave_plate"
    POLARIZER = "polarizer"


@dataclass(frozen=True)
class OpticalElement:
    kind: ElementKind
    angle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ElementKind(self.kind))

    @property
    def matrix(self) -> np.ndarray:
        return element_matrix(self)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]], dtype=complex)


def element_matrix(element: OpticalElement) -> np.ndarray:
    """2x2 Jones matrix of a wave plate or polarizer."""
    theta = element.angle
    c, s = math.cos(theta), math.sin(theta)
    if element.kind is ElementKind.HALF_WAVE_PLATE:
        c2, s2 = math.cos(2 * theta), math.sin(2 * theta)
        return np.array([[c2, s2], [s2, -c2]], dtype=complex)
    if element.kind is ElementKind.QUARTER_WAVE_PLATE:
        return _rotation(-theta) @ np.diag([1.0, 1.0j]) @ _rotation(theta)
    return np.array([[c * c, c * s], [c * s, s * s]], dtype=complex)


def compose(elements) -> np.ndarray:
    """Matrix of elements traversed in the given order."""
    m = np.eye(2, dtype=complex)
    for el in elements:
        m = element_matrix(el) @ m
    return m


def analyzer_state(qwp: float, hwp: float, polarizer: float) -> np.ndarray:
    """Jones vector projected on by QWP -> HWP -> polarizer before a detector.

    A photon in state psi passes with probability |<result|psi>|^2.
    """
    m = compose([OpticalElement(ElementKind.QUARTER_WAVE_PLATE, qwp),
                 OpticalElement(ElementKind.HALF_WAVE_PLATE, hwp)])
    axis = np.array([math.cos(polarizer), math.sin(polarizer)], dtype=complex)
    state = m.conj().T @ axis
    return state / np.linalg.norm(state)


def interference_strength(dt, overlap, pol_a, pol_b, t2):
    """I = M |<a|b>|^2 exp(-2|dt|/T2); broadcasts over arrays of pairs."""
    pol_a = np.asarray(pol_a)
    pol_b = np.asarray(pol_b)
    ov = np.abs(np.sum(np.conj(pol_a) * pol_b, axis=-1)) ** 2
    return overlap * ov * np.exp(-2.0 * np.abs(dt) / t2)


def pair_probabilities(dt, pol_a, pol_b, overlap, t2):
    """(P(different ports), P(both d3), P(both d4)) for two photons meeting at the recombiner."""
    i = float(interference_strength(dt, overlap, pol_a, pol_b, t2))
    return (1.0 - i) / 2.0, (1.0 + i) / 4.0, (1.0 + i) / 4.0


def interfere_pair(dt, pol_a, pol_b, overlap, t2, draw) -> tuple[int, int]:
    """Sample output detectors (D3 or D4) for a photon pair.

    `draw` is a numpy Generator or a pair of uniforms in [0, 1).
    """
    i = float(interference_strength(dt, overlap, pol_a, pol_b, t2))
    if isinstance(draw, np.random.Generator):
        u1, u2 = draw.random(2)
    else:
        u1, u2 = draw
    first = D3 if u1 < 0.5 else D4
    other = D4 if first == D3 else D3
    second = first if u2 < (1.0 + i) / 2.0 else other
    return first, second


@dataclass
class BenchConfig:
    """Interferometer settings. `pairing_window` (ns) defaults to 5*t2.

    `dead_time` (ns) drops clicks that follow an earlier click on the same
    detector too closely; 0 keeps every photon.
    """

    t2: float
    delay: float = 40.0
    arm_split: float = 0.5
    spatial_overlap: float = 0.7
    arm_elements: dict = field(default_factory=lambda: {"a": [], "b": []})
    pairing_window: float | None = None
    dead_time: float = 0.0

    def __post_init__(self):
        if not self.t2 > 0:
            raise InvalidParameterError(f"t2 must be positive, got {self.t2!r}")
        if not self.delay > 0:
            raise InvalidParameterError(f"delay must be positive, got {self.delay!r}")
        if not 0.0 < self.arm_split < 1.0:
            raise InvalidParameterError(f"arm_split must lie in (0, 1), got {self.arm_split!r}")
        if not 0.0 <= self.spatial_overlap <= 1.0:
            raise InvalidParameterError(
                f"spatial_overlap must lie in [0, 1], got {self.spatial_overlap!r}")
        if not self.dead_time >= 0:
            raise InvalidParameterError(f"dead_time must be >= 0, got {self.dead_time!r}")
        if self.pairing_window is None:
            self.pairing_window = 5.0 * self.t2
        elif not self.pairing_window > 0:
            raise InvalidParameterError("pairing_window must be positive")
        extra = set(self.arm_elements) - {"a", "b"}
        if extra:
            raise InvalidParameterError(f"unknown arm(s) {sorted(extra)}; use 'a' and 'b'")
        for arm in ("a", "b"):
            self.arm_elements.setdefault(arm, [])
            for el in self.arm_elements[arm]:
                if el.kind is ElementKind.POLARIZER:
                    raise InvalidParameterError("polarizers in the arms would drop photons; "
                                                "only wave plates are supported")

    @classmethod
    def parallel(cls, t2: float, **kwargs) -> "BenchConfig":
        return cls(t2=t2, arm_elements={"a": [], "b": []}, **kwargs)

    @classmethod
    def orthogonal(cls, t2: float, **kwargs) -> "BenchConfig":
        """Half-wave plate at 45 degrees in arm b: H input arrives as V."""
        hwp = OpticalElement(ElementKind.HALF_WAVE_PLATE, math.pi / 4)
        return cls(t2=t2, arm_elements={"a": [], "b": [hwp]}, **kwargs)


@dataclass(frozen=True)
class DetectionEvent:
    detector: int
    time: float
    origin: Origin


@dataclass
class Detections:
    """Detector clicks sorted by time; `detector` holds D3 or D4."""

    times: np.ndarray
    detector: np.ndarray
    origin: np.ndarray
    clipped: int = 0  # routing steps clipped to a valid probability

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> DetectionEvent:
        return DetectionEvent(int(self.detector[i]), float(self.times[i]), Origin(int(self.origin[i])))

    @property
    def d3(self) -> np.ndarray:
        return self.times[self.detector == D3]

    @property
    def d4(self) -> np.ndarray:
        return self.times[self.detector == D4]


@njit(cache=True)
def _route_conditional(t, port, pol, mol, overlap, t2, window, u):
    """Port signs reproducing the pairwise interference rule for every pair.

    Photons are visited in arrival order. The sign of photon j is drawn with
    P(+1) = (1 + alpha . s_K)/2, where K are earlier molecule photons within
    `window` and alpha solves C alpha = c: c_k is the target correlation
    E[s_j s_k] (I_jk across ports, 0 within a port) and C holds the same
    targets among K. This gives E[s_j s_k] = I_jk exactly whenever the
    probability stays in [0, 1]; otherwise it is clipped and counted. A lone
    partner reduces to `interfere_pair`.
    """
    n = len(t)
    s = np.empty(n, dtype=np.int8)
    for j in range(n):
        s[j] = 1 if u[j] < 0.5 else -1
    clipped = 0
    k0 = 0
    for j in range(n):
        while t[k0] < t[j] - window:
            k0 += 1
        if not mol[j] or k0 == j:
            continue
        m = 0
        any_cross = False
        for k in range(k0, j):
            if mol[k]:
                m += 1
                if port[k] != port[j]:
                    any_cross = True
        if not any_cross:
            continue
        ks = np.empty(m, dtype=np.int64)
        m = 0
        for k in range(k0, j):
            if mol[k]:
                ks[m] = k
                m += 1
        target = np.zeros(m)
        strong = False
        for a in range(m):
            k = ks[a]
            if port[k] != port[j]:
                ov = abs(np.conj(pol[j, 0]) * pol[k, 0] + np.conj(pol[j, 1]) * pol[k, 1]) ** 2
                target[a] = overlap * ov * np.exp(-2.0 * abs(t[j] - t[k]) / t2)
                if target[a] > 1e-15:
                    strong = True
        if not strong:
            continue
        if m == 1:
            alpha = target
        else:
            corr = np.eye(m)
            for a in range(m):
                for b in range(a + 1, m):
                    ka, kb = ks[a], ks[b]
                    if port[ka] != port[kb]:
                        ov = abs(np.conj(pol[ka, 0]) * pol[kb, 0]
                                 + np.conj(pol[ka, 1]) * pol[kb, 1]) ** 2
                        c = overlap * ov * np.exp(-2.0 * abs(t[ka] - t[kb]) / t2)
                        corr[a, b] = c
                        corr[b, a] = c
            alpha = np.linalg.lstsq(corr, target)[0]
        acc = 0.0
        for a in range(m):
            acc += alpha[a] * s[ks[a]]
        p = 0.5 * (1.0 + acc)
        if p < 0.0 or p > 1.0:
            clipped += 1
            p = min(max(p, 0.0), 1.0)
        s[j] = 1 if u[j] < p else -1
    return s, clipped


def _route_greedy(t, port, pol, mol, overlap, t2, window, u, u2):
    """Nearest-arrival pairing across ports, then `interfere_pair` per pair."""
    s = np.where(u < 0.5, 1, -1).astype(np.int8)
    ia = np.flatnonzero((port == 0) & mol)
    ib = np.flatnonzero((port == 1) & mol)
    if len(ia) == 0 or len(ib) == 0:
        return s
    tb = t[ib]
    lo = np.searchsorted(tb, t[ia] - window, side="left")
    hi = np.searchsorted(tb, t[ia] + window, side="right")
    counts = hi - lo
    a_idx = np.repeat(ia, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    b_idx = ib[np.repeat(lo, counts) + offs]
    dt = np.abs(t[a_idx] - t[b_idx])
    order = np.lexsort((b_idx, a_idx, dt))
    taken = np.zeros(len(t), dtype=bool)
    for k in order:
        i, j = a_idx[k], b_idx[k]
        if taken[i] or taken[j]:
            continue
        taken[i] = taken[j] = True
        first, second = sorted((i, j))
        p1, p2 = interfere_pair(t[second] - t[first], pol[first], pol[second], overlap, t2,
                                (u[first], u2[second]))
        s[first] = 1 if p1 == D3 else -1
        s[second] = 1 if p2 == D3 else -1
    return s


def propagate(stream: PhotonStream, config: BenchConfig, seed: int,
              pairing: str = "conditional") -> Detections:
    """Send a photon stream through the interferometer onto d3/d4.

    Each photon takes arm a with probability ``arm_split``, else arm b with
    the extra delay. ``pairing="conditional"`` routes every photon so that all
    cross-port pairs obey the two-photon rule; ``pairing="greedy"`` pairs only
    nearest neighbours across ports, which is accurate only when photons are
    sparse on the scale of the pairing window. Background photons are
    spectrally distinct from the ZPL and never interfere.
    """
    if np.any(np.diff(stream.times) < 0):
        raise ValueError("input stream is not time-ordered")
    if pairing not in ("conditional", "greedy"):
        raise ValueError(f"unknown pairing {pairing!r}")
    n = len(stream)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    arm_b = rng.random(n) >= config.arm_split
    u = rng.random(n)
    u2 = rng.random(n)
    if n == 0:
        return Detections(np.empty(0), np.empty(0, dtype=np.int8), np.empty(0, dtype=np.int8))

    arrival = stream.times + np.where(arm_b, config.delay, 0.0)
    pol = stream.jones.copy()
    for arm, mask in (("a", ~arm_b), ("b", arm_b)):
        if config.arm_elements[arm]:
            pol[mask] = pol[mask] @ compose(config.arm_elements[arm]).T
    order = np.argsort(arrival, kind="stable")
    t = arrival[order]
    port = arm_b[order].astype(np.int8)
    pol = pol[order]
    origin = stream.origin[order]
    mol = origin == Origin.MOLECULE
    u, u2 = u[order], u2[order]

    clipped = 0
    args = (t, port, pol, mol, config.spatial_overlap, config.t2, config.pairing_window)
    if config.spatial_overlap == 0 or not _any_cross_overlap(pol, port, mol):
        s = np.where(u < 0.5, 1, -1).astype(np.int8)
    elif pairing == "greedy":
        s = _route_greedy(*args, u, u2)
    else:
        s, clipped = _route_conditional(*args, u)
    detector = np.where(s > 0, D3, D4).astype(np.int8)
    if config.dead_time > 0:
        keep = _alive(t, detector, config.dead_time)
        t, detector, origin = t[keep], detector[keep], origin[keep]
    return Detections(t, detector, origin, clipped)


def _alive(t: np.ndarray, detector: np.ndarray, dead_time: float) -> np.ndarray:
    """Mask of clicks that arrive after each detector has recovered."""
    keep = np.zeros(len(t), dtype=bool)
    for d in (D3, D4):
        idx = np.flatnonzero(detector == d)
        ready = -np.inf
        for i in idx:
            if t[i] >= ready:
                keep[i] = True
                ready = t[i] + dead_time
    return keep


def _any_cross_overlap(pol, port, mol) -> bool:
    """False when every cross-port pair of molecule photons is orthogonal."""
    pa = pol[(port == 0) & mol]
    pb = pol[(port == 1) & mol]
    if len(pa) == 0 or len(pb) == 0:
        return False
    ua = np.unique(np.round(pa, 12), axis=0)
    ub = np.unique(np.round(pb, 12), axis=0)
    if len(ua) * len(ub) > 64:
        return True
    return bool(np.any(np.abs(ua.conj() @ ub.T) > 1e-9))


def split_stream(stream: PhotonStream, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """50/50 beamsplitter onto two detectors (antibunching setup)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    first = rng.random(len(stream)) < 0.5
    return stream.times[first], stream.times[~first]


def write_detections(path: str | Path, det: Detections) -> None:
    """Detection dump: `detector, time_ns` per line, time-sorted."""
    with open(path, "w") as fh:
        for d, t in zip(det.detector, det.times):
            fh.write(f"d{int(d)}, {t:.4f}\n")


def read_detections(path: str | Path) -> Detections:
    dets, times = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d, t = (x.strip() for x in line.split(","))
            if d not in ("d3", "d4"):
                raise ValueError(f"unknown detector {d!r}")
            dets.append(int(d[1]))
            times.append(float(t))
    times = np.array(times)
    order = np.argsort(times, kind="stable")
    return Detections(times[order], np.array(dets, dtype=np.int8)[order],
                      np.zeros(len(times), dtype=np.int8))
