"""Start-stop coincidence analysis: histograms, dip fits, contrast, areas.

Histogram bins are centred on integer multiples of the bin width, so one
bin is centred on zero delay. Start-stop is realised as all start/stop
pairs inside the window, which is unbiased at any count rate.

Dip fits compare data with the model averaged over each bin, so the fitted
(depth, rise) describe the underlying curve and ``2 * depth * rise`` is its
missing area regardless of how coarse the bins are.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from molhom.model import InvalidParameterError

DEFAULT_NORM_RANGE = (60.0, 100.0)


class FitError(RuntimeError):
    """Raised when a fit does not converge; carries the best attempt."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class CoincidenceHistogram:
    binwidth_ps: float
    window: float  # ns, bins cover [-window, window]
    tau: np.ndarray  # bin centres, ns
    counts: np.ndarray
    baseline: float | None = None  # counts per bin on the plateau
    norm_range: tuple[float, float] | None = None

    @property
    def binwidth(self) -> float:
        return self.binwidth_ps * 1e-3

    @property
    def normalized(self) -> bool:
        return self.baseline is not None

    @property
    def values(self) -> np.ndarray:
        """Normalized g per bin."""
        if self.baseline is None:
            raise ValueError("histogram has not been normalized")
        return self.counts / self.baseline

    @property
    def sigma(self) -> np.ndarray:
        """Poisson uncertainty of `values`, with counts floored at 1."""
        return np.sqrt(np.maximum(self.counts, 1)) / self.baseline

    def value_at(self, tau: float) -> float:
        return float(self.values[self.bin_index(tau)])

    def bin_index(self, tau: float) -> int:
        return int(np.argmin(np.abs(self.tau - tau)))

    def __add__(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        _check_same_binning(self, other)
        return CoincidenceHistogram(self.binwidth_ps, self.window, self.tau,
                                    self.counts + other.counts)

    def to_csv(self, path: str | Path) -> None:
        """Columns `tau_ns,counts,g2`; g2 is empty before normalization."""
        with open(path, "w") as fh:
            fh.write("tau_ns,counts,g2\n")
            g = self.values if self.normalized else [None] * len(self.tau)
            for t, c, v in zip(self.tau, self.counts, g):
                fh.write(f"{t:.9g},{int(c)},{'' if v is None else format(v, '.9g')}\n")

    @classmethod
    def from_csv(cls, path: str | Path, norm_range: tuple[float, float] | None = None):
        data = np.genfromtxt(path, delimiter=",", names=True)
        tau = np.atleast_1d(data["tau_ns"])
        counts = np.atleast_1d(data["counts"]).astype(np.int64)
        width = float(np.median(np.diff(tau))) if len(tau) > 1 else 1.0
        hist = cls(round(width * 1e3, 6), float(np.max(np.abs(tau)) + width / 2), tau, counts)
        if norm_range is not None:
            hist = normalize(hist, norm_range)
        return hist


def bin_centres(binwidth: float, window: float) -> np.ndarray:
    k = int(math.floor(window / binwidth - 0.5 + 1e-9))
    if k < 0:
        raise InvalidParameterError("window is narrower than one bin")
    return np.arange(-k, k + 1) * binwidth


def build_histogram(d3, d4, binwidth_ps: float, window: float,
                    chunk: int = 200_000) -> CoincidenceHistogram:
    """Histogram of t_stop - t_start for all d3 starts and d4 stops in the window."""
    if not binwidth_ps > 0:
        raise InvalidParameterError(f"binwidth must be positive, got {binwidth_ps!r}")
    w = binwidth_ps * 1e-3
    tau = bin_centres(w, window)
    k = (len(tau) - 1) // 2
    edge = (k + 0.5) * w
    counts = np.zeros(len(tau), dtype=np.int64)
    d3 = np.asarray(d3, dtype=float)
    d4 = np.asarray(d4, dtype=float)
    if len(d3) and len(d4):
        for s in range(0, len(d3), chunk):
            starts = d3[s:s + chunk]
            lo = np.searchsorted(d4, starts - edge, side="left")
            hi = np.searchsorted(d4, starts + edge, side="left")
            n = hi - lo
            total = int(n.sum())
            if total == 0:
                continue
            first = np.repeat(lo - np.cumsum(n) + n, n) + np.arange(total)
            delays = d4[first] - np.repeat(starts, n)
            idx = np.floor((delays + edge) / w).astype(np.int64)
            idx = idx[(idx >= 0) & (idx < len(tau))]
            counts += np.bincount(idx, minlength=len(tau))
    return CoincidenceHistogram(binwidth_ps, window, tau, counts)


def normalize(hist: CoincidenceHistogram,
              norm_range: tuple[float, float] = DEFAULT_NORM_RANGE) -> CoincidenceHistogram:
    """Scale by the mean counts per bin on the large-delay plateau."""
    lo, hi = norm_range
    sel = (np.abs(hist.tau) >= lo) & (np.abs(hist.tau) <= hi)
    if sel.sum() < 20:
        raise InvalidParameterError(
            f"normalization range {norm_range} holds {int(sel.sum())} bins; need >= 20")
    baseline = float(hist.counts[sel].mean())
    if baseline <= 0:
        raise InvalidParameterError("no counts in the normalization range")
    _check_flat(np.abs(hist.tau[sel]), hist.counts[sel], baseline, norm_range)
    return replace(hist, baseline=baseline, norm_range=(float(lo), float(hi)))


def _check_flat(x, counts, baseline, norm_range) -> None:
    """Reject a normalization range that is visibly sloped, e.g. inside a dip."""
    x = x - x.mean()
    sxx = float(x @ x)
    if sxx == 0:
        return
    slope = float(x @ (counts - baseline)) / sxx
    slope_err = math.sqrt(baseline / sxx)
    span = float(x.max() - x.min())
    if abs(slope) > 6.0 * slope_err and abs(slope) * span > 0.02 * baseline:
        raise InvalidParameterError(
            f"counts in the normalization range {norm_range} are not flat "
            f"({100 * slope * span / baseline:+.1f}% across it); the range overlaps a dip")


def _check_same_binning(a: CoincidenceHistogram, b: CoincidenceHistogram) -> None:
    if a.binwidth_ps != b.binwidth_ps or len(a.tau) != len(b.tau) or not np.allclose(a.tau, b.tau):
        raise ValueError("histograms have different binning")


# -- dip fitting --------------------------------------------------------------

def _exp_antiderivative(x, rise):
    return np.sign(x) * rise * -np.expm1(-np.abs(x) / rise)


def binned_dip(tau, binwidth, center, rise):
    """Average of exp(-|t - center|/rise) over each bin centred at `tau`."""
    half = 0.5 * binwidth
    if binwidth == 0:
        return np.exp(-np.abs(tau - center) / rise)
    return (_exp_antiderivative(tau + half - center, rise)
            - _exp_antiderivative(tau - half - center, rise)) / binwidth


@dataclass
class DipComponent:
    center: float
    depth: float
    rise: float
    depth_err: float = 0.0
    rise_err: float = 0.0
    fixed: bool = False

    @property
    def area(self) -> float:
        return 2.0 * self.depth * self.rise


@dataclass
class DipFit:
    """Baseline minus exponential dips, several components allowed per centre."""

    baseline: float
    components: list[DipComponent]
    baseline_err: float = 0.0
    chi2: float = float("nan")
    dof: int = 0
    converged: bool = True
    restarts: int = 0
    binwidth: float = 0.0  # ns, the binning the fit was made against

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    @property
    def centers(self) -> list[float]:
        return sorted({c.center for c in self.components})

    def at(self, center: float) -> list[DipComponent]:
        return [c for c in self.components if abs(c.center - center) < 1e-9]

    def value(self, center: float) -> float:
        """Fitted curve at the dip centre (point value, not bin-averaged)."""
        return self.baseline - sum(c.depth for c in self.at(center))

    def curve(self, tau, binwidth: float = 0.0):
        tau = np.asarray(tau, dtype=float)
        out = np.full(tau.shape, self.baseline)
        for c in self.components:
            out -= c.depth * binned_dip(tau, binwidth, c.center, c.rise)
        return out

    def to_dict(self) -> dict:
        dips = []
        for center in self.centers:
            comps = self.at(center)
            err = math.sqrt(sum(c.depth_err**2 for c in comps))
            dips.append({
                "center_ns": center,
                "depth": sum(c.depth for c in comps),
                "rise_ns": comps[0].rise if len(comps) == 1 else None,
                "stderr": err,
                "value": self.value(center),
                "area_ns": dip_area(self, center),
                "components": [asdict(c) for c in comps],
            })
        return {"baseline": self.baseline, "baseline_stderr": self.baseline_err,
                "dips": dips, "chi2": self.chi2, "dof": self.dof,
                "reduced_chi2": self.reduced_chi2, "converged": self.converged,
                "restarts": self.restarts, "binwidth_ns": self.binwidth}

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(_round_floats(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "DipFit":
        comps = [DipComponent(**c) for d in data["dips"] for c in d["components"]]
        return cls(baseline=data["baseline"], components=comps,
                   baseline_err=data.get("baseline_stderr", 0.0), chi2=data.get("chi2", float("nan")),
                   dof=data.get("dof", 0), converged=data.get("converged", True),
                   restarts=data.get("restarts", 0), binwidth=data.get("binwidth_ns", 0.0))


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}") if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def _half_depth_rise(tau, g, center, baseline, depth, limit, binwidth):
    """Rise time from where the dip first recovers half its depth."""
    if depth <= 0:
        return max(binwidth, 1.0)
    target = baseline - 0.5 * depth
    for sign in (1, -1):
        sel = (sign * (tau - center) >= 0) & (np.abs(tau - center) <= limit)
        side = np.argsort(np.abs(tau[sel] - center))
        d = np.abs(tau[sel] - center)[side]
        vals = g[sel][side]
        above = np.flatnonzero(vals >= target)
        if len(above):
            return max(d[above[0]] / math.log(2.0), 0.5 * binwidth)
    return max(limit / 4, binwidth)


def _initial_guess(hist, centers, fixed, free_extra):
    tau, g = hist.tau, hist.values
    baseline = 1.0
    spacing = min((abs(a - b) for a in centers for b in centers if a != b), default=hist.window)
    limit = 0.5 * spacing
    bw = hist.binwidth
    background = np.full(tau.shape, baseline)
    for c in fixed:
        background -= c.depth * binned_dip(tau, bw, c.center, c.rise)
    p = [baseline]
    for center in list(centers) + list(free_extra):
        near = np.abs(tau - center) <= max(limit / 4, bw)
        resid = g - background + baseline
        depth = max(baseline - float(resid[near].min()), 1e-3)
        rise = _half_depth_rise(tau, resid, center, baseline, depth, limit, bw)
        p += [depth, rise]
    return np.array(p)


def fit_dips(hist: CoincidenceHistogram, centers, fixed=(), extra=(),
             restarts: int = 5, seed: int = 0) -> DipFit:
    """Weighted least-squares fit of baseline - sum_k c_k exp(-|tau - x_k|/theta_k).

    One free exponential per entry of `centers` plus one per entry of
    `extra` (additional free components at those centres). `fixed` are
    DipComponents held constant. Poisson weights use max(counts, 1).
    """
    if not hist.normalized:
        raise ValueError("fit_dips needs a normalized histogram")
    fixed = [replace(c, fixed=True) for c in fixed]
    all_centers = list(centers) + list(extra)
    tau, g, sig = hist.tau, hist.values, hist.sigma
    bw = hist.binwidth
    fixed_curve = np.zeros_like(tau)
    for c in fixed:
        fixed_curve += c.depth * binned_dip(tau, bw, c.center, c.rise)

    def model(p):
        y = p[0] - fixed_curve
        for k, center in enumerate(all_centers):
            y = y - p[1 + 2 * k] * binned_dip(tau, bw, center, p[2 + 2 * k])
        return y

    def resid(p):
        return (model(p) - g) / sig

    n = len(all_centers)
    lo = np.array([0.0] + [0.0, 1e-3] * n)
    hi = np.array([np.inf] + [np.inf, 2.0 * hist.window] * n)
    p0 = np.clip(_initial_guess(hist, centers, fixed, extra), lo + 1e-9, hi - 1e-9)
    rng = np.random.default_rng(seed)
    best = None
    attempts = 0
    for attempt in range(restarts + 1):
        start = p0 if attempt == 0 else np.clip(
            p0 * rng.uniform(0.5, 1.5, len(p0)), lo + 1e-9, hi - 1e-9)
        res = least_squares(resid, start, bounds=(lo, hi), method="trf", x_scale="jac",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        attempts = attempt
        if best is None or res.cost < best.cost:
            best = res
        if res.success and np.all(model(res.x) >= -1e-9):
            break
    params = best.x
    try:
        cov = np.linalg.pinv(best.jac.T @ best.jac)
        err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        err = np.full(len(params), np.nan)
    comps = [replace(c) for c in fixed]
    for k, center in enumerate(all_centers):
        comps.append(DipComponent(center, float(params[1 + 2 * k]), float(params[2 + 2 * k]),
                                  float(err[1 + 2 * k]), float(err[2 + 2 * k])))
    fit = DipFit(baseline=float(params[0]), components=comps, baseline_err=float(err[0]),
                 chi2=float(2 * best.cost), dof=len(tau) - len(params),
                 converged=bool(best.success), restarts=attempts, binwidth=bw)
    if not best.success:
        raise FitError(f"dip fit did not converge after {restarts} restarts: {best.message}", fit)
    return fit


def fit_three_dips(hist: CoincidenceHistogram, delay: float,
                   reference: DipFit | None = None, **kwargs) -> DipFit:
    """Fit the central dip and the two lateral dips at +-delay.

    With a `reference` fit (the orthogonal-polarization histogram of the same
    source) the central dip keeps the reference's antibunching component
    fixed and gains one free component for the two-photon interference term.
    """
    centers = [-delay, 0.0, delay]
    if reference is None:
        return fit_dips(hist, centers, **kwargs)
    fixed = reference.at(0.0)
    if not fixed:
        raise ValueError("reference fit has no central dip")
    return fit_dips(hist, [-delay, delay], fixed=fixed, extra=[0.0], **kwargs)


def dip_area(fit: DipFit, center: float) -> float:
    """Missing area below the baseline of the dip at `center`, in ns."""
    return sum(c.area for c in fit.at(center))


def coalescence_from_areas(fit_parallel: DipFit, fit_orthogonal: DipFit) -> float:
    """(A_par - A_perp) / A_perp from the central-dip missing areas."""
    a_perp = dip_area(fit_orthogonal, 0.0)
    if not a_perp > 0:
        raise InvalidParameterError("orthogonal central dip has no area")
    return (dip_area(fit_parallel, 0.0) - a_perp) / a_perp


# -- contrast -----------------------------------------------------------------

@dataclass
class ContrastCurve:
    tau: np.ndarray
    contrast: np.ndarray  # NaN where masked
    sigma: np.ndarray

    def peak(self, near: float = 0.0, span: float = 2.0) -> tuple[float, float]:
        """(tau, C) of the largest unmasked value within `span` ns of `near`."""
        sel = (np.abs(self.tau - near) <= span) & np.isfinite(self.contrast)
        if not np.any(sel):
            raise ValueError("no unmasked contrast values near the requested delay")
        i = np.flatnonzero(sel)[np.argmax(self.contrast[sel])]
        return float(self.tau[i]), float(self.contrast[i])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("tau_ns,contrast\n")
            for t, c in zip(self.tau, self.contrast):
                fh.write(f"{t:.9g},{'' if not np.isfinite(c) else format(c, '.9g')}\n")


def contrast_curve(h_parallel: CoincidenceHistogram, h_orthogonal: CoincidenceHistogram,
                   mask_below: float = 0.05) -> ContrastCurve:
    """Per-bin (g_perp - g_par) / g_perp, masked where g_perp <= `mask_below`."""
    _check_same_binning(h_parallel, h_orthogonal)
    gq, gp = h_parallel.values, h_orthogonal.values
    sq, sp = h_parallel.sigma, h_orthogonal.sigma
    ok = gp > mask_below
    c = np.full(gp.shape, np.nan)
    s = np.full(gp.shape, np.nan)
    c[ok] = (gp[ok] - gq[ok]) / gp[ok]
    s[ok] = np.hypot(sq[ok] / gp[ok], gq[ok] * sp[ok] / gp[ok] ** 2)
    return ContrastCurve(h_parallel.tau.copy(), c, s)


@dataclass
class DecayFit:
    amplitude: float
    decay: float  # ns
    decay_err: float


def fit_contrast_decay(curve: ContrastCurve, tau_min: float, tau_max: float) -> DecayFit:
    """Fit A exp(-|tau|/theta) to the contrast for tau_min <= |tau| <= tau_max."""
    a = np.abs(curve.tau)
    sel = (a >= tau_min) & (a <= tau_max) & np.isfinite(curve.contrast) & (curve.sigma > 0)
    if sel.sum() < 3:
        raise ValueError("too few contrast bins in the decay-fit range")
    x, y, s = a[sel], curve.contrast[sel], curve.sigma[sel]
    pos = y > 0
    if pos.sum() >= 2:
        slope, icpt = np.polyfit(x[pos], np.log(y[pos]), 1)
        p0 = [math.exp(icpt), -1.0 / slope if slope < 0 else tau_max]
    else:
        p0 = [max(y.max(), 1e-3), 0.5 * (tau_min + tau_max)]
    res = least_squares(lambda p: (p[0] * np.exp(-x / p[1]) - y) / s, p0,
                        bounds=([0.0, 1e-3], [np.inf, np.inf]), xtol=1e-12, ftol=1e-12)
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    return DecayFit(float(res.x[0]), float(res.x[1]), float(math.sqrt(max(cov[1, 1], 0.0))))


# -- background ---------------------------------------------------------------

def background_correct_g2(g_measured, signal_fraction: float):
    """Undo background mixing: g_true = 1 - (1 - g_meas)/rho^2.

    Returns (g_true, clipped) where clipped marks values raised to 0.
    """
    if not 0.0 < signal_fraction <= 1.0:
        raise InvalidParameterError(f"signal_fraction must lie in (0, 1], got {signal_fraction!r}")
    g = 1.0 - (1.0 - np.asarray(g_measured, dtype=float)) / signal_fraction**2
    clipped = g < 0
    g = np.where(clipped, 0.0, g)
    if g.ndim == 0:
        return float(g), bool(clipped)
    return g, clipped
