"""Closed-form emitter and interferometer physics.

These functions are the analytic reference for everything the Monte Carlo
pipeline produces. Units: ns, MHz, K; histogram bin widths in ps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# Linewidths measured slightly below 1/(2*pi*T1) are accepted as
# measurement scatter, down to this fractional shortfall.
LIFETIME_LIMIT_TOLERANCE = 0.10

# MHz * ns is 1e-3, so 1/(2*pi*t1[ns]) in MHz carries a factor 1e3.
_MHZ_NS = 1e3


class InvalidParameterError(ValueError):
    """A physical parameter is outside its allowed domain."""


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not value > 0 or not math.isfinite(value):
        raise InvalidParameterError(f"{name} must be positive and finite, got {value!r}")
    return value


def _unit_interval(name: str, value: float, open_low: bool = False) -> float:
    value = float(value)
    if open_low:
        ok = 0.0 < value <= 1.0
    else:
        ok = 0.0 <= value <= 1.0
    if not ok:
        bracket = "(0, 1]" if open_low else "[0, 1]"
        raise InvalidParameterError(f"{name} must lie in {bracket}, got {value!r}")
    return value


def lifetime_limited_linewidth(t1: float) -> float:
    """FWHM in MHz of a transition whose only broadening is decay at 1/t1."""
    t1 = _positive("t1", t1)
    return _MHZ_NS / (2.0 * math.pi * t1)


@dataclass(frozen=True)
class MoleculeParams:
    """Emitter parameters.

    `pump_rate` is the effective ground to excited cycling rate in 1/ns. Use
    :meth:`from_saturation` to specify it as ``s / t1`` instead.
    Two signal-to-background ratios are carried: `signal_to_background` for
    interferometer runs and `antibunching_signal_to_background` for the
    autocorrelation measurement, which were taken under different conditions.
    """

    t1: float = 4.7
    gamma_residual: float = 32.0
    arrhenius_amplitude: float = 7065.0
    activation_temperature: float = 16.0
    pump_rate: float = 1.0 / 4.7
    zpl_fraction: float = 0.33
    filter_purity: float = 0.94
    signal_to_background: float = 20.0
    antibunching_signal_to_background: float = 10.0
    zpl_wavelength: float = 785.0

    def __post_init__(self):
        _positive("t1", self.t1)
        _positive("gamma_residual", self.gamma_residual)
        _positive("activation_temperature", self.activation_temperature)
        _positive("signal_to_background", self.signal_to_background)
        _positive("antibunching_signal_to_background", self.antibunching_signal_to_background)
        _positive("zpl_wavelength", self.zpl_wavelength)
        if not self.arrhenius_amplitude >= 0:
            raise InvalidParameterError(
                f"arrhenius_amplitude must be >= 0, got {self.arrhenius_amplitude!r}")
        if not self.pump_rate >= 0 or not math.isfinite(self.pump_rate):
            raise InvalidParameterError(f"pump_rate must be >= 0, got {self.pump_rate!r}")
        _unit_interval("zpl_fraction", self.zpl_fraction, open_low=True)
        _unit_interval("filter_purity", self.filter_purity, open_low=True)
        check_linewidth(self.gamma_residual, self.t1)

    @classmethod
    def from_saturation(cls, saturation: float, **kwargs) -> "MoleculeParams":
        """Build params with ``pump_rate = saturation / t1``."""
        if not saturation >= 0:
            raise InvalidParameterError(f"saturation must be >= 0, got {saturation!r}")
        t1 = kwargs.get("t1", cls.t1)
        return cls(pump_rate=saturation / t1, **kwargs)

    @property
    def lifetime_linewidth(self) -> float:
        return lifetime_limited_linewidth(self.t1)

    @property
    def correlation_time(self) -> float:
        """Antibunching rise time 1/(R + 1/t1) in ns."""
        return 1.0 / (self.pump_rate + 1.0 / self.t1)

    @property
    def branching(self) -> float:
        """Probability that an emission cycle yields a recorded ZPL photon."""
        return self.zpl_fraction * self.filter_purity

    @property
    def photon_rate(self) -> float:
        """Mean recorded molecule photon rate in 1/ns (0 without pumping)."""
        if self.pump_rate == 0:
            return 0.0
        return self.branching / (1.0 / self.pump_rate + self.t1)


def check_linewidth(gamma_fwhm: float, t1: float) -> None:
    """Reject linewidths narrower than the lifetime limit of `t1`.

    A shortfall of up to LIFETIME_LIMIT_TOLERANCE is tolerated.
    """
    limit = lifetime_limited_linewidth(t1)
    if gamma_fwhm < limit * (1.0 - LIFETIME_LIMIT_TOLERANCE):
        raise InvalidParameterError(
            f"linewidth {gamma_fwhm:.4g} MHz is below the lifetime limit "
            f"{limit:.2f} MHz for t1 = {t1:g} ns")


@dataclass(frozen=True)
class InterferencePolicy:
    """Interferometer imperfections and readout binning."""

    spatial_overlap: float = 0.7
    arm_fraction: float = 0.5
    delay: float = 40.0
    binwidth_ps: float = 760.0

    def __post_init__(self):
        _unit_interval("spatial_overlap", self.spatial_overlap)
        if not 0.0 < self.arm_fraction < 1.0:
            raise InvalidParameterError(
                f"arm_fraction must lie in (0, 1), got {self.arm_fraction!r}")
        _positive("delay", self.delay)
        _positive("binwidth_ps", self.binwidth_ps)

    @property
    def binwidth(self) -> float:
        """Bin width in ns."""
        return self.binwidth_ps * 1e-3


def t2_from_linewidth(gamma_fwhm: float, params: MoleculeParams | None = None) -> float:
    """Coherence time T2 = 1/(pi * FWHM), in ns for a FWHM in MHz."""
    gamma_fwhm = _positive("gamma_fwhm", gamma_fwhm)
    if params is not None:
        check_linewidth(gamma_fwhm, params.t1)
    return _MHZ_NS / (math.pi * gamma_fwhm)


def zpl_linewidth(temperature, params: MoleculeParams):
    """Arrhenius-activated ZPL width Γ(T) = Γ_res + a·exp(-T_a/T) in MHz."""
    t = np.asarray(temperature, dtype=float)
    if np.any(~(t > 0)):
        raise InvalidParameterError(f"temperature must be positive, got {temperature!r}")
    with np.errstate(under="ignore"):
        gamma = params.gamma_residual + params.arrhenius_amplitude * np.exp(
            -params.activation_temperature / t)
    return gamma if gamma.ndim else float(gamma)


def t2_at(temperature: float, params: MoleculeParams) -> float:
    """Coherence time in ns at the given temperature."""
    return t2_from_linewidth(zpl_linewidth(temperature, params))


def excitation_spectrum(detuning, temperature: float, params: MoleculeParams):
    """Unit-height Lorentzian excitation line at `temperature` (detuning in MHz)."""
    half = 0.5 * zpl_linewidth(temperature, params)
    d = np.asarray(detuning, dtype=float)
    out = half**2 / (d**2 + half**2)
    return out if out.ndim else float(out)


def g2_molecule(tau, params: MoleculeParams):
    """Autocorrelation 1 - exp(-(R + 1/t1)|tau|) of the pumped two-level emitter."""
    tau = np.abs(np.asarray(tau, dtype=float))
    out = -np.expm1(-tau / params.correlation_time)
    return out if out.ndim else float(out)


def g2_with_background(tau, signal_fraction: float, params: MoleculeParams):
    """Autocorrelation measured with unpolarized uncorrelated background.

    `signal_fraction` is S/(S+B).
    """
    rho = _unit_interval("signal_fraction", signal_fraction)
    out = 1.0 - rho**2 * (1.0 - np.asarray(g2_molecule(tau, params)))
    return out if np.ndim(out) else float(out)


def signal_fraction(signal_to_background: float) -> float:
    """S/(S+B) for a given S/B ratio."""
    sb = _positive("signal_to_background", signal_to_background)
    return sb / (1.0 + sb)


def g2_cross(tau, polarization_parallel: bool, v_eff: float,
             policy: InterferencePolicy, params: MoleculeParams, t2: float):
    """Output-port cross-correlation g34(tau) behind the delayed interferometer.

    The cross-arm term is reduced by v_eff * exp(-2|tau|/t2) when the two
    inputs of the recombining beamsplitter are co-polarized.
    """
    v_eff = _unit_interval("v_eff", v_eff)
    t2 = _positive("t2", t2)
    if policy.delay < 3.0 * t2:
        warnings.warn(
            f"delay {policy.delay:g} ns < 3*T2 = {3 * t2:g} ns; photons from the two "
            "arms are not independent", RuntimeWarning, stacklevel=2)
    tau = np.asarray(tau, dtype=float)
    pa = policy.arm_fraction
    pb = 1.0 - pa
    dt = policy.delay
    same = (pa**2 + pb**2) * g2_molecule(tau, params)
    lateral = pa * pb * (g2_molecule(tau - dt, params) + g2_molecule(tau + dt, params))
    if polarization_parallel:
        lateral = lateral * (1.0 - v_eff * np.exp(-2.0 * np.abs(tau) / t2))
    out = np.asarray(same + lateral)
    return out if out.ndim else float(out)


def contrast(tau, v_eff: float, policy: InterferencePolicy, params: MoleculeParams,
             t2: float):
    """Two-photon interference contrast (g_perp - g_par) / g_perp."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        g_perp = np.asarray(g2_cross(tau, False, v_eff, policy, params, t2))
        g_par = np.asarray(g2_cross(tau, True, v_eff, policy, params, t2))
    if np.any(g_perp == 0):
        raise InvalidParameterError("contrast undefined where g_perp vanishes")
    out = (g_perp - g_par) / g_perp
    return out if out.ndim else float(out)


def binning_factor(binwidth: float, t2: float) -> float:
    """Mean of exp(-2 tau / t2) over one bin [0, binwidth] (both in ns)."""
    if binwidth == 0:
        return 1.0
    x = 2.0 * binwidth / t2
    return -math.expm1(-x) / x


@dataclass(frozen=True)
class VisibilityBudget:
    overlap: float
    background: float
    binning: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.overlap * self.background * self.binning)

    def as_dict(self) -> dict:
        return {"spatial_overlap": self.overlap, "background": self.background,
                "binning": self.binning, "total": self.total}


def effective_visibility(policy: InterferencePolicy, params: MoleculeParams,
                         t2: float) -> VisibilityBudget:
    """Multiplicative visibility budget: mode overlap, background, bin averaging."""
    t2 = _positive("t2", t2)
    rho = signal_fraction(params.signal_to_background)
    return VisibilityBudget(overlap=policy.spatial_overlap, background=rho**2,
                            binning=binning_factor(policy.binwidth, t2))


@dataclass(frozen=True)
class Coalescence:
    theory: float
    predicted: float


def coalescence_probability(temperature: float, params: MoleculeParams,
                            policy: InterferencePolicy, scale: float = 1.0) -> Coalescence:
    """Coalescence probability at `temperature`.

    `theory` is T2/(2 T1). `predicted` is what the dip-area estimator
    (A_par - A_perp)/A_perp should return: scale * M * T2 / (2 tau_c). Background
    and bin averaging change both areas by the same factor and drop out, so
    only the mode overlap M enters.
    """
    t2 = t2_at(temperature, params)
    theory = t2 / (2.0 * params.t1)
    predicted = scale * policy.spatial_overlap * t2 / (2.0 * params.correlation_time)
    return Coalescence(theory=theory, predicted=predicted)
