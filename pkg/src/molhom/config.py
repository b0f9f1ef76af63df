"""Experiment configuration: a strict line-oriented ``key = value`` format.

Grammar::

    # comment (also after a value)
    scenario = hom
    molecule.t1 = 4.7
    sweep.temperatures = 2, 2.5, 3

Keys are dotted paths from the schema below; unknown or repeated keys are
errors. Lists are comma-separated. Booleans are true/false. Every error names
the line number and key path.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

from molhom.model import (InvalidParameterError, MoleculeParams, lifetime_limited_linewidth,
                          t2_at)

SCENARIOS = ("hom", "temperature_sweep", "tomography", "fit", "peres")
PAIRINGS = ("conditional", "greedy")

# Below this expected plateau count per bin the dip fits become unreliable.
MIN_BASELINE_COUNTS = 100.0


class ConfigError(ValueError):
    """Invalid configuration. `diagnostics` holds one message per problem."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("\n".join(diagnostics))
        self.diagnostics = list(diagnostics)


class ConfigWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BenchSettings:
    delay: float = 40.0
    arm_split: float = 0.5
    spatial_overlap: float = 0.7
    pairing_window: float | None = None  # ns, None means 5*T2
    t2: float | None = None  # ns, None means T2 at run.temperature
    pairing: str = "conditional"
    dead_time: float = 0.0  # ns


@dataclass(frozen=True)
class RunSettings:
    duration: float = 0.03  # s
    seed: int = 0
    partitions: int = 4
    binwidth: float = 760.0  # ps
    window: float = 100.0  # ns
    norm_min: float = 60.0
    norm_max: float = 100.0
    temperature: float = 2.0  # K
    background: bool = True
    dump_events: bool = False
    plot_script: bool = False


@dataclass(frozen=True)
class SweepSettings:
    temperatures: tuple = (2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)


@dataclass(frozen=True)
class TomoSettings:
    visibility: float = 0.5
    rho_file: str | None = None
    pair_count: float = 1e4
    background_level: float = 0.0
    settings: tuple | None = None  # None means {H,V,D,R} x {H,V,D,R}
    restarts: int = 5


@dataclass(frozen=True)
class FitSettings:
    histogram: str | None = None
    reference_histogram: str | None = None
    delay: float | None = None  # None means bench.delay


@dataclass(frozen=True)
class PeresSettings:
    rho_file: str | None = None  # None means the bundled reference matrix


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "hom"
    molecule: MoleculeParams = field(default_factory=MoleculeParams)
    bench: BenchSettings = field(default_factory=BenchSettings)
    run: RunSettings = field(default_factory=RunSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    tomo: TomoSettings = field(default_factory=TomoSettings)
    fit: FitSettings = field(default_factory=FitSettings)
    peres: PeresSettings = field(default_factory=PeresSettings)
    output: str | None = None

    @property
    def t2(self) -> float:
        """Coherence time used by the interferometer, in ns."""
        if self.bench.t2 is not None:
            return self.bench.t2
        return t2_at(self.run.temperature, self.molecule)

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section_key=value`` overrides, e.g. ``run_seed=3``."""
        cfg = self
        for key, value in dotted.items():
            section, _, name = key.partition("_")
            if not name:
                cfg = replace(cfg, **{section: value})
            else:
                cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{name: value})})
        return cfg


# -- value parsers ------------------------------------------------------------

def _float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("must be finite")
    return value


def _int(text: str) -> int:
    return int(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true or false")


def _str(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _float_list(text: str) -> tuple:
    items = [s.strip() for s in text.split(",")]
    if not all(items):
        raise ValueError("empty list item")
    return tuple(_float(s) for s in items)


def _settings_list(text: str) -> tuple:
    out = []
    for item in (s.strip() for s in text.split(",")):
        if len(item) != 2 or any(c not in "HVDARL" for c in item):
            raise ValueError(f"setting {item!r} must be two letters from H, V, D, A, R, L")
        out.append((item[0], item[1]))
    if len(out) != 16:
        raise ValueError(f"expected 16 settings, got {len(out)}")
    return tuple(out)


def _choice(options):
    def parse(text: str) -> str:
        text = _str(text)
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text
    return parse


def _positive(v):
    return None if v > 0 else "must be positive"


def _non_negative(v):
    return None if v >= 0 else "must be >= 0"


def _unit(v):
    return None if 0.0 <= v <= 1.0 else "must lie in [0, 1]"


def _open_unit(v):
    return None if 0.0 < v <= 1.0 else "must lie in (0, 1]"


def _strict_unit(v):
    return None if 0.0 < v < 1.0 else "must lie in (0, 1)"


def _all_positive(v):
    return None if all(x > 0 for x in v) else "all temperatures must be positive"


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    check: Callable[[Any], str | None] | None = None


_MOLECULE_KEYS = {
    "t1": _Key(_float, _positive),
    "gamma_residual": _Key(_float, _positive),
    "arrhenius_amplitude": _Key(_float, _non_negative),
    "activation_temperature": _Key(_float, _positive),
    "pump_rate": _Key(_float, _non_negative),
    "saturation": _Key(_float, _non_negative),
    "zpl_fraction": _Key(_float, _open_unit),
    "filter_purity": _Key(_float, _open_unit),
    "signal_to_background": _Key(_float, _positive),
    "antibunching_signal_to_background": _Key(_float, _positive),
    "zpl_wavelength": _Key(_float, _positive),
}

SCHEMA: dict[str, _Key] = {
    "scenario": _Key(_choice(SCENARIOS)),
    "output": _Key(_str),
    **{f"molecule.{k}": v for k, v in _MOLECULE_KEYS.items()},
    "bench.delay": _Key(_float, _positive),
    "bench.arm_split": _Key(_float, _strict_unit),
    "bench.spatial_overlap": _Key(_float, _unit),
    "bench.pairing_window": _Key(_float, _positive),
    "bench.t2": _Key(_float, _positive),
    "bench.pairing": _Key(_choice(PAIRINGS)),
    "bench.dead_time": _Key(_float, _non_negative),
    "run.duration": _Key(_float, _positive),
    "run.seed": _Key(_int, _non_negative),
    "run.partitions": _Key(_int, _positive),
    "run.binwidth": _Key(_float, _positive),
    "run.window": _Key(_float, _positive),
    "run.norm_min": _Key(_float, _non_negative),
    "run.norm_max": _Key(_float, _positive),
    "run.temperature": _Key(_float, _positive),
    "run.background": _Key(_bool),
    "run.dump_events": _Key(_bool),
    "run.plot_script": _Key(_bool),
    "sweep.temperatures": _Key(_float_list, _all_positive),
    "tomo.visibility": _Key(_float, _unit),
    "tomo.rho_file": _Key(_str),
    "tomo.pair_count": _Key(_float, _positive),
    "tomo.background_level": _Key(_float, _non_negative),
    "tomo.settings": _Key(_settings_list),
    "tomo.restarts": _Key(_int, _non_negative),
    "fit.histogram": _Key(_str),
    "fit.reference_histogram": _Key(_str),
    "fit.delay": _Key(_float, _positive),
    "peres.rho_file": _Key(_str),
}


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _parse_lines(text: str) -> tuple[dict[str, Any], dict[str, int], list[str]]:
    values: dict[str, Any] = {}
    where: dict[str, int] = {}
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            errors.append(f"line {lineno}: syntax error: expected 'key = value', got {raw.strip()!r}")
            continue
        if key not in SCHEMA:
            errors.append(f"line {lineno}: {key}: unknown key")
            continue
        if key in values:
            errors.append(f"line {lineno}: {key}: duplicate key (first set on line {where[key]})")
            continue
        if not value:
            errors.append(f"line {lineno}: {key}: missing value")
            continue
        entry = SCHEMA[key]
        try:
            parsed = entry.parse(value)
        except ValueError as exc:
            errors.append(f"line {lineno}: {key}: invalid value {value!r}: {exc}")
            continue
        reason = entry.check(parsed) if entry.check else None
        if reason:
            errors.append(f"line {lineno}: {key}: {reason}, got {value}")
            continue
        values[key] = parsed
        where[key] = lineno
    return values, where, errors


def _section(values: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def _at(where: dict, key: str) -> str:
    return f"line {where[key]}: " if key in where else ""


def _build_molecule(values: dict, where: dict, errors: list[str]) -> MoleculeParams:
    kw = _section(values, "molecule")
    if "saturation" in kw and "pump_rate" in kw:
        errors.append(f"{_at(where, 'molecule.saturation')}molecule.saturation: "
                      "conflicts with molecule.pump_rate; set only one")
        kw.pop("saturation")
    sat = kw.pop("saturation", None)
    t1 = kw.get("t1", MoleculeParams.t1)
    if sat is not None:
        kw["pump_rate"] = sat / t1
    gamma = kw.get("gamma_residual", MoleculeParams.gamma_residual)
    try:
        return MoleculeParams(**kw)
    except InvalidParameterError as exc:
        if "lifetime limit" in str(exc):
            key = "molecule.gamma_residual" if "molecule.gamma_residual" in where else "molecule.t1"
            errors.append(f"{_at(where, key)}{key}: linewidth {gamma:g} MHz is below lifetime "
                          f"limit {lifetime_limited_linewidth(t1):.2f} MHz for t1 = {t1:g} ns")
        else:
            errors.append(f"molecule: {exc}")
        return MoleculeParams()


def _build(cls, values: dict, prefix: str):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in _section(values, prefix).items() if k in names})


def validate_config(text: str) -> tuple[ExperimentConfig, list[str]]:
    """Parse and check a configuration.

    Returns (config, warnings). Raises ConfigError listing every problem.
    """
    values, where, errors = _parse_lines(text)
    molecule = _build_molecule(values, where, errors)
    cfg = ExperimentConfig(
        scenario=values.get("scenario", "hom"),
        molecule=molecule,
        bench=_build(BenchSettings, values, "bench"),
        run=_build(RunSettings, values, "run"),
        sweep=_build(SweepSettings, values, "sweep"),
        tomo=_build(TomoSettings, values, "tomo"),
        fit=_build(FitSettings, values, "fit"),
        peres=_build(PeresSettings, values, "peres"),
        output=values.get("output"),
    )
    run = cfg.run
    if run.norm_min >= run.norm_max:
        errors.append(f"{_at(where, 'run.norm_min')}run.norm_min: must be below run.norm_max "
                      f"({run.norm_min:g} >= {run.norm_max:g})")
    if run.norm_max > run.window:
        errors.append(f"{_at(where, 'run.norm_max')}run.norm_max: exceeds run.window "
                      f"({run.norm_max:g} > {run.window:g})")
    if run.binwidth * 1e-3 * 2 > run.window:
        errors.append(f"{_at(where, 'run.binwidth')}run.binwidth: wider than the window")
    if cfg.scenario == "fit" and cfg.fit.histogram is None:
        errors.append("fit.histogram: required for scenario fit")
    if errors:
        raise ConfigError(errors)
    return cfg, check_warnings(cfg)


def check_warnings(cfg: ExperimentConfig) -> list[str]:
    """Non-fatal warnings for an otherwise valid configuration."""
    out = []
    if cfg.scenario in ("hom", "temperature_sweep"):
        temps = [cfg.run.temperature] if cfg.scenario == "hom" else list(cfg.sweep.temperatures)
        t2 = cfg.t2 if cfg.scenario == "hom" or cfg.bench.t2 else max(
            t2_at(t, cfg.molecule) for t in temps)
        if cfg.bench.delay < 3.0 * t2:
            out.append(f"bench.delay: {cfg.bench.delay:g} ns is shorter than 3*T2 = {3 * t2:.3g} ns; "
                       "photons from the two arms overlap in time")
        expected = expected_baseline_counts(cfg)
        if expected < MIN_BASELINE_COUNTS:
            out.append(f"run.duration: about {expected:.3g} coincidences per bin expected on the "
                       f"plateau, below {MIN_BASELINE_COUNTS:g}; fits will be noisy")
    return out


def expected_baseline_counts(cfg: ExperimentConfig) -> float:
    """Plateau coincidences per bin, N3*N4*w/D, for the configured run."""
    rate = cfg.molecule.photon_rate
    if cfg.run.background:
        rate *= 1.0 + 1.0 / cfg.molecule.signal_to_background
    duration = cfg.run.duration * 1e9
    half = 0.5 * rate * duration
    return half * half * cfg.run.binwidth * 1e-3 / duration


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a config file, emitting warnings as ConfigWarning."""
    cfg, notes = validate_config(Path(path).read_text())
    for note in notes:
        warnings.warn(note, ConfigWarning, stacklevel=2)
    return cfg


DEFAULT_CONFIG_TEXT = """\
# Default operating point; every key is optional.
scenario = hom
molecule.t1 = 4.7
molecule.gamma_residual = 32
molecule.arrhenius_amplitude = 7065
molecule.activation_temperature = 16
molecule.saturation = 1
molecule.zpl_fraction = 0.33
molecule.filter_purity = 0.94
molecule.signal_to_background = 20
molecule.antibunching_signal_to_background = 10
bench.delay = 40
bench.arm_split = 0.5
bench.spatial_overlap = 0.7
bench.pairing = conditional
bench.dead_time = 0
run.duration = 0.03
run.seed = 0
run.partitions = 4
run.binwidth = 760
run.window = 100
run.norm_min = 60
run.norm_max = 100
run.temperature = 2
run.background = true
sweep.temperatures = 2, 2.5, 3, 3.5, 4, 4.5, 5
tomo.visibility = 0.5
tomo.pair_count = 10000
tomo.background_level = 0
"""
