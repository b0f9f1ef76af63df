"""Scenario orchestration: run a configured experiment and write its files.

Every scenario writes into one output directory and finishes with
``manifest.json``, which lists every file written (itself included). Numbers
are serialized with 9 significant digits and no timestamps, so a fixed
config and seed give byte-identical files.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from molhom import correlator as corr
from molhom import entanglement as ent
from molhom.config import ExperimentConfig
from molhom.model import (InterferencePolicy, VisibilityBudget, binning_factor,
                          coalescence_probability, contrast, effective_visibility, g2_cross,
                          signal_fraction, t2_at, zpl_linewidth)
from molhom.optics import BenchConfig, propagate, write_detections
from molhom.source import Origin, PhotonStream, StreamConfig, sample_stream, write_events

MANIFEST = "manifest.json"

# Contrast decay is fitted from 3 antibunching rise times out to this |tau| (ns).
_DECAY_FIT_MAX = 25.0


@dataclass
class Manifest:
    directory: Path
    files: list[str] = field(default_factory=list)

    def add(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.directory / name

    @property
    def paths(self) -> list[Path]:
        return [self.directory / f for f in self.files]

    def write(self) -> Path:
        path = self.add(MANIFEST)
        _write_json(path, {"files": sorted(self.files)})
        return path


def _sig(value):
    """Round floats to 9 significant digits for serialization; NaN becomes null."""
    if isinstance(value, dict):
        return {str(k): _sig(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sig(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return float(f"{value:.9g}") if math.isfinite(value) else None
    return value


def _write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(_sig(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join("" if v is None or (isinstance(v, float) and not math.isfinite(v))
                              else format(v, ".9g") for v in row) + "\n")


def route_seed(seed: int) -> int:
    """Seed for the interferometer draws; both polarizations share it."""
    return int(seed) + 1


def _stream(cfg: ExperimentConfig) -> PhotonStream:
    bg = None if cfg.run.background else 0.0
    return sample_stream(StreamConfig(duration=cfg.run.duration, seed=cfg.run.seed,
                                      params=cfg.molecule, background_rate=bg,
                                      partitions=cfg.run.partitions))


def _bench(cfg: ExperimentConfig, t2: float, parallel: bool) -> BenchConfig:
    kw = dict(delay=cfg.bench.delay, arm_split=cfg.bench.arm_split,
              spatial_overlap=cfg.bench.spatial_overlap, pairing_window=cfg.bench.pairing_window,
              dead_time=cfg.bench.dead_time)
    return BenchConfig.parallel(t2, **kw) if parallel else BenchConfig.orthogonal(t2, **kw)


def _histogram(cfg: ExperimentConfig, det) -> corr.CoincidenceHistogram:
    h = corr.build_histogram(det.d3, det.d4, cfg.run.binwidth, cfg.run.window)
    return corr.normalize(h, (cfg.run.norm_min, cfg.run.norm_max))


def _policy(cfg: ExperimentConfig) -> InterferencePolicy:
    return InterferencePolicy(spatial_overlap=cfg.bench.spatial_overlap,
                              arm_fraction=cfg.bench.arm_split, delay=cfg.bench.delay,
                              binwidth_ps=cfg.run.binwidth)


def _budget(cfg: ExperimentConfig, t2: float) -> VisibilityBudget:
    policy = _policy(cfg)
    if cfg.run.background:
        return effective_visibility(policy, cfg.molecule, t2)
    return VisibilityBudget(policy.spatial_overlap, 1.0, binning_factor(policy.binwidth, t2))


def _g_model(cfg: ExperimentConfig, t2: float, tau: float, parallel: bool) -> float:
    """Expected normalized g34 including background, before bin averaging."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        g = g2_cross(tau, parallel, cfg.bench.spatial_overlap, _policy(cfg), cfg.molecule, t2)
    rho = signal_fraction(cfg.molecule.signal_to_background) if cfg.run.background else 1.0
    return 1.0 - rho**2 * (1.0 - g)


def _photon_counts(stream: PhotonStream) -> dict:
    return {"molecule": int(np.sum(stream.origin == Origin.MOLECULE)),
            "background": int(np.sum(stream.origin == Origin.BACKGROUND))}


def _decay(cc: corr.ContrastCurve, fit_perp: corr.DipFit, delay: float):
    comps = fit_perp.at(0.0)
    lo = 3.0 * comps[0].rise if comps else 0.0
    hi = min(_DECAY_FIT_MAX, delay - lo)
    try:
        return corr.fit_contrast_decay(cc, lo, hi), (lo, hi)
    except ValueError:
        return None, (lo, hi)


# -- scenarios ----------------------------------------------------------------

def run_hom(cfg: ExperimentConfig, manifest: Manifest) -> dict:
    t2 = cfg.t2
    delay = cfg.bench.delay
    stream = _stream(cfg)
    seed = route_seed(cfg.run.seed)
    det_perp = propagate(stream, _bench(cfg, t2, False), seed, cfg.bench.pairing)
    det_par = propagate(stream, _bench(cfg, t2, True), seed, cfg.bench.pairing)
    h_perp, h_par = _histogram(cfg, det_perp), _histogram(cfg, det_par)
    fit_perp = corr.fit_three_dips(h_perp, delay)
    fit_par = corr.fit_three_dips(h_par, delay)
    fit_ref = corr.fit_three_dips(h_par, delay, reference=fit_perp)
    cc = corr.contrast_curve(h_par, h_perp)
    peak_tau, peak_c = cc.peak()
    decay, (lo, hi) = _decay(cc, fit_perp, delay)

    h_perp.to_csv(manifest.add("histogram_orthogonal.csv"))
    h_par.to_csv(manifest.add("histogram_parallel.csv"))
    fit_perp.to_json(manifest.add("fit_orthogonal.json"))
    fit_par.to_json(manifest.add("fit_parallel.json"))
    fit_ref.to_json(manifest.add("fit_parallel_referenced.json"))
    cc.to_csv(manifest.add("contrast.csv"))
    if cfg.run.dump_events:
        write_events(manifest.add("events.csv"), stream)
        write_detections(manifest.add("detections_orthogonal.csv"), det_perp)
        write_detections(manifest.add("detections_parallel.csv"), det_par)
    if cfg.run.plot_script:
        _plot_script(manifest.add("plot_hom.py"), _HOM_PLOT)

    budget = _budget(cfg, t2)
    coal = coalescence_probability(cfg.run.temperature, cfg.molecule, _policy(cfg))
    g_perp_fit, g_par_fit = fit_perp.value(0.0), fit_par.value(0.0)
    summary = {
        "scenario": "hom",
        "seed": cfg.run.seed,
        "temperature_K": cfg.run.temperature,
        "t2_ns": t2,
        "photons": _photon_counts(stream),
        "clipped_routing": {"orthogonal": det_perp.clipped, "parallel": det_par.clipped},
        "g_orthogonal_0": {"fit": g_perp_fit, "bin": h_perp.value_at(0.0),
                           "model": _g_model(cfg, t2, 0.0, False)},
        "g_orthogonal_minus_delay": {"fit": fit_perp.value(-delay), "bin": h_perp.value_at(-delay),
                                     "model": _g_model(cfg, t2, -delay, False)},
        "g_orthogonal_plus_delay": {"fit": fit_perp.value(delay), "bin": h_perp.value_at(delay),
                                    "model": _g_model(cfg, t2, delay, False)},
        "g_parallel_0": {"fit": g_par_fit, "bin": h_par.value_at(0.0),
                         "model": _g_model(cfg, t2, 0.0, True)},
        "contrast_0": {"peak": peak_c, "peak_tau_ns": peak_tau,
                       "from_fits": (g_perp_fit - g_par_fit) / g_perp_fit,
                       "model": contrast(0.0, budget.total, _policy(cfg), cfg.molecule, t2)},
        "contrast_decay": {
            "decay_ns": decay.decay if decay else None,
            "decay_err_ns": decay.decay_err if decay else None,
            "fit_range_ns": [lo, hi],
            "expected_ns": 0.5 * t2,
        },
        "coalescence": {"estimated": corr.coalescence_from_areas(fit_ref, fit_perp),
                        "theory": coal.theory, "predicted": coal.predicted},
        "visibility_budget": budget.as_dict(),
        "fit_reduced_chi2": {"orthogonal": fit_perp.reduced_chi2, "parallel": fit_par.reduced_chi2,
                             "parallel_referenced": fit_ref.reduced_chi2},
    }
    _write_json(manifest.add("summary.json"), summary)
    return summary


def run_temperature_sweep(cfg: ExperimentConfig, manifest: Manifest) -> dict:
    temps = [float(t) for t in cfg.sweep.temperatures]
    delay = cfg.bench.delay
    stream = _stream(cfg)
    seed = route_seed(cfg.run.seed)
    policy = _policy(cfg)
    # The orthogonal configuration never interferes, so one run serves all T.
    det_perp = propagate(stream, _bench(cfg, max(t2_at(t, cfg.molecule) for t in temps), False),
                         seed, cfg.bench.pairing)
    h_perp = _histogram(cfg, det_perp)
    fit_perp = corr.fit_three_dips(h_perp, delay)
    rows, fits = [], {}
    for temp in temps:
        t2 = t2_at(temp, cfg.molecule)
        det = propagate(stream, _bench(cfg, t2, True), seed, cfg.bench.pairing)
        fit = corr.fit_three_dips(_histogram(cfg, det), delay, reference=fit_perp)
        coal = coalescence_probability(temp, cfg.molecule, policy)
        est = corr.coalescence_from_areas(fit, fit_perp)
        rows.append((temp, zpl_linewidth(temp, cfg.molecule), t2, coal.theory, coal.predicted, est))
        fits[f"{temp:g}"] = fit.to_dict()

    grid = np.linspace(min(temps), max(temps), 61)
    curve = [(t, t2_at(t, cfg.molecule), t2_at(t, cfg.molecule) / (2.0 * cfg.molecule.t1))
             for t in grid]
    _write_csv(manifest.add("sweep.csv"),
               "temperature_K,linewidth_MHz,t2_ns,theory,predicted,estimated", rows)
    _write_csv(manifest.add("analytic_curve.csv"), "temperature_K,t2_ns,theory", curve)
    h_perp.to_csv(manifest.add("histogram_orthogonal.csv"))
    fit_perp.to_json(manifest.add("fit_orthogonal.json"))
    _write_json(manifest.add("fits_parallel.json"), fits)
    if cfg.run.plot_script:
        _plot_script(manifest.add("plot_sweep.py"), _SWEEP_PLOT)

    est = np.array([r[5] for r in rows])
    theory = np.array([r[3] for r in rows])
    predicted = np.array([r[4] for r in rows])
    summary = {
        "scenario": "temperature_sweep",
        "seed": cfg.run.seed,
        "temperatures_K": temps,
        "estimated": est.tolist(),
        "theory": theory.tolist(),
        "predicted": predicted.tolist(),
        "ratio_last_first": {"estimated": est[-1] / est[0], "theory": theory[-1] / theory[0]},
        "monotone_decreasing": bool(np.all(np.diff(est) < 0)),
        "max_rel_dev_from_theory": float(np.max(np.abs(est / theory - 1.0))),
        "max_rel_dev_from_predicted": float(np.max(np.abs(est / predicted - 1.0))),
        "photons": _photon_counts(stream),
    }
    _write_json(manifest.add("summary.json"), summary)
    return summary


def _load_rho(path: str | None) -> np.ndarray:
    rho = ent.reference_rho() if path is None else ent.rho_from_json(path)
    return ent.check_density_matrix(rho, ent.REFERENCE_PSD_TOL)


def run_tomography(cfg: ExperimentConfig, manifest: Manifest) -> dict:
    tomo = cfg.tomo
    if tomo.rho_file is not None:
        truth = _load_rho(tomo.rho_file)
        source = {"rho_file": str(tomo.rho_file)}
    else:
        truth = ent.post_selected_state(tomo.visibility).rho
        source = {"visibility": tomo.visibility}
    settings = tomo.settings or ent.DEFAULT_SETTINGS
    data = ent.simulate_tomography(truth, settings, tomo.pair_count, tomo.background_level,
                                   seed=cfg.run.seed, psd_tol=ent.REFERENCE_PSD_TOL)
    result = ent.mle_reconstruct(data, restarts=tomo.restarts, seed=cfg.run.seed)
    data.to_csv(manifest.add("dataset.csv"))
    ent.rho_to_json(truth, manifest.add("rho_true.json"))
    ent.rho_to_json(result.rho, manifest.add("rho_reconstructed.json"))
    p_rec, p_true = ent.peres_min_eigenvalue(result.rho), ent.peres_min_eigenvalue(truth)
    summary = {
        "scenario": "tomography",
        "seed": cfg.run.seed,
        "source": source,
        "pair_count": tomo.pair_count,
        "background_level": tomo.background_level,
        "fidelity": ent.fidelity(result.rho, truth, ent.REFERENCE_PSD_TOL),
        "log_likelihood": result.log_likelihood,
        "converged": result.converged,
        "best_restart": result.best_restart,
        "peres_reconstructed": {"lambda_min": p_rec.lambda_min, "normalized": p_rec.normalized},
        "peres_true": {"lambda_min": p_true.lambda_min, "normalized": p_true.normalized},
    }
    _write_json(manifest.add("summary.json"), summary)
    return summary


def run_fit(cfg: ExperimentConfig, manifest: Manifest) -> dict:
    delay = cfg.fit.delay or cfg.bench.delay
    norm = (cfg.run.norm_min, cfg.run.norm_max)
    hist = corr.CoincidenceHistogram.from_csv(cfg.fit.histogram, norm)
    fit = corr.fit_three_dips(hist, delay)
    fit.to_json(manifest.add("fit.json"))
    summary = {"scenario": "fit", "histogram": str(cfg.fit.histogram),
               "g_0": {"fit": fit.value(0.0), "bin": hist.value_at(0.0)},
               "g_minus_delay": fit.value(-delay), "g_plus_delay": fit.value(delay),
               "reduced_chi2": fit.reduced_chi2}
    if cfg.fit.reference_histogram is not None:
        ref = corr.CoincidenceHistogram.from_csv(cfg.fit.reference_histogram, norm)
        fit_ref = corr.fit_three_dips(ref, delay)
        fit_joint = corr.fit_three_dips(hist, delay, reference=fit_ref)
        cc = corr.contrast_curve(hist, ref)
        fit_ref.to_json(manifest.add("fit_reference.json"))
        fit_joint.to_json(manifest.add("fit_referenced.json"))
        cc.to_csv(manifest.add("contrast.csv"))
        peak_tau, peak_c = cc.peak()
        summary.update({
            "reference_histogram": str(cfg.fit.reference_histogram),
            "reference_g_0": {"fit": fit_ref.value(0.0), "bin": ref.value_at(0.0)},
            "contrast_0": {"peak": peak_c, "peak_tau_ns": peak_tau},
            "coalescence": corr.coalescence_from_areas(fit_joint, fit_ref),
        })
    _write_json(manifest.add("summary.json"), summary)
    return summary


def run_peres(cfg: ExperimentConfig, manifest: Manifest) -> dict:
    rho = _load_rho(cfg.peres.rho_file)
    value = ent.peres_min_eigenvalue(rho)
    summary = {
        "scenario": "peres",
        "rho_file": cfg.peres.rho_file or "bundled reference",
        "lambda_min": value.lambda_min,
        "normalized": value.normalized,
        "partial_transpose_eigenvalues": np.linalg.eigvalsh(ent.partial_transpose(rho)).tolist(),
        "rho_eigenvalues": np.linalg.eigvalsh(rho).tolist(),
        "entangled": value.lambda_min < 0,
    }
    _write_json(manifest.add("peres.json"), summary)
    return summary


RUNNERS = {
    "hom": run_hom,
    "temperature_sweep": run_temperature_sweep,
    "tomography": run_tomography,
    "fit": run_fit,
    "peres": run_peres,
}


class ScenarioError(RuntimeError):
    pass


def run_scenario(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Manifest:
    """Run `cfg.scenario`, writing into `out_dir` (else cfg.output, else ./molhom-out)."""
    directory = Path(out_dir or cfg.output or "molhom-out")
    directory.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(directory)
    try:
        RUNNERS[cfg.scenario](cfg, manifest)
    except (corr.FitError, ent.ReconstructionError, ValueError, OSError) as exc:
        raise ScenarioError(f"scenario {cfg.scenario} failed: {exc}") from exc
    manifest.write()
    return manifest


# -- optional plotting scripts -------------------------------------------------

def _plot_script(path: Path, body: str) -> None:
    path.write_text(body)


_HOM_PLOT = '''\
"""Plot the HOM run outputs in this directory (needs matplotlib)."""
import csv
import matplotlib.pyplot as plt


def column(name, key):
    with open(name) as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["tau_ns"]) for r in rows if r[key]], [float(r[key]) for r in rows if r[key]]


fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
for name, label in (("histogram_orthogonal.csv", "orthogonal"), ("histogram_parallel.csv", "parallel")):
    top.plot(*column(name, "g2"), drawstyle="steps-mid", label=label)
top.set_ylabel("g34")
top.legend()
bottom.plot(*column("contrast.csv", "contrast"), drawstyle="steps-mid")
bottom.set_xlabel("tau (ns)")
bottom.set_ylabel("contrast")
fig.savefig("hom.png", dpi=150)
'''

_SWEEP_PLOT = '''\
"""Plot the temperature sweep outputs in this directory (needs matplotlib)."""
import csv
import matplotlib.pyplot as plt

with open("sweep.csv") as fh:
    rows = list(csv.DictReader(fh))
with open("analytic_curve.csv") as fh:
    curve = list(csv.DictReader(fh))
plt.plot([float(r["temperature_K"]) for r in curve], [float(r["theory"]) for r in curve], label="T2/(2 T1)")
plt.plot([float(r["temperature_K"]) for r in rows], [float(r["estimated"]) for r in rows], "o", label="estimated")
plt.xlabel("temperature (K)")
plt.ylabel("coalescence probability")
plt.legend()
plt.savefig("sweep.png", dpi=150)
'''
