import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from molhom import correlator as corr
from molhom.correlator import (
    CoincidenceHistogram,
    ContrastCurve,
    DipComponent,
    DipFit,
    FitError,
    background_correct_g2,
    bin_centres,
    build_histogram,
    coalescence_from_areas,
    contrast_curve,
    dip_area,
    fit_contrast_decay,
    fit_dips,
    fit_three_dips,
    normalize,
)
from molhom.model import InvalidParameterError, MoleculeParams, t2_at
from molhom.optics import BenchConfig, propagate
from molhom.source import StreamConfig, sample_stream

W = 760.0
TRUE = dict(baseline=1.0, comps=[(-40.0, 0.25, 2.35), (0.0, 0.5, 2.35), (40.0, 0.25, 2.35)])


def point_curve(tau, baseline, comps):
    out = np.full(np.shape(tau), baseline, dtype=float)
    for center, depth, rise in comps:
        out -= depth * np.exp(-np.abs(np.asarray(tau) - center) / rise)
    return out


def bin_average(f, tau, w):
    return np.array([quad(f, t - w / 2, t + w / 2, points=[0.0, 40.0, -40.0])[0] / w for t in tau])


def synthetic(scale, baseline=1.0, comps=TRUE["comps"], seed=None, w_ps=W, window=100.0):
    tau = bin_centres(w_ps * 1e-3, window)
    mean = scale * bin_average(lambda x: point_curve(x, baseline, comps), tau, w_ps * 1e-3)
    counts = mean if seed is None else np.random.default_rng(seed).poisson(mean).astype(float)
    return normalize(CoincidenceHistogram(w_ps, window, tau, counts))


# -- histogram ------------------------------------------------------------------

def test_bin_layout():
    tau = bin_centres(0.76, 100.0)
    assert len(tau) == 263 and tau[131] == 0.0
    assert tau[-1] + 0.38 <= 100.0


def test_single_pair_lands_in_its_bin():
    h = build_histogram([0.0], [10.0], W, 100.0)
    assert h.counts.sum() == 1
    assert h.tau[np.argmax(h.counts)] == pytest.approx(10.0, abs=0.38)


def test_swapping_detectors_mirrors():
    rng = np.random.default_rng(0)
    a = np.sort(rng.uniform(0, 1e5, 2000))
    b = np.sort(rng.uniform(0, 1e5, 2000))
    h1 = build_histogram(a, b, W, 100.0)
    h2 = build_histogram(b, a, W, 100.0)
    assert np.array_equal(h1.counts, h2.counts[::-1])


def test_small_chunks_give_same_histogram():
    rng = np.random.default_rng(1)
    a = np.sort(rng.uniform(0, 1e5, 3000))
    b = np.sort(rng.uniform(0, 1e5, 3000))
    assert np.array_equal(build_histogram(a, b, W, 100.0).counts,
                          build_histogram(a, b, W, 100.0, chunk=7).counts)


def test_all_pairs_matches_brute_force():
    rng = np.random.default_rng(2)
    a = np.sort(rng.uniform(0, 2000, 300))
    b = np.sort(rng.uniform(0, 2000, 300))
    h = build_histogram(a, b, W, 20.0)
    d = (b[None, :] - a[:, None]).ravel()
    edge = h.tau[-1] + h.binwidth / 2
    expected, _ = np.histogram(d, bins=np.append(h.tau - h.binwidth / 2, edge))
    assert np.array_equal(h.counts, expected)


def test_uncorrelated_streams_flat_baseline():
    rng = np.random.default_rng(3)
    duration = 1e7
    a = np.sort(rng.uniform(0, duration, 10_000))
    b = np.sort(rng.uniform(0, duration, 10_000))
    h = build_histogram(a, b, W, 100.0)
    expected = len(a) * len(b) * h.binwidth / duration
    se = math.sqrt(expected / len(h.counts))
    assert abs(h.counts.mean() - expected) < 3 * se


def test_histogram_sum_requires_same_binning():
    h = build_histogram([0.0], [1.0], W, 100.0)
    assert (h + h).counts.sum() == 2
    with pytest.raises(ValueError, match="binning"):
        h + build_histogram([0.0], [1.0], 500.0, 100.0)


def test_build_histogram_rejects_bad_binwidth():
    with pytest.raises(InvalidParameterError):
        build_histogram([0.0], [1.0], 0.0, 100.0)


# -- normalization --------------------------------------------------------------

def test_flat_histogram_normalizes_to_one():
    tau = bin_centres(0.76, 100.0)
    h = normalize(CoincidenceHistogram(W, 100.0, tau, np.full(len(tau), 50)))
    assert np.all(h.values == 1.0)


def test_normalization_keeps_counts():
    h = synthetic(1e4, seed=1)
    raw = CoincidenceHistogram(h.binwidth_ps, h.window, h.tau, h.counts.copy())
    n = normalize(raw)
    assert np.array_equal(n.counts, raw.counts) and n.counts.sum() == raw.counts.sum()


def test_normalization_range_inside_dip_rejected():
    tau = bin_centres(0.1, 100.0)
    counts = 1e4 * point_curve(tau, 1.0, [(0.0, 0.5, 2.35)])
    with pytest.raises(InvalidParameterError, match="dip"):
        normalize(CoincidenceHistogram(100.0, 100.0, tau, counts), (0.0, 2.0))
    with pytest.raises(InvalidParameterError, match="bins"):
        normalize(CoincidenceHistogram(100.0, 100.0, tau, counts), (0.0, 0.5))
    with pytest.raises(InvalidParameterError):
        normalize(CoincidenceHistogram(W, 100.0, bin_centres(0.76, 100.0), np.zeros(263)))


def test_unnormalized_values_raise():
    with pytest.raises(ValueError):
        build_histogram([0.0], [1.0], W, 100.0).values


def test_simulated_orthogonal_plateau_and_lateral_dips():
    p = MoleculeParams()
    s = sample_stream(StreamConfig(duration=0.01, seed=4))
    det = propagate(s, BenchConfig.orthogonal(t2_at(2.0, p)), seed=5)
    h = normalize(build_histogram(det.d3, det.d4, W, 100.0))
    plateau = h.values[np.abs(h.tau) >= 60]
    assert plateau.mean() == pytest.approx(1.0, abs=0.02)
    for side in (-40.0, 40.0):
        assert h.value_at(side) < 0.9


# -- dip fits ---------------------------------------------------------------------

def test_noiseless_fit_recovers_parameters():
    h = synthetic(1e8)
    fit = fit_three_dips(h, 40.0)
    # the plateau mean sits a few 1e-6 below the true baseline (lateral dip tails)
    unit = 1e8 / h.baseline
    assert fit.baseline == pytest.approx(unit, rel=1e-6)
    for center, depth, rise in TRUE["comps"]:
        (c,) = fit.at(center)
        assert c.depth == pytest.approx(depth * unit, rel=1e-6)
        assert c.rise == pytest.approx(rise, rel=1e-6)
    assert fit.converged


def test_fit_error_shrinks_with_noise():
    errs = []
    for scale in (1e3, 1e5, 1e7):
        fit = fit_three_dips(synthetic(scale, seed=7), 40.0)
        errs.append(abs(fit.value(0.0) - 0.5) + abs(fit.at(0.0)[0].rise - 2.35) / 2.35)
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 2e-3


def test_biexponential_fit_with_reference():
    comps = [(-40.0, 0.25, 2.35), (0.0, 0.5, 2.35), (0.0, 0.35, 4.6), (40.0, 0.25, 2.35)]
    par = synthetic(1e8, comps=comps)
    perp = fit_three_dips(synthetic(1e8), 40.0)
    fit = fit_three_dips(par, 40.0, reference=perp)
    assert dip_area(fit, 0.0) == pytest.approx(2 * 0.5 * 2.35 + 2 * 0.35 * 4.6, rel=1e-5)
    assert coalescence_from_areas(fit, perp) == pytest.approx(0.35 * 4.6 / (0.5 * 2.35), rel=1e-5)
    assert [c.fixed for c in fit.at(0.0)] == [True, False]


def test_reported_dip_values_and_errors():
    fit = fit_three_dips(synthetic(1e5, seed=3), 40.0)
    assert fit.value(0.0) == pytest.approx(fit.baseline - fit.at(0.0)[0].depth)
    assert all(c.depth_err > 0 and c.rise_err > 0 for c in fit.components)
    assert fit.reduced_chi2 == pytest.approx(1.0, abs=0.3)


def test_fit_failure_carries_best(monkeypatch):
    real = corr.least_squares

    def failing(*args, **kwargs):
        res = real(*args, **kwargs)
        return SimpleNamespace(x=res.x, cost=res.cost, jac=res.jac, success=False, message="forced")

    monkeypatch.setattr(corr, "least_squares", failing)
    with pytest.raises(FitError) as info:
        fit_three_dips(synthetic(1e6), 40.0, restarts=2)
    assert info.value.best is not None and info.value.best.restarts == 2
    assert not info.value.best.converged


def test_fit_needs_normalized_histogram():
    with pytest.raises(ValueError):
        fit_dips(build_histogram([0.0], [1.0], W, 100.0), [0.0])


# -- areas ----------------------------------------------------------------------

def test_dip_area_arithmetic():
    fit = DipFit(1.0, [DipComponent(0.0, 0.0, 2.0), DipComponent(40.0, 0.5, 2.0)])
    assert dip_area(fit, 0.0) == 0.0
    assert dip_area(fit, 40.0) == pytest.approx(2.0)


def test_dip_area_quadrature_oracle():
    fit = DipFit(1.0, [DipComponent(0.0, 0.6, 2.35)])
    missing = quad(lambda x: fit.baseline - float(fit.curve(x)), -100, 100, points=[0.0])[0]
    assert dip_area(fit, 0.0) == pytest.approx(missing, rel=1e-3)


def test_coalescence_from_areas():
    a = DipFit(1.0, [DipComponent(0.0, 0.5, 2.0)])
    assert coalescence_from_areas(a, a) == 0.0
    with pytest.raises(InvalidParameterError):
        coalescence_from_areas(a, DipFit(1.0, [DipComponent(0.0, 0.0, 2.0)]))


def test_coalescence_invariant_under_common_rescaling():
    comps = [(-40.0, 0.25, 2.35), (0.0, 0.5, 2.35), (0.0, 0.3, 4.0), (40.0, 0.25, 2.35)]
    out = []
    for k in (1.0, 37.0):
        perp = fit_three_dips(synthetic(1e7 * k), 40.0)
        par = fit_three_dips(synthetic(1e7 * k, comps=comps), 40.0, reference=perp)
        out.append(coalescence_from_areas(par, perp))
    assert out[0] == pytest.approx(out[1], rel=1e-6)


# -- contrast ---------------------------------------------------------------------

def test_contrast_of_identical_histograms_is_zero():
    h = synthetic(1e4, seed=2)
    c = contrast_curve(h, h)
    assert np.all(c.contrast[np.isfinite(c.contrast)] == 0.0)


def test_contrast_masks_and_checks_binning():
    tau = bin_centres(0.76, 100.0)
    perp = normalize(CoincidenceHistogram(W, 100.0, tau, np.where(np.abs(tau) < 1, 1.0, 100.0)))
    c = contrast_curve(perp, perp)
    assert np.all(np.isnan(c.contrast[np.abs(tau) < 1]))
    other = synthetic(1e4, w_ps=500.0)
    with pytest.raises(ValueError):
        contrast_curve(other, perp)


def test_contrast_peak_and_decay_fit():
    tau = bin_centres(0.76, 100.0)
    c = 0.6 * np.exp(-np.abs(tau) / 4.6)
    curve = ContrastCurve(tau, c, np.full(len(tau), 1e-3))
    assert curve.peak() == (0.0, pytest.approx(0.6))
    fit = fit_contrast_decay(curve, 5.0, 25.0)
    assert fit.decay == pytest.approx(4.6, rel=1e-8)


# -- background correction ------------------------------------------------------------

def test_background_correction_examples():
    g, clipped = background_correct_g2(0.1736, 10 / 11)
    assert g == pytest.approx(0.0, abs=2e-4)
    assert background_correct_g2(0.4, 1.0) == (pytest.approx(0.4), False)
    g, clipped = background_correct_g2(0.05, 10 / 11)
    assert g == 0.0 and clipped
    with pytest.raises(InvalidParameterError):
        background_correct_g2(0.2, 0.0)


def test_background_correction_round_trip():
    rng = np.random.default_rng(0)
    g = rng.uniform(0, 1, 100)
    rho = 0.83
    mixed = 1 - rho**2 * (1 - g)
    back, clipped = background_correct_g2(mixed, rho)
    assert np.allclose(back, g, atol=1e-12) and not clipped.any()


@given(st.floats(0.0, 1.0), st.floats(0.05, 1.0))
def test_background_correction_inverse_property(g, rho):
    back, _ = background_correct_g2(1 - rho**2 * (1 - g), rho)
    assert back == pytest.approx(g, abs=1e-9)


# -- files ----------------------------------------------------------------------

def test_histogram_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    h = normalize(CoincidenceHistogram(W, 100.0, bin_centres(0.76, 100.0),
                                       rng.poisson(100, 263)))
    path = tmp_path / "h.csv"
    h.to_csv(path)
    assert path.read_text().splitlines()[0] == "tau_ns,counts,g2"
    back = CoincidenceHistogram.from_csv(path, (60.0, 100.0))
    assert back.binwidth_ps == W and np.array_equal(back.counts, h.counts)
    assert np.allclose(back.tau, h.tau) and back.baseline == h.baseline


def test_fit_json_round_trip(tmp_path):
    fit = fit_three_dips(synthetic(1e5, seed=3), 40.0)
    path = tmp_path / "fit.json"
    fit.to_json(path)
    import json
    data = json.loads(path.read_text())
    assert {"baseline", "dips", "chi2"} <= set(data)
    assert {"center_ns", "depth", "rise_ns", "stderr"} <= set(data["dips"][0])
    back = DipFit.from_dict(data)
    assert back.value(0.0) == pytest.approx(fit.value(0.0), rel=1e-8)


def test_contrast_csv(tmp_path):
    tau = np.array([-1.0, 0.0, 1.0])
    ContrastCurve(tau, np.array([np.nan, 0.5, 0.25]), np.ones(3)).to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["tau_ns,contrast", "-1,", "0,0.5", "1,0.25"]


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 0.9), st.floats(0.8, 6.0))
def test_single_dip_recovery_property(depth, rise):
    h = synthetic(1e9, comps=[(0.0, depth, rise)])
    (c,) = fit_dips(h, [0.0]).components
    assert c.depth == pytest.approx(depth, rel=1e-5)
    assert c.rise == pytest.approx(rise, rel=1e-5)
