import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molhom import entanglement as ent
from molhom.entanglement import (
    BASIS,
    DEFAULT_SETTINGS,
    PSI_MINUS,
    REFERENCE_PSD_TOL,
    ReconstructionError,
    StateError,
    TomographyDataset,
    check_density_matrix,
    fidelity,
    mle_reconstruct,
    partial_transpose,
    peres_min_eigenvalue,
    post_selected_state,
    predict_probabilities,
    projector,
    reference_rho,
    rho_from_json,
    rho_from_params,
    rho_to_json,
    simulate_tomography,
    single_state,
)
from molhom.model import InvalidParameterError


def jacobi_eigenvalues(h, tol=1e-14, sweeps=100):
    """Cyclic Jacobi on the real 2n x 2n embedding of a Hermitian matrix."""
    h = np.asarray(h, dtype=complex)
    n = len(h)
    a = np.block([[h.real, -h.imag], [h.imag, h.real]])
    m = 2 * n
    for _ in range(sweeps):
        off = math.sqrt(sum(a[p, q] ** 2 for p in range(m) for q in range(m) if p != q))
        if off < tol:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(m)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    lam = np.sort(np.diag(a))
    return lam[::2]  # every eigenvalue appears twice


def random_rho(rng, rank=4):
    g = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    r = g @ g.conj().T
    return r / np.trace(r).real


def bell(v):
    return post_selected_state(v).rho


def noiseless(rho, psd_tol=ent.PSD_TOL):
    p = np.clip(predict_probabilities(rho, DEFAULT_SETTINGS, psd_tol), 0, None)
    return TomographyDataset(list(DEFAULT_SETTINGS), p, np.full(16, 1e-3))


# -- states and projectors ---------------------------------------------------------

def test_post_selected_state():
    ideal, prob = post_selected_state(1.0)
    assert prob == 0.5
    assert np.allclose(ideal, np.outer(PSI_MINUS, PSI_MINUS.conj()), atol=1e-15)
    r = bell(0.5)
    assert r[1, 2] == r[2, 1] == -0.25
    assert peres_min_eigenvalue(bell(0.0)).lambda_min == pytest.approx(0.0, abs=1e-15)
    for v in (-0.1, 1.1):
        with pytest.raises(InvalidParameterError):
            post_selected_state(v)


def test_projectors():
    assert np.allclose(projector(("H", "V")), np.eye(4)[BASIS.index("HV")])
    assert np.allclose(projector(("D", "D")), np.full(4, 0.5))
    rl = projector(("R", "L"))
    assert np.linalg.norm(rl) == pytest.approx(1.0)
    assert abs(np.vdot(rl, PSI_MINUS)) ** 2 == pytest.approx(0.5)
    with pytest.raises(InvalidParameterError):
        single_state("X")


def test_explicit_triple_matches_label():
    # QWP at 45, HWP at 22.5, polarizer at 0 analyzes D
    state = single_state((math.pi / 4, math.pi / 8, 0.0))
    assert abs(abs(np.vdot(state, single_state("D"))) - 1) < 1e-12


def test_predict_probabilities_examples():
    psi = bell(1.0)
    p = dict(zip(DEFAULT_SETTINGS, predict_probabilities(psi)))
    assert p[("H", "V")] == pytest.approx(0.5)
    assert p[("H", "H")] == pytest.approx(0.0, abs=1e-15)
    assert p[("D", "D")] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(predict_probabilities(np.eye(4) / 4), 0.25)
    assert predict_probabilities(bell(0.5), [("D", "A")])[0] == pytest.approx(0.375)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_probabilities_bounded_and_hv_subset_sums_to_one(seed):
    rho = random_rho(np.random.default_rng(seed))
    p = dict(zip(DEFAULT_SETTINGS, predict_probabilities(rho)))
    assert all(-1e-12 <= v <= 1 + 1e-12 for v in p.values())
    assert sum(p[(a, b)] for a in "HV" for b in "HV") == pytest.approx(1.0, abs=1e-12)


def test_invalid_density_matrices():
    with pytest.raises(StateError, match="negative"):
        predict_probabilities(np.diag([1.2, -0.2, 0, 0]))
    with pytest.raises(StateError, match="Hermitian"):
        check_density_matrix(np.triu(np.ones((4, 4))) / 4)
    with pytest.raises(StateError, match="trace"):
        check_density_matrix(np.eye(4) / 2)
    with pytest.raises(StateError, match="shape"):
        check_density_matrix(np.eye(2) / 2)


# -- simulated data ---------------------------------------------------------------------

def test_simulated_data_converges_to_probabilities():
    n = 1e6
    data = simulate_tomography(bell(0.5), pair_count=n, seed=1)
    p = predict_probabilities(bell(0.5))
    sigma = np.sqrt(np.maximum(p, 1 / n) / n)
    assert np.all(np.abs(data.values - p) < 3 * sigma)


def test_background_subtraction_is_unbiased():
    n, bg = 1e5, 2e4
    p = predict_probabilities(bell(0.8))
    runs = np.array([simulate_tomography(bell(0.8), pair_count=n, background_level=bg,
                                         seed=s).values for s in range(40)])
    sigma = np.sqrt((n * p + bg) / 40) / n
    sel = p > 0.05  # clipping at 0 biases only the near-empty settings
    assert np.all(np.abs(runs.mean(axis=0)[sel] - p[sel]) < 3 * sigma[sel])


def test_simulation_is_reproducible():
    a = simulate_tomography(bell(0.5), seed=9)
    b = simulate_tomography(bell(0.5), seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.background_subtracted


def test_simulation_validation():
    with pytest.raises(InvalidParameterError):
        simulate_tomography(bell(0.5), pair_count=0)
    with pytest.raises(InvalidParameterError):
        simulate_tomography(bell(0.5), background_level=-1)
    with pytest.raises(InvalidParameterError):
        TomographyDataset(list(DEFAULT_SETTINGS[:15]), np.ones(15), np.ones(15))
    with pytest.raises(InvalidParameterError):
        TomographyDataset(list(DEFAULT_SETTINGS), -np.ones(16), np.ones(16))


def test_dataset_csv_round_trip(tmp_path):
    settings_ = list(DEFAULT_SETTINGS)
    settings_[0] = ((0.1, 0.2, 0.3), "H")
    data = TomographyDataset(settings_, np.linspace(0, 1, 16), np.full(16, 0.01))
    path = tmp_path / "d.csv"
    data.to_csv(path)
    assert path.read_text().startswith("setting_a,setting_b,value,uncertainty\n")
    back = TomographyDataset.from_csv(path)
    assert back.settings == settings_
    assert np.allclose(back.values, data.values)


# -- reconstruction ---------------------------------------------------------------------

def test_mle_on_ideal_state():
    res = mle_reconstruct(noiseless(bell(1.0)))
    assert res.converged
    assert fidelity(res.rho, bell(1.0)) > 0.999


def test_mle_random_states():
    rng = np.random.default_rng(17)
    for _ in range(10):
        rho = random_rho(rng)
        assert fidelity(mle_reconstruct(noiseless(rho)).rho, rho) > 0.995


def test_mle_reference_matrix_elements():
    ref = reference_rho()
    rho = mle_reconstruct(noiseless(ref, REFERENCE_PSD_TOL)).rho
    assert np.max(np.abs(rho - ref)) < 0.02


def test_born_rule_consistency():
    rho = random_rho(np.random.default_rng(3), rank=2)
    data = noiseless(rho)
    rec = mle_reconstruct(data).rho
    assert np.max(np.abs(predict_probabilities(rec) - data.values)) < 1e-6


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
@settings(max_examples=15, deadline=None)
def test_mle_output_is_always_physical(seed, v):
    data = simulate_tomography(bell(v), pair_count=200, background_level=20, seed=seed)
    if data.values.sum() == 0:
        return
    rho = mle_reconstruct(data, restarts=2, seed=seed).rho
    check_density_matrix(rho)
    lam = np.linalg.eigvalsh(rho)
    assert lam.min() > -1e-12


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    data = simulate_tomography(bell(0.6), pair_count=1e3, seed=2)
    vecs = np.array([projector(s) for s in data.settings])
    projs = np.einsum("ki,kj->kij", vecs, vecs.conj())
    args = (vecs, projs, projs.sum(axis=0), data.values / data.values.sum())
    x = rng.normal(size=16)
    f, g = ent._objective(x, *args)
    h = 1e-6
    fd = np.array([(ent._objective(x + h * e, *args)[0] - ent._objective(x - h * e, *args)[0])
                   / (2 * h) for e in np.eye(16)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_parametrization_round_trip():
    rho = random_rho(np.random.default_rng(6))
    assert np.allclose(rho_from_params(ent.params_from_rho(rho)), rho, atol=1e-12)


def test_incomplete_settings_rejected():
    settings_ = [("H", "H")] * 16
    data = TomographyDataset(settings_, np.full(16, 0.1), np.full(16, 0.01))
    with pytest.raises(InvalidParameterError, match="informationally complete"):
        mle_reconstruct(data)


def test_non_convergence_raises_with_best(monkeypatch):
    real = ent.minimize

    def failing(*args, **kwargs):
        r = real(*args, **kwargs)
        return SimpleNamespace(x=r.x, fun=r.fun, jac=np.ones_like(r.x), success=False,
                               message="forced")

    monkeypatch.setattr(ent, "minimize", failing)
    with pytest.raises(ReconstructionError) as info:
        mle_reconstruct(noiseless(bell(0.5)))
    assert info.value.best is not None
    check_density_matrix(info.value.best.rho)


def test_stalled_line_search_at_optimum_counts_as_converged(monkeypatch):
    real = ent.minimize

    def stalled(*args, **kwargs):
        r = real(*args, **kwargs)
        return SimpleNamespace(x=r.x, fun=r.fun, jac=r.jac, success=False, message="ABNORMAL")

    monkeypatch.setattr(ent, "minimize", stalled)
    res = mle_reconstruct(noiseless(bell(0.5)))
    assert res.converged and fidelity(res.rho, bell(0.5)) > 0.999


def test_mle_deterministic():
    data = simulate_tomography(bell(0.5), seed=3)
    a, b = mle_reconstruct(data, seed=1), mle_reconstruct(data, seed=1)
    assert a.rho.tobytes() == b.rho.tobytes() and a.best_restart == b.best_restart


# -- Peres criterion ----------------------------------------------------------------

def test_peres_fixtures():
    p = peres_min_eigenvalue(np.outer(PSI_MINUS, PSI_MINUS.conj()))
    assert p.lambda_min == pytest.approx(-0.5, abs=1e-10)
    assert p.normalized == pytest.approx(-1.0, abs=1e-10)
    hh = np.zeros((4, 4))
    hh[0, 0] = 1
    assert peres_min_eigenvalue(hh).lambda_min == pytest.approx(0.0, abs=1e-15)
    lam = peres_min_eigenvalue(reference_rho()).lambda_min
    assert -0.27 <= lam <= -0.20


@pytest.mark.parametrize("v", np.linspace(0, 1, 21))
def test_peres_post_selected_family(v):
    lam = peres_min_eigenvalue(bell(v)).lambda_min
    assert lam == pytest.approx(-v / 2, abs=1e-9) if v > 0 else abs(lam) < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_peres_matches_jacobi_oracle(seed):
    rng = np.random.default_rng(seed)
    rho = random_rho(rng, rank=int(rng.integers(1, 5)))
    oracle = jacobi_eigenvalues(partial_transpose(rho))
    assert peres_min_eigenvalue(rho).lambda_min == pytest.approx(oracle[0], abs=1e-10)


def test_partial_transpose_over_second_photon():
    rho = random_rho(np.random.default_rng(8)).reshape(2, 2, 2, 2)
    pt = partial_transpose(rho.reshape(4, 4)).reshape(2, 2, 2, 2)
    for i, j, k, l in np.ndindex(2, 2, 2, 2):
        assert pt[i, j, k, l] == rho[i, l, k, j]
    full_t = partial_transpose(rho.reshape(4, 4)).T
    first_pt = rho.transpose(2, 1, 0, 3).reshape(4, 4)
    assert np.allclose(np.linalg.eigvalsh(full_t), np.linalg.eigvalsh(first_pt))


def test_peres_rejects_non_hermitian():
    with pytest.raises(StateError):
        peres_min_eigenvalue(np.triu(np.ones((4, 4))))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_eigendecomposition_contract(seed):
    rho = random_rho(np.random.default_rng(seed))
    lam, vec = np.linalg.eigh(rho)
    assert lam.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.max(np.abs(rho - (vec * lam) @ vec.conj().T)) < 1e-9
    assert np.allclose(lam, jacobi_eigenvalues(rho), atol=1e-10)


# -- fidelity -------------------------------------------------------------------------

def test_fidelity_examples():
    hh, vv = np.zeros((4, 4)), np.zeros((4, 4))
    hh[0, 0] = vv[3, 3] = 1
    rho = bell(0.7)
    assert fidelity(rho, rho) == pytest.approx(1.0, abs=1e-7)
    assert fidelity(hh, vv) == pytest.approx(0.0, abs=1e-12)
    # pure vs maximally mixed: sqrt(<psi|I/4|psi>) = 1/2
    assert fidelity(bell(1.0), np.eye(4) / 4) == pytest.approx(0.5, abs=1e-7)
    with pytest.raises(StateError):
        fidelity(np.eye(4), rho)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_fidelity_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_rho(rng), random_rho(rng)
    f = fidelity(a, b)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(fidelity(b, a), abs=1e-7)


def test_pure_state_fidelity_oracle():
    rng = np.random.default_rng(2)
    psi = rng.normal(size=4) + 1j * rng.normal(size=4)
    psi /= np.linalg.norm(psi)
    sigma = random_rho(rng)
    expected = math.sqrt(np.vdot(psi, sigma @ psi).real)
    assert fidelity(np.outer(psi, psi.conj()), sigma) == pytest.approx(expected, abs=1e-7)


# -- files ------------------------------------------------------------------------------

def test_rho_json_round_trip(tmp_path):
    rho = random_rho(np.random.default_rng(1))
    path = tmp_path / "rho.json"
    rho_to_json(rho, path)
    import json
    data = json.loads(path.read_text())
    assert data["basis"] == ["HH", "HV", "VH", "VV"]
    assert np.allclose(rho_from_json(path), rho, atol=1e-8)


def test_reference_fixture():
    ref = reference_rho()
    assert np.trace(ref).real == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(ref, ref.conj().T)
    with pytest.raises(StateError):
        check_density_matrix(ref)  # rounded print: slightly negative eigenvalue
    check_density_matrix(ref, REFERENCE_PSD_TOL)
