"""Post-selected polarization entanglement: states, tomography, Peres test.

Two-photon states are 4x4 complex arrays in the basis (HH, HV, VH, VV); the
first letter is the photon at d3. Single-photon states follow the Jones
conventions of :mod:`molhom.optics` (R = (1, -i)/sqrt(2)).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from molhom.model import InvalidParameterError
from molhom.optics import JONES, analyzer_state

BASIS = ("HH", "HV", "VH", "VV")
# The bundled reference matrix is rounded to two decimals and has an
# eigenvalue of about -0.007; checks on it use this looser bound.
REFERENCE_PSD_TOL = 0.02
HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-10

DEFAULT_SETTINGS = tuple(itertools.product("HVDR", repeat=2))

PSI_MINUS = np.array([0.0, 1.0, -1.0, 0.0], dtype=complex) / math.sqrt(2.0)

_BELL_POSTSELECTION = 0.5


class StateError(InvalidParameterError):
    """Matrix is not a valid two-photon density matrix."""


def check_density_matrix(rho, psd_tol: float = PSD_TOL) -> np.ndarray:
    """Return `rho` as a complex array after checking shape, hermiticity, trace and PSD."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise StateError(f"expected a 4x4 matrix, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL:
        raise StateError("matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > TRACE_TOL:
        raise StateError(f"trace is {np.trace(rho).real:.12g}, expected 1")
    lam = np.linalg.eigvalsh(rho)
    if lam[0] < -psd_tol:
        raise StateError(f"matrix has negative eigenvalue {lam[0]:.3g}")
    return rho


def _check_hermitian(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise StateError(f"expected a 4x4 matrix, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL:
        raise StateError("matrix is not Hermitian")
    return rho


class PostSelected(NamedTuple):
    rho: np.ndarray
    probability: float


def post_selected_state(visibility: float) -> PostSelected:
    """State of coincident photons when H and V photons meet on the recombiner.

    Only the cross-port terms survive a coincidence; their coherence is
    reduced by the two-photon interference visibility. Success probability 1/2.
    """
    if not 0.0 <= visibility <= 1.0:
        raise InvalidParameterError(f"visibility must lie in [0, 1], got {visibility!r}")
    rho = np.zeros((4, 4), dtype=complex)
    rho[1, 1] = rho[2, 2] = 0.5
    rho[1, 2] = rho[2, 1] = -0.5 * visibility
    return PostSelected(rho, _BELL_POSTSELECTION)


def single_state(label) -> np.ndarray:
    """Jones vector for a label in H, V, D, A, R, L or a (qwp, hwp, polarizer) triple."""
    if isinstance(label, str):
        try:
            return JONES[label]
        except KeyError:
            raise InvalidParameterError(f"unknown analyzer label {label!r}") from None
    qwp, hwp, pol = label
    return analyzer_state(qwp, hwp, pol)


def projector(setting) -> np.ndarray:
    """Product analyzer state |a> (x) |b> for a setting (a, b)."""
    a, b = setting
    return np.kron(single_state(a), single_state(b))


def predict_probabilities(rho, settings: Sequence = DEFAULT_SETTINGS,
                          psd_tol: float = PSD_TOL) -> np.ndarray:
    """Born-rule coincidence probabilities <ab|rho|ab> for each setting."""
    rho = check_density_matrix(rho, psd_tol)
    vecs = np.array([projector(s) for s in settings])
    return np.einsum("ki,ij,kj->k", vecs.conj(), rho, vecs).real


@dataclass
class TomographyDataset:
    settings: list
    values: np.ndarray
    uncertainties: np.ndarray
    background_subtracted: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.uncertainties = np.asarray(self.uncertainties, dtype=float)
        if len(self.settings) != 16 or len(self.values) != 16:
            raise InvalidParameterError("a tomography dataset needs exactly 16 settings")
        if np.any(self.values < 0):
            raise InvalidParameterError("dataset values must be >= 0")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("setting_a,setting_b,value,uncertainty\n")
            for (a, b), v, u in zip(self.settings, self.values, self.uncertainties):
                fh.write(f"{_label(a)},{_label(b)},{v:.9g},{u:.9g}\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "TomographyDataset":
        settings, values, unc = [], [], []
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header != ["setting_a", "setting_b", "value", "uncertainty"]:
                raise ValueError(f"unexpected tomography header {header}")
            for line in fh:
                if not line.strip():
                    continue
                a, b, v, u = line.strip().split(",")
                settings.append((_parse_label(a), _parse_label(b)))
                values.append(float(v))
                unc.append(float(u))
        return cls(settings, np.array(values), np.array(unc))


def _label(x) -> str:
    return x if isinstance(x, str) else ":".join(f"{v:.9g}" for v in x)


def _parse_label(text: str):
    text = text.strip()
    if ":" in text:
        return tuple(float(v) for v in text.split(":"))
    return text


def simulate_tomography(rho, settings: Sequence = DEFAULT_SETTINGS, pair_count: float = 1e4,
                        background_level: float = 0.0, seed: int = 0,
                        psd_tol: float = PSD_TOL) -> TomographyDataset:
    """Coincidence counts per setting, background-subtracted and normalized.

    counts ~ Poisson(pair_count * p + background_level); the unpolarized
    background is the same for every setting and is subtracted, then values
    are divided by `pair_count`. Negative results are clipped to 0.
    """
    if not pair_count > 0:
        raise InvalidParameterError(f"pair_count must be positive, got {pair_count!r}")
    if not background_level >= 0:
        raise InvalidParameterError(f"background_level must be >= 0, got {background_level!r}")
    p = predict_probabilities(rho, settings, psd_tol)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    counts = rng.poisson(pair_count * np.clip(p, 0.0, None) + background_level)
    values = np.clip(counts - background_level, 0.0, None) / pair_count
    unc = np.sqrt(np.maximum(counts, 1)) / pair_count
    return TomographyDataset(list(settings), values, unc, background_subtracted=True)


# -- maximum likelihood -------------------------------------------------------

_TRIL = np.tril_indices(4, -1)


def _t_matrix(x: np.ndarray) -> np.ndarray:
    t = np.zeros((4, 4), dtype=complex)
    t[np.diag_indices(4)] = x[:4]
    t[_TRIL] = x[4:10] + 1j * x[10:16]
    return t


def _t_params(t: np.ndarray) -> np.ndarray:
    return np.concatenate([t.diagonal().real, t[_TRIL].real, t[_TRIL].imag])


def rho_from_params(x) -> np.ndarray:
    """rho = T^dagger T / tr(T^dagger T) for lower-triangular T from 16 reals."""
    t = _t_matrix(np.asarray(x, dtype=float))
    a = t.conj().T @ t
    return a / np.trace(a).real


def params_from_rho(rho) -> np.ndarray:
    """16 reals whose T^dagger T reproduces `rho` (slightly regularized if singular)."""
    rho = np.asarray(rho, dtype=complex)
    lam, vec = np.linalg.eigh(rho)
    lam = np.clip(lam, 1e-8, None)
    reg = (vec * lam) @ vec.conj().T
    reg /= np.trace(reg).real
    # rho = T^dagger T with T lower triangular <=> J rho J = L L^dagger, T = J L^dagger J
    j = np.eye(4)[::-1]
    chol = np.linalg.cholesky(j @ reg @ j)
    t = j @ chol.conj().T @ j
    return _t_params(t)


@dataclass
class MLEResult:
    rho: np.ndarray
    log_likelihood: float
    converged: bool
    restarts: int
    best_restart: int


class ReconstructionError(RuntimeError):
    def __init__(self, message, best: MLEResult | None = None):
        super().__init__(message)
        self.best = best


def _linear_inversion(dataset: TomographyDataset) -> np.ndarray:
    vecs = np.array([projector(s) for s in dataset.settings])
    ops = np.einsum("ki,kj->kij", vecs, vecs.conj()).reshape(16, 16)
    sol, *_ = np.linalg.lstsq(ops, dataset.values.astype(complex), rcond=None)
    rho = sol.reshape(4, 4).conj()
    rho = 0.5 * (rho + rho.conj().T)
    lam, vec = np.linalg.eigh(rho)
    lam = np.clip(lam, 0.0, None)
    if lam.sum() <= 0:
        return np.eye(4, dtype=complex) / 4
    rho = (vec * lam) @ vec.conj().T
    return rho / np.trace(rho).real


def _objective(x, vecs, projs, proj_sum, y):
    """Negative profiled log-likelihood per unit count and its gradient.

    A (tr - 1)^2 term pins the otherwise free overall scale of T.
    """
    t = _t_matrix(x)
    a = t.conj().T @ t
    q = np.einsum("ki,ij,kj->k", vecs.conj(), a, vecs).real
    q = np.maximum(q, 1e-300)
    qsum = np.trace(a @ proj_sum).real
    tr = np.trace(a).real
    f = -(y @ np.log(q)) + np.log(qsum) + (tr - 1.0) ** 2
    g_mat = -np.einsum("k,kij->ij", y / q, projs) + proj_sum / qsum + 2.0 * (tr - 1.0) * np.eye(4)
    tg = t @ g_mat
    grad = 2.0 * np.concatenate([tg.diagonal().real, tg[_TRIL].real, tg[_TRIL].imag])
    return f, grad


# Gradient scale (per unit count) below which a stalled line search counts as converged.
_STATIONARY_GRAD = 1e-6


def _converged(res) -> bool:
    # L-BFGS-B reports ABNORMAL when it starts at, or reaches, the optimum to machine precision
    return bool(res.success) or float(np.max(np.abs(res.jac))) < _STATIONARY_GRAD


def mle_reconstruct(dataset: TomographyDataset, restarts: int = 5, seed: int = 0,
                    tol: float = 1e-9) -> MLEResult:
    """Maximum-likelihood density matrix for a 16-setting dataset.

    Counts are Poisson with a free overall rate, which is profiled out:
    log L = sum_k y_k log q_k - Y log sum_k q_k with q_k = <k|T^dagger T|k>.
    The first start is the PSD-projected linear inversion, the rest are
    random; the best optimum wins, ties going to the lowest restart index.
    """
    vecs = np.array([projector(s) for s in dataset.settings])
    projs = np.einsum("ki,kj->kij", vecs, vecs.conj())
    if np.linalg.matrix_rank(projs.reshape(16, 16)) < 16:
        raise InvalidParameterError("analyzer settings are not informationally complete")
    proj_sum = projs.sum(axis=0)
    y = np.asarray(dataset.values, dtype=float)
    total = y.sum()
    if total <= 0:
        raise InvalidParameterError("dataset has no counts")
    args = (vecs, projs, proj_sum, y / total)
    rng = np.random.default_rng(seed)
    starts = [params_from_rho(_linear_inversion(dataset))]
    for _ in range(restarts):
        g = (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))) / math.sqrt(2)
        starts.append(params_from_rho(g @ g.conj().T / np.trace(g @ g.conj().T).real))
    best = None
    for k, x0 in enumerate(starts):
        res = minimize(_objective, x0, args=args, jac=True, method="L-BFGS-B",
                       options={"ftol": tol, "gtol": 1e-12, "maxiter": 20000, "maxcor": 30})
        ll = -float(res.fun) * total
        if best is None or ll > best[0] + 1e-12 * abs(best[0]):
            best = (ll, k, res)
    ll, k, res = best
    out = MLEResult(rho_from_params(res.x), ll, _converged(res), restarts, k)
    if not out.converged:
        raise ReconstructionError(f"MLE did not converge: {res.message}", out)
    return out


# -- figures of merit --------------------------------------------------------

def partial_transpose(rho) -> np.ndarray:
    """Transpose over the second photon."""
    r = np.asarray(rho).reshape(2, 2, 2, 2)
    return r.transpose(0, 3, 2, 1).reshape(4, 4)


class PeresValue(NamedTuple):
    lambda_min: float
    normalized: float  # 2 * lambda_min; -1 for a maximally entangled state


def peres_min_eigenvalue(rho) -> PeresValue:
    """Smallest eigenvalue of the partial transpose (negative means entangled)."""
    rho = _check_hermitian(rho)
    lam = float(np.linalg.eigvalsh(partial_transpose(rho))[0])
    return PeresValue(lam, 2.0 * lam)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(0.5 * (m + m.conj().T))
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.conj().T


def fidelity(rho, sigma, psd_tol: float = PSD_TOL) -> float:
    """Root fidelity tr sqrt(sqrt(rho) sigma sqrt(rho)), in [0, 1]."""
    rho = check_density_matrix(rho, psd_tol)
    sigma = check_density_matrix(sigma, psd_tol)
    s = _psd_sqrt(rho)
    lam = np.linalg.eigvalsh(s @ sigma @ s)
    return float(min(np.sum(np.sqrt(np.clip(lam, 0.0, None))), 1.0))


# -- serialization ------------------------------------------------------------

def rho_to_json(rho, path: str | Path) -> None:
    """{basis: [...], re: 4x4, im: 4x4}."""
    rho = np.asarray(rho, dtype=complex)
    data = {"basis": list(BASIS),
            "re": [[float(f"{v:.9g}") for v in row] for row in rho.real],
            "im": [[float(f"{v:.9g}") for v in row] for row in rho.imag]}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def rho_from_json(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    if list(data.get("basis", [])) != list(BASIS):
        raise ValueError(f"density matrix basis must be {list(BASIS)}")
    rho = np.array(data["re"], dtype=float) + 1j * np.array(data["im"], dtype=float)
    return _check_hermitian(rho)


def reference_rho_path():
    """Bundled 4x4 reference: a measured post-selected two-photon state."""
    return resources.files("molhom") / "data" / "reference_rho.json"


def reference_rho() -> np.ndarray:
    with resources.as_file(reference_rho_path()) as path:
        return rho_from_json(path)
