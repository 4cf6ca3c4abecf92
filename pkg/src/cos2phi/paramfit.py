"""Least-squares fit of the three-mode circuit parameters to spectroscopy.

The free parameters are ln E_J, ln E_CJ, ln E_L, ln E_CS and the junction
asymmetry epsilon (fitted directly). The objective is the weighted sum of
squared relative frequency residuals. Steps are damped Gauss-Newton
directions with an Armijo backtracking line search, so every accepted step
lowers the objective.

Gradients default to Hellmann-Feynman derivatives of the truncated model,
which are exact because the Hamiltonian is linear in every energy at a fixed
oscillator basis. Forward finite differences are available as a cross-check.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .hamiltonians import (
    THREE_MODE_FIT_PARAMS,
    Model,
    Truncation,
    build_three_mode,
    default_phi_zpf,
    three_mode_derivatives,
)
from .spectrum import LabelError, assign_labels, converge_truncation, diagonalize, fmt
from .units import BiasPoint, CircuitParams, ParameterError

log = logging.getLogger(__name__)

DATASET_COLUMNS = ["phi_ext_rad", "N_g", "from_label", "to_label", "freq_GHz", "weight"]
LOG_PARAMS = ("E_J", "E_CJ", "E_L", "E_CS")
EPS_LIMIT = 0.5
_BIAS_DECIMALS = 12


class DataError(ValueError):
    pass


class FitWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DataRow:
    phi_ext: float  # rad
    N_g: float
    from_label: str
    to_label: str
    freq: float  # GHz
    weight: float = 1.0

    @property
    def bias_key(self) -> tuple[float, float]:
        return (round(self.phi_ext, _BIAS_DECIMALS), round(self.N_g, _BIAS_DECIMALS))


def _is_sweet(phi: float) -> bool:
    return abs(math.remainder(phi - math.pi, 2 * math.pi)) < 1e-9


def _is_half(ng: float) -> bool:
    return abs(math.remainder(ng - 0.5, 1.0)) < 1e-9


def _check_label(label: str) -> str:
    label = str(label).strip()
    if label.startswith("#"):
        if not label[1:].isdigit():
            raise DataError(f"bad level label {label!r}")
        return label
    if len(label) < 2 or label[-1] not in "+-" or not label[:-1].isdigit():
        raise DataError(f"bad level label {label!r}; use e.g. '0+' or '#3'")
    return label


@dataclass
class SpectroscopyDataset:
    rows: list[DataRow]

    def __post_init__(self):
        self.rows = list(self.rows)
        self.validate()

    def validate(self) -> None:
        if not self.rows:
            raise DataError("dataset is empty")
        for i, r in enumerate(self.rows):
            vals = (r.phi_ext, r.N_g, r.freq, r.weight)
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"row {i}: non-finite value")
            if not r.freq > 0:
                raise DataError(f"row {i}: frequency must be positive")
            if not r.weight > 0:
                raise DataError(f"row {i}: weight must be positive")
            _check_label(r.from_label)
            _check_label(r.to_label)
        if all(_is_sweet(r.phi_ext) for r in self.rows):
            raise DataError("need at least one row away from phi_ext = pi")
        if not any(_is_half(r.N_g) for r in self.rows):
            raise DataError("need at least one row at N_g = 0.5 to constrain the asymmetry")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def freqs(self) -> np.ndarray:
        return np.array([r.freq for r in self.rows])

    @property
    def weights(self) -> np.ndarray:
        return np.array([r.weight for r in self.rows])

    def groups(self) -> "OrderedDict[tuple[float, float], list[int]]":
        """Row indices grouped by bias point, in order of first appearance."""
        out: OrderedDict = OrderedDict()
        for i, r in enumerate(self.rows):
            out.setdefault(r.bias_key, []).append(i)
        return out

    def scaled(self, lam: float) -> "SpectroscopyDataset":
        return SpectroscopyDataset([replace(r, freq=r.freq * lam) for r in self.rows])


def read_dataset_csv(fh) -> SpectroscopyDataset:
    lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [c.strip() for c in next(reader)]
    except StopIteration:
        raise DataError("empty dataset file") from None
    if header != DATASET_COLUMNS:
        raise DataError(f"expected header {','.join(DATASET_COLUMNS)}")
    rows = []
    for n, rec in enumerate(reader, start=2):
        if len(rec) != len(DATASET_COLUMNS):
            raise DataError(f"line {n}: expected {len(DATASET_COLUMNS)} fields")
        try:
            rows.append(DataRow(float(rec[0]), float(rec[1]), _check_label(rec[2]), _check_label(rec[3]),
                                float(rec[4]), float(rec[5])))
        except ValueError as exc:
            raise DataError(f"line {n}: {exc}") from exc
    return SpectroscopyDataset(rows)


def write_dataset_csv(data: SpectroscopyDataset, fh, header_lines: Sequence[str] = ()) -> None:
    for h in header_lines:
        fh.write(f"# {h}\n")
    fh.write(",".join(DATASET_COLUMNS) + "\n")
    for r in data.rows:
        fh.write(",".join([fmt(r.phi_ext), fmt(r.N_g), r.from_label, r.to_label, fmt(r.freq), fmt(r.weight)]) + "\n")


# ---------------------------------------------------------------------------
# parameter vector


def params_to_x(p: CircuitParams) -> np.ndarray:
    return np.array([math.log(p.E_J), math.log(p.E_CJ), math.log(p.E_L), math.log(p.E_CS), p.epsilon])


def x_to_params(x) -> CircuitParams:
    x = np.asarray(x, float)
    return CircuitParams.with_asymmetry(*np.exp(x[:4]), float(x[4]))


def _levels_needed(labels: Iterable[str]) -> int:
    k = 6
    for lab in labels:
        if lab.startswith("#"):
            k = max(k, int(lab[1:]) + 2)
        else:
            # a doublet index n sits at most at level 2n + 1
            k = max(k, 2 * int(lab[:-1]) + 4)
    return k


@dataclass
class ModelEvaluation:
    freqs: np.ndarray  # nan where the row could not be resolved
    jacobian: np.ndarray | None  # d freq / d x, rows x 5
    flagged: list[int]


def evaluate(p: CircuitParams, data: SpectroscopyDataset, truncation: Truncation,
             jacobian: bool = False) -> ModelEvaluation:
    """Model frequencies (and optionally their x-gradients) for every row."""
    n = len(data)
    freqs = np.full(n, np.nan)
    jac = np.full((n, 5), np.nan) if jacobian else None
    flagged: list[int] = []
    scale = np.array([p.E_J, p.E_CJ, p.E_L, p.E_CS, 1.0])
    for (phi, ng), idx in data.groups().items():
        bias = BiasPoint(phi, ng)
        rows = [data.rows[i] for i in idx]
        k = _levels_needed([lab for r in rows for lab in (r.from_label, r.to_label)])
        if jacobian:
            H, dH = three_mode_derivatives(p, bias, truncation)
        else:
            H = build_three_mode(p, bias, truncation)
        s = assign_labels(diagonalize(H, k))
        if jacobian:
            V = s.vectors
            dE = np.array([np.real(np.einsum("ij,ij->j", V.conj(), dH[name] @ V))
                           for name in THREE_MODE_FIT_PARAMS]).T
        for i, r in zip(idx, rows):
            try:
                a, b = s.index(r.from_label), s.index(r.to_label)
            except LabelError:
                flagged.append(i)
                continue
            freqs[i] = s.energies[b] - s.energies[a]
            if jacobian:
                jac[i] = (dE[b] - dE[a]) * scale
    return ModelEvaluation(freqs, jac, sorted(flagged))


def _warn_flagged(flagged: list[int]) -> None:
    if flagged:
        warnings.warn(f"{len(flagged)} row(s) could not be labelled and are excluded: {flagged[:10]}",
                      FitWarning, stacklevel=3)


def _weighted_residuals(ev: ModelEvaluation, data: SpectroscopyDataset) -> np.ndarray:
    f = data.freqs
    r = np.sqrt(data.weights) * (ev.freqs - f) / f
    r[ev.flagged] = 0.0
    return r


def _truncation_for(p: CircuitParams, data: SpectroscopyDataset, truncation: Truncation | None,
                    cert_tol: float) -> Truncation:
    return truncation if truncation is not None else certify_truncation(p, data, rel_tol=cert_tol)


def model_frequencies(p: CircuitParams, data: SpectroscopyDataset, truncation: Truncation | None = None,
                      cert_tol: float = 3e-4) -> np.ndarray:
    ev = evaluate(p, data, _truncation_for(p, data, truncation, cert_tol))
    _warn_flagged(ev.flagged)
    return ev.freqs


def residuals(p: CircuitParams, data: SpectroscopyDataset, truncation: Truncation | None = None,
              cert_tol: float = 3e-4) -> np.ndarray:
    """sqrt(w) (f_model - f) / f per row; zero for flagged rows."""
    ev = evaluate(p, data, _truncation_for(p, data, truncation, cert_tol))
    _warn_flagged(ev.flagged)
    return _weighted_residuals(ev, data)


def objective(p: CircuitParams, data: SpectroscopyDataset, truncation: Truncation | None = None,
              cert_tol: float = 3e-4) -> float:
    """Sum of w ((f_model - f) / f)^2 over the resolvable rows."""
    r = residuals(p, data, truncation, cert_tol)
    return float(r @ r)


# ---------------------------------------------------------------------------
# truncation


def _representative_biases(data: SpectroscopyDataset) -> list[tuple[float, float]]:
    keys = list(data.groups())
    dist = [abs(math.remainder(phi - math.pi, 2 * math.pi)) for phi, _ in keys]
    picks = {keys[int(np.argmax(dist))], keys[int(np.argmin(dist))]}
    half = [k for k in keys if _is_half(k[1])]
    if half:
        picks.add(half[0])
    return sorted(picks)


def certify_truncation(p: CircuitParams, data: SpectroscopyDataset, rel_tol: float = 3e-4,
                       start: Truncation | None = None) -> Truncation:
    """Cutoffs that resolve every fitted level to ``rel_tol``.

    Checked at the bias points farthest from and closest to the sweet spot
    and at one N_g = 0.5 point; the largest cutoff in each mode wins. The
    oscillator spread is fixed at its value for ``p``.
    """
    zpf = default_phi_zpf(p) if start is None or start.phi_zpf is None else start.phi_zpf
    start = Truncation(6, 10, zpf) if start is None else replace(start, phi_zpf=zpf)
    k = _levels_needed([lab for r in data.rows for lab in (r.from_label, r.to_label)])
    targets = [(0, j) for j in range(1, k - 1)]
    n_max, n_fock = start.n_max, start.n_fock
    for phi, ng in _representative_biases(data):
        tr = converge_truncation(Model.three_mode, p, BiasPoint(phi, ng), targets=targets,
                                 rel_tol=rel_tol, start=start)
        n_max, n_fock = max(n_max, tr.n_max), max(n_fock, tr.n_fock)
    return Truncation(n_max, n_fock, zpf)


# ---------------------------------------------------------------------------
# optimiser


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    objective: float
    grad_norm: float
    step: float  # largest parameter change of the accepted step (relative for energies)
    line_search_t: float
    params: CircuitParams


@dataclass
class FitResult:
    params: CircuitParams
    objective: float
    residuals: np.ndarray
    model_freqs: np.ndarray
    flagged: list[int]
    trace: list[TraceEntry]
    converged: bool
    message: str
    truncation: Truncation
    stderr: np.ndarray | None = field(default=None)  # 1-sigma in x, from the final Jacobian

    @property
    def n_iter(self) -> int:
        return len(self.trace)

    def report(self, data: SpectroscopyDataset | None = None) -> str:
        p = self.params
        lines = [
            f"converged: {'yes' if self.converged else 'no'} ({self.message})",
            f"iterations: {self.n_iter}",
            f"objective: {fmt(self.objective)}",
            f"truncation: n_max={self.truncation.n_max} n_fock={self.truncation.n_fock} "
            f"phi_zpf={fmt(self.truncation.phi_zpf)}",
        ]
        se = self.stderr if self.stderr is not None else np.full(5, np.nan)
        vals = [p.E_J, p.E_CJ, p.E_L, p.E_CS, p.epsilon]
        for name, v, s in zip(THREE_MODE_FIT_PARAMS, vals, se):
            unit = "" if name == "epsilon" else " GHz"
            rel = "abs" if name == "epsilon" else "rel"
            lines.append(f"{name} = {fmt(v)}{unit}  (1-sigma {rel} {fmt(s)})")
        if data is not None:
            lines.append("")
            lines.append("row,phi_ext_rad,N_g,from_label,to_label,freq_GHz,model_GHz,rel_residual,flagged")
            for i, r in enumerate(data.rows):
                m = self.model_freqs[i]
                rel = (m - r.freq) / r.freq if math.isfinite(m) else float("nan")
                lines.append(",".join([str(i), fmt(r.phi_ext), fmt(r.N_g), r.from_label, r.to_label,
                                       fmt(r.freq), fmt(m), fmt(rel), str(int(i in self.flagged))]))
        return "\n".join(lines) + "\n"


def _fd_jacobian(x: np.ndarray, r0: np.ndarray, data, truncation, h: float = 1e-6) -> np.ndarray:
    J = np.empty((len(r0), len(x)))
    for j in range(len(x)):
        xp = x.copy()
        xp[j] += h
        J[:, j] = (_weighted_residuals(evaluate(x_to_params(xp), data, truncation), data) - r0) / h
    return J


def _gauss_newton(x0: np.ndarray, data: SpectroscopyDataset, truncation: Truncation, *,
                  max_iter: int, step_tol: float, grad_tol: float, gradient: str,
                  damping: float, trace: list[TraceEntry], callback: Callable | None):
    x = x0.copy()
    ev = evaluate(x_to_params(x), data, truncation, jacobian=(gradient == "analytic"))
    r = _weighted_residuals(ev, data)
    F = float(r @ r)
    lam = damping
    w = np.sqrt(data.weights) / data.freqs
    for it in range(1, max_iter + 1):
        if gradient == "analytic":
            J = w[:, None] * ev.jacobian
            J[ev.flagged] = 0.0
        else:
            J = _fd_jacobian(x, r, data, truncation)
        g = 2.0 * J.T @ r
        gnorm = float(np.linalg.norm(g))
        if gnorm < grad_tol:
            return x, ev, F, True, "gradient norm below tolerance", lam
        A = J.T @ J
        D = np.diag(np.maximum(np.diag(A), 1e-300))
        d = np.linalg.solve(A + lam * D, -J.T @ r)
        t, slope = 1.0, float(g @ d)
        while True:
            xn = x + t * d
            if abs(xn[4]) < EPS_LIMIT:
                evn = evaluate(x_to_params(xn), data, truncation, jacobian=(gradient == "analytic"))
                rn = _weighted_residuals(evn, data)
                Fn = float(rn @ rn)
                if Fn <= F + 1e-4 * t * slope:
                    break
            t *= 0.5
            if t < 1e-10:
                return x, ev, F, False, "line search failed", lam
        step = float(np.max(np.abs(xn - x)))
        x, ev, r, F = xn, evn, rn, Fn
        lam = max(lam / 10.0, 1e-12) if t == 1.0 else lam * 4.0
        _warn_flagged(ev.flagged)
        entry = TraceEntry(it, F, gnorm, step, t, x_to_params(x))
        trace.append(entry)
        log.info("fit iter %d: objective %.6g step %.3g t %.3g", it, F, step, t)
        if callback is not None:
            callback(entry)
        if step < step_tol:
            return x, ev, F, True, "relative step below tolerance", lam
    return x, ev, F, False, f"no convergence after {max_iter} iterations", lam


def fit(
    data: SpectroscopyDataset,
    p0: CircuitParams,
    *,
    truncation: Truncation | None = None,
    cert_tol: float = 3e-4,
    max_iter: int = 50,
    step_tol: float = 1e-6,
    grad_tol: float = 1e-8,
    gradient: str = "analytic",
    damping: float = 1e-3,
    refit_tol: float = 1e-3,
    max_refits: int = 2,
    callback: Callable[[TraceEntry], None] | None = None,
) -> FitResult:
    """Fit (E_J, E_CJ, E_L, E_CS, epsilon) to ``data`` starting from ``p0``.

    Without an explicit ``truncation`` the cutoffs are certified at ``p0``,
    re-certified at the estimate, and the fit is repeated when the
    re-certified model moves any prediction by more than ``refit_tol``.
    ``gradient`` is ``"analytic"`` (Hellmann-Feynman) or ``"fd"``.
    """
    if gradient not in ("analytic", "fd"):
        raise ValueError("gradient must be 'analytic' or 'fd'")
    try:
        x0 = params_to_x(p0)
    except (ParameterError, ValueError) as exc:
        raise ParameterError(f"bad starting point: {exc}") from exc
    if not np.all(np.isfinite(x0)) or abs(x0[4]) >= EPS_LIMIT:
        raise ParameterError("starting point outside physical bounds")
    certify = truncation is None
    if certify:
        tr = certify_truncation(p0, data, cert_tol)
    elif truncation.phi_zpf is None:
        # the analytic gradient holds the oscillator basis fixed
        tr = replace(truncation, phi_zpf=default_phi_zpf(p0))
    else:
        tr = truncation
    trace: list[TraceEntry] = []
    x = x0
    for attempt in range(max_refits + 1):
        # a refit starts next to the previous optimum, so the damping carries over
        x, ev, F, ok, msg, damping = _gauss_newton(x, data, tr, max_iter=max_iter, step_tol=step_tol,
                                                   grad_tol=grad_tol, gradient=gradient, damping=damping,
                                                   trace=trace, callback=callback)
        if not certify:
            break
        new = certify_truncation(x_to_params(x), data, cert_tol, start=tr)
        if new == tr:
            break
        shifted = evaluate(x_to_params(x), data, new).freqs
        shift = np.nanmax(np.abs(shifted / ev.freqs - 1.0))
        log.info("re-certified truncation %s -> %s, max shift %.3g", tr, new, shift)
        tr = new
        if shift <= refit_tol:
            ev = evaluate(x_to_params(x), data, tr, jacobian=True)
            F = float(_weighted_residuals(ev, data) @ _weighted_residuals(ev, data))
            break
    else:
        ok, msg = False, msg + "; truncation did not settle"
    p = x_to_params(x)
    if ev.jacobian is None:
        ev = evaluate(p, data, tr, jacobian=True)
    r = _weighted_residuals(ev, data)
    J = (np.sqrt(data.weights) / data.freqs)[:, None] * ev.jacobian
    J[ev.flagged] = 0.0
    stderr = _stderr(J, r, len(data) - len(ev.flagged))
    if not ok:
        warnings.warn(f"fit did not converge: {msg}", FitWarning, stacklevel=2)
    return FitResult(p, float(r @ r), r, ev.freqs, ev.flagged, trace, ok, msg, tr, stderr)


def _stderr(J: np.ndarray, r: np.ndarray, n_used: int) -> np.ndarray | None:
    dof = n_used - J.shape[1]
    if dof <= 0:
        return None
    try:
        cov = np.linalg.inv(J.T @ J) * float(r @ r) / dof
    except np.linalg.LinAlgError:
        return None
    return np.sqrt(np.maximum(np.diag(cov), 0.0))


# ---------------------------------------------------------------------------
# synthetic data


def perturb(p: CircuitParams, rel: float = 0.2, signs: Sequence[int] = (1, -1, 1, -1)) -> CircuitParams:
    """Energies scaled by 1 +/- ``rel``; the asymmetry is left alone."""
    f = [1.0 + s * rel for s in signs]
    return CircuitParams.with_asymmetry(p.E_J * f[0], p.E_CJ * f[1], p.E_L * f[2], p.E_CS * f[3], p.epsilon)


def synthetic_dataset(
    p: CircuitParams,
    biases: Sequence[BiasPoint],
    n_levels: int,
    truncation: Truncation | None = None,
    noise: float = 0.0,
    seed: int = 0,
) -> SpectroscopyDataset:
    """Transitions from the ground state to the next ``n_levels`` levels.

    The two lowest doublets carry parity labels where these are assigned;
    all other levels are named by index, which stays well defined when the
    parameters move. ``noise`` is the relative standard deviation of
    multiplicative Gaussian noise drawn from a Philox stream.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    rows = []
    for b in biases:
        s = assign_labels(diagonalize(build_three_mode(p, b, truncation), max(n_levels + 2, 6)))
        src = s.label_str(0)
        for j in range(1, n_levels + 1):
            f = float(s.energies[j] - s.energies[0])
            if noise:
                f *= 1.0 + noise * rng.standard_normal()
            dst = s.label_str(j) if j < 4 else f"#{j}"
            rows.append(DataRow(float(b.phi_ext), float(b.N_g), src, dst, f, 1.0))
    return SpectroscopyDataset(rows)


def fixture_biases(n_flux: int = 30) -> list[BiasPoint]:
    """Flux points from 0.05 pi to pi at N_g = 0, plus N_g = 0.5 at pi and pi/2."""
    out = [BiasPoint(float(phi), 0.0) for phi in np.linspace(0.05 * np.pi, np.pi, n_flux)]
    out += [BiasPoint(math.pi, 0.5), BiasPoint(0.5 * math.pi, 0.5)]
    return out


FIXTURE_SEED = 20240614
FIXTURE_TRUNCATION = Truncation(10, 18)
FIXTURE_LEVELS = 24
FIXTURE_NOISE = 1e-3


def make_fixture(p: CircuitParams | None = None) -> SpectroscopyDataset:
    """Regenerate the bundled regression dataset (several minutes)."""
    from .units import TABLE_I_CIRCUIT

    p = TABLE_I_CIRCUIT if p is None else p
    return synthetic_dataset(p, fixture_biases(), FIXTURE_LEVELS, FIXTURE_TRUNCATION, FIXTURE_NOISE, FIXTURE_SEED)


def load_fixture() -> SpectroscopyDataset:
    from importlib import resources

    with resources.files("cos2phi").joinpath("data/fixture_spectroscopy.csv").open("r") as fh:
        return read_dataset_csv(fh)
