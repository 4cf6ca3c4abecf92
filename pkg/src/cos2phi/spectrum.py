"""Diagonalisation, |n+-> labelling, matrix elements and derived spectral quantities."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spl
from scipy.optimize import least_squares

from .hamiltonians import Hamiltonian, Model, Truncation, build
from .units import BiasPoint, CircuitParams, EffectiveParams, ghz_to_angular

log = logging.getLogger(__name__)

DENSE_LIMIT = 1500
PARITY_THRESHOLD = 0.5
DOUBLET_GAP_RATIO = 0.5
THREADS_ENV = "COS2PHI_THREADS"


class SolverError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, iterates=None):
        super().__init__(message)
        self.iterates = iterates


class LabelError(KeyError):
    pass


class Label(NamedTuple):
    n: int
    parity: str  # "+", "-" or "?"

    @property
    def assigned(self) -> bool:
        return self.parity in "+-"

    def __str__(self):
        return f"{self.n}{self.parity}"


@dataclass
class LabeledSpectrum:
    energies: np.ndarray  # GHz, ascending
    vectors: np.ndarray  # columns
    hamiltonian: Hamiltonian = field(repr=False)
    labels: list[Label] | None = None
    parities: np.ndarray | None = None
    doublets: list[tuple[int, ...]] | None = None

    @property
    def bias(self) -> BiasPoint:
        return self.hamiltonian.bias

    @property
    def truncation(self) -> Truncation:
        return self.hamiltonian.truncation

    @property
    def k(self) -> int:
        return len(self.energies)

    def index(self, label) -> int:
        """Level index for an int, a Label, or a string such as ``"0+"`` or ``"#3"``."""
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.k:
                raise LabelError(f"level {label} outside computed range")
            return int(label)
        if isinstance(label, str):
            if label.startswith("#"):
                return self.index(int(label[1:]))
            label = Label(int(label[:-1]), label[-1])
        if self.labels is None:
            raise LabelError("spectrum has no labels; call assign_labels first")
        if not label.assigned:
            raise LabelError(f"label {label} is not a parity label")
        for i, lab in enumerate(self.labels):
            if lab == label:
                return i
        raise LabelError(f"label {label} not assigned at this bias point")

    def label_str(self, i: int) -> str:
        """Parity label if assigned, otherwise the level index as ``#i``."""
        if self.labels is not None and self.labels[i].assigned:
            return str(self.labels[i])
        return f"#{i}"

    def frequency(self, src, dst) -> float:
        return float(self.energies[self.index(dst)] - self.energies[self.index(src)])


def _op(spectrum: LabeledSpectrum, op):
    if isinstance(op, str):
        try:
            return spectrum.hamiltonian.operators[op]
        except KeyError:
            raise KeyError(f"operator {op!r} not defined for {spectrum.hamiltonian.model.value}") from None
    return op


def _fix_gauge(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    ph = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(ph) / ph)[None, :]


def _lowest_shift_invert(M, k: int, v0: np.ndarray, norm: float):
    """Lowest k eigenpairs by shift-invert Lanczos with the shift just below the ground state.

    A coarse single-vector Lanczos run locates the ground state; the shift
    sits a small fraction of |H| below it so the factorisation is regular.
    """
    e0 = spl.eigsh(M, k=1, which="SA", tol=1e-2, v0=v0)[0][0]
    sigma = e0 - max(1e-3 * norm, 1e-12)
    A = (M - sigma * sps.identity(M.shape[0], dtype=M.dtype, format="csc")).tocsc()
    lu = spl.splu(A)
    op = spl.LinearOperator(M.shape, matvec=lu.solve, dtype=M.dtype)
    return spl.eigsh(M, k=k, sigma=sigma, which="LM", OPinv=op, tol=1e-13, v0=v0)


def diagonalize(H: Hamiltonian, k: int = 6) -> LabeledSpectrum:
    """Lowest ``k`` eigenpairs with a residual check.

    Small problems use dense LAPACK; large sparse ones use ARPACK with a
    fixed start vector so repeated calls are reproducible.
    """
    dim = H.dim
    if not 1 <= k <= dim:
        raise ValueError(f"k={k} outside 1..{dim}")
    M = H.matrix
    if not sps.issparse(M) or dim <= DENSE_LIMIT:
        A = H.dense()
        w, v = sla.eigh(A, subset_by_index=[0, k - 1], driver="evr")
        norm = np.abs(A).sum(axis=0).max()
        resid = np.linalg.norm(A @ v - v * w, axis=0)
    else:
        v0 = np.random.default_rng(12345).standard_normal(dim).astype(M.dtype)
        norm = abs(M).sum(axis=0).max()
        try:
            w, v = _lowest_shift_invert(M, k, v0, norm)
        except (RuntimeError, spl.ArpackNoConvergence):
            # singular shift or stalled iteration: plain Lanczos from the bottom
            ncv = min(dim, max(2 * k + 1, 24))
            try:
                w, v = spl.eigsh(M, k=k, which="SA", tol=1e-13, v0=v0, ncv=ncv, maxiter=20 * dim)
            except spl.ArpackNoConvergence as exc:
                raise SolverError(f"ARPACK did not converge: {exc}") from exc
        order = np.argsort(w)
        w, v = w[order], v[:, order]
        resid = np.linalg.norm(M @ v - v * w, axis=0)
    worst = float(resid.max())
    if worst > 1e-9 * norm:
        raise SolverError(f"eigen-residual {worst:.3e} exceeds 1e-9*|H| = {1e-9 * norm:.3e}")
    return LabeledSpectrum(np.asarray(w, float), _fix_gauge(v), H)


def _group_levels(E: np.ndarray) -> list[tuple[int, ...]]:
    groups = []
    i, k = 0, len(E)
    while i < k:
        if i + 1 < k:
            gap = E[i + 1] - E[i]
            if i + 2 < k:
                ref = E[i + 2] - E[i + 1]
            elif i > 0:
                ref = E[i] - E[i - 1]
            else:
                ref = math.inf
            if gap < DOUBLET_GAP_RATIO * ref:
                groups.append((i, i + 1))
                i += 2
                continue
        groups.append((i,))
        i += 1
    return groups


def assign_labels(s: LabeledSpectrum) -> LabeledSpectrum:
    """Attach (plasmon index, parity) labels.

    Adjacent levels form a doublet when their gap is below
    ``DOUBLET_GAP_RATIO`` times the following gap. Parity comes from the sign of the conserved-parity
    expectation value; weakly polarised states stay unassigned.
    """
    if s.k < 4:
        raise ValueError("at least 4 eigenpairs are required for labelling")
    P = s.hamiltonian.operators["parity"]
    V = s.vectors
    par = np.real(np.einsum("ij,ij->j", V.conj(), P @ V))
    groups = _group_levels(s.energies)
    labels: list[Label] = [None] * s.k
    for n, grp in enumerate(groups):
        pg = par[list(grp)]
        ok = np.all(np.abs(pg) > PARITY_THRESHOLD)
        if len(grp) == 2 and ok and np.sign(pg[0]) != np.sign(pg[1]):
            for i, p in zip(grp, pg):
                labels[i] = Label(n, "+" if p > 0 else "-")
        elif len(grp) == 1 and ok:
            labels[grp[0]] = Label(n, "+" if pg[0] > 0 else "-")
        else:
            for i in grp:
                labels[i] = Label(n, "?")
    return replace(s, labels=labels, parities=par, doublets=groups)


def solve(model, params, bias: BiasPoint, k: int = 6, truncation: Truncation | None = None) -> LabeledSpectrum:
    """Build, diagonalise and label in one call."""
    return assign_labels(diagonalize(build(model, params, bias, truncation), k))


def matrix_element(s: LabeledSpectrum, op, src, dst) -> complex:
    """<dst| op |src>."""
    i, j = s.index(src), s.index(dst)
    A = _op(s, op)
    return complex(s.vectors[:, j].conj() @ (A @ s.vectors[:, i]))


def matrix_elements(s: LabeledSpectrum, op) -> np.ndarray:
    """Full matrix <k| op |j> over the computed eigenstates."""
    A = _op(s, op)
    return s.vectors.conj().T @ (A @ s.vectors)


# ---------------------------------------------------------------------------
# transition tables and sweeps

SWEEP_COLUMNS = ["phi_ext_rad", "N_g", "qp_parity", "from_label", "to_label", "freq_GHz", "abs_mel_N", "abs_mel_sinphi"]


@dataclass(frozen=True)
class Transition:
    src: str
    dst: str
    freq: float
    abs_mel: dict


def transitions(s: LabeledSpectrum, ops=("N", "sin_phi"), from_levels=(0, 1)) -> list[Transition]:
    """Upward transitions from the given levels to every higher computed level."""
    mats = {op: np.abs(matrix_elements(s, op)) for op in ops}
    rows = []
    for i in from_levels:
        for j in range(i + 1, s.k):
            rows.append(Transition(
                s.label_str(i), s.label_str(j), float(s.energies[j] - s.energies[i]),
                {op: float(m[j, i]) for op, m in mats.items()},
            ))
    return rows


@dataclass
class SweepPoint:
    index: int
    bias: BiasPoint
    energies: np.ndarray | None = None
    labels: list[str] | None = None
    transitions: list[Transition] | None = None
    error: str | None = None


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def sweep(
    model,
    params,
    biases: Sequence[BiasPoint],
    k: int = 6,
    truncation: Truncation | None = None,
    ops=("N", "sin_phi"),
    workers: int | None = None,
) -> list[SweepPoint]:
    """Spectra over a bias grid. Failures are recorded per point; order follows the grid."""
    if len(biases) == 0:
        raise ValueError("empty bias grid")

    def run(item):
        idx, b = item
        try:
            s = solve(model, params, b, k, truncation)
            return SweepPoint(idx, b, s.energies, [s.label_str(i) for i in range(s.k)], transitions(s, ops))
        except (SolverError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("sweep point %d failed: %s", idx, exc)
            return SweepPoint(idx, b, error=str(exc))

    workers = workers or _default_workers()
    items = list(enumerate(biases))
    if workers == 1:
        out = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(run, items))
    return sorted(out, key=lambda p: p.index)


def sweep_rows(points: Iterable[SweepPoint]) -> list[list]:
    rows = []
    for pt in points:
        if pt.error is not None:
            continue
        for t in pt.transitions:
            rows.append([
                pt.bias.phi_ext, pt.bias.N_g, pt.bias.qp_parity.value, t.src, t.dst, t.freq,
                t.abs_mel.get("N", float("nan")), t.abs_mel.get("sin_phi", float("nan")),
            ])
    return rows


def write_sweep_csv(points, fh, header_lines: Sequence[str] = ()) -> int:
    """Write the sweep table; returns the number of data rows."""
    for line in header_lines:
        fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    rows = sweep_rows(points)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return len(rows)


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.12g" % v
    return str(v)


# ---------------------------------------------------------------------------
# truncation certification


def _target_freqs(model, params, bias, targets, tr: Truncation) -> np.ndarray:
    kmax = max(max(t) for t in targets) + 1
    s = diagonalize(build(model, params, bias, tr), max(kmax, 4))
    return np.array([s.energies[b] - s.energies[a] for a, b in targets])


def converge_truncation(
    model,
    params,
    bias: BiasPoint,
    targets: Sequence[tuple[int, int]] = ((0, 1),),
    rel_tol: float = 1e-4,
    start: Truncation | None = None,
    step: int = 2,
    max_n_max: int = 40,
    max_n_fock: int = 40,
) -> Truncation:
    """Smallest cutoffs (from ``start`` upward) whose refinement moves every
    target transition by less than ``rel_tol``.

    Targets are pairs of level indices. Each cutoff is refined on its own
    until stable; the returned truncation is stable under one more step in
    every direction.
    """
    if not rel_tol > 0:
        raise ValueError("rel_tol must be positive")
    model = Model(model)
    tr = start or (Truncation(6, 8) if model is Model.three_mode else Truncation(4))
    dims = ["n_max"] + (["n_fock"] if model is Model.three_mode else [])
    limits = {"n_max": max_n_max, "n_fock": max_n_fock}
    current = _target_freqs(model, params, bias, targets, tr)
    stable = {d: False for d in dims}
    while not all(stable.values()):
        for d in dims:
            if stable[d]:
                continue
            nxt = replace(tr, **{d: getattr(tr, d) + step})
            if getattr(nxt, d) > limits[d]:
                raise ConvergenceError(
                    f"{d} ceiling {limits[d]} reached before rel_tol={rel_tol}",
                    iterates=(tr, current),
                )
            refined = _target_freqs(model, params, bias, targets, nxt)
            change = np.max(np.abs(refined - current) / np.maximum(np.abs(refined), 1e-300))
            if change < rel_tol:
                stable[d] = True
            else:
                tr, current = nxt, refined
                stable = {k: False for k in dims}
                stable[d] = False
    return tr


# ---------------------------------------------------------------------------
# bias sensitivities


def transition_frequency(model, params, bias, transition=(0, 1), truncation=None) -> float:
    a, b = transition
    s = diagonalize(build(model, params, bias, truncation), max(b + 1, 4))
    return float(s.energies[b] - s.energies[a])


def sensitivity(
    model,
    params,
    bias: BiasPoint,
    wrt: str = "phi_ext",
    transition=(0, 1),
    step: float = 1e-4,
    truncation=None,
) -> float:
    """d(omega_q)/d(bias) in rad/s per rad (flux) or per Cooper pair (charge).

    Central differences at ``step`` and ``step/2`` combined by Richardson
    extrapolation.
    """
    if wrt not in ("phi_ext", "N_g"):
        raise ValueError("wrt must be 'phi_ext' or 'N_g'")

    def f(delta):
        b = replace(bias, **{wrt: getattr(bias, wrt) + delta})
        return transition_frequency(model, params, b, transition, truncation)

    def central(h):
        return (f(h) - f(-h)) / (2 * h)

    d1, d2 = central(step), central(step / 2)
    rich = (4 * d2 - d1) / 3
    if abs(d1 - rich) > 1e-2 * abs(rich) + 1e-9:
        log.warning("sensitivity not converged in step: %g vs %g", d1, rich)
    return ghz_to_angular(rich)


# ---------------------------------------------------------------------------
# effective one-mode parameters


@dataclass
class EffectiveFit:
    params: EffectiveParams
    max_rel_residual: float
    residuals: np.ndarray
    target: np.ndarray


def _one_mode_levels(p: EffectiveParams, biases, n_levels, n_max=16) -> np.ndarray:
    from .hamiltonians import build_one_mode
    from .operators import ChargeBasis

    basis = ChargeBasis(n_max)
    out = []
    for b in biases:
        E = sla.eigh(build_one_mode(p, b, basis).matrix, eigvals_only=True, subset_by_index=[0, n_levels])
        out.append(E[1:] - E[0])
    return np.array(out)


def extract_effective_params(
    p: CircuitParams,
    flux_grid: Sequence[float],
    charge_grid: Sequence[float] = (),
    n_levels: int = 3,
    truncation: Truncation | None = None,
    p0: EffectiveParams | None = None,
) -> EffectiveFit:
    """Fit the four single-mode parameters to the three-mode spectrum.

    Targets are the lowest ``n_levels`` transition frequencies from the
    ground state (the two lowest doublets for n_levels = 3), on a flux grid
    at N_g = 0 and a charge grid at phi_ext = pi. The objective is the sum of
    squared relative residuals.
    """
    tr = truncation or Truncation(10, 14)
    biases = [BiasPoint(phi, 0.0) for phi in flux_grid] + [BiasPoint(math.pi, ng) for ng in charge_grid]
    if not biases:
        raise ValueError("empty grids")
    target = np.array([
        (lambda E: E[1 : n_levels + 1] - E[0])(diagonalize(build(Model.three_mode, p, b, tr), n_levels + 1).energies)
        for b in biases
    ])
    if p0 is None:
        p0 = EffectiveParams(0.9 * p.E_L, 0.02, math.pi / 2 * p.E_L, 0.72 * p.E_CS)
    x0 = np.log([p0.E_J2, max(p0.E_J1, 1e-4), p0.E_Jphi, p0.E_C])

    def resid(x):
        q = EffectiveParams(*np.exp(x))
        return ((_one_mode_levels(q, biases, n_levels) - target) / target).ravel()

    res = least_squares(resid, x0, method="lm", xtol=1e-12, ftol=1e-12)
    if not res.success:
        raise ConvergenceError(f"effective-parameter fit failed: {res.message}")
    r = res.fun.reshape(target.shape)
    return EffectiveFit(EffectiveParams(*np.exp(res.x)), float(np.max(np.abs(r))), r, target)


# ---------------------------------------------------------------------------
# readout anticrossings


def anticrossing_fluxes(omega_readout: float, eff: EffectiveParams) -> list[float]:
    """External fluxes in (pi, 2 pi) where fluxon + n plasmons hit the readout.

    Solves omega_readout = 2 E_Jphi |phi_ext - pi| + n omega_plasmon for
    n = 0, 1, ... (all in GHz) with the offset kept inside (0, pi). The
    mirror images are at 2 pi - phi_ext.
    """
    if not omega_readout > 0:
        raise ValueError("readout frequency must be positive")
    if eff.E_Jphi <= 0:
        return []
    wp = eff.plasmon_frequency
    out = []
    n = 0
    while True:
        delta = (omega_readout - n * wp) / (2.0 * eff.E_Jphi)
        if delta <= 0:
            break
        if delta < math.pi:
            out.append(math.pi + delta)
        n += 1
    return out
