"""Golden-rule relaxation rates for the single-mode and three-mode descriptions.

All rate functions take a labelled spectrum, a :class:`NoiseEnvironment`
and the two end states of the transition (labels such as ``"0+"`` or level
indices). They return the two-way rate Gamma_ij = Gamma_i->j + Gamma_j->i in
1/s, so that T1 = 1 / rate.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sps

from .hamiltonians import Model, Truncation
from .spectrum import LabeledSpectrum, LabelError, _default_workers, fmt, matrix_element, matrix_elements, solve
from .units import (
    E_CHARGE,
    HBAR,
    PHI0,
    R_Q,
    BiasPoint,
    NoiseEnvironment,
    ParameterError,
    flux_inductance,
    ghz_to_angular,
    shunt_capacitance,
    thermal_coth,
)

log = logging.getLogger(__name__)

ONE_HZ = 2.0 * math.pi  # 2 pi x 1 Hz reference of the 1/f densities, in rad/s


class Channel(str, Enum):
    dielectric_shunt = "dielectric_shunt"
    dielectric_JJ = "dielectric_JJ"
    inductive = "inductive"
    flux_1f = "flux_1f"
    charge_1f = "charge_1f"
    radiative_charge = "radiative_charge"
    radiative_flux = "radiative_flux"


# Channels with no free parameter are predictions; the rest rest on bounds
# (Q_cap, Q_ind lower bounds and the A_Q upper bound).
KIND = {
    Channel.dielectric_shunt: "bound",
    Channel.dielectric_JJ: "bound",
    Channel.inductive: "bound",
    Channel.flux_1f: "prediction",
    Channel.charge_1f: "bound",
    Channel.radiative_charge: "prediction",
    Channel.radiative_flux: "prediction",
}


# ---------------------------------------------------------------------------
# spectral densities (SI units, omega in rad/s)


def S_dielectric(omega: float, C_fF: float, Q_cap: float, T: float) -> float:
    """One-sided voltage noise of a lossy capacitor [V^2 s], positive omega = emission."""
    C = C_fF * 1e-15
    x = HBAR * omega / (2.0 * 1.380649e-23 * T)
    return HBAR * omega / (C * abs(omega) * Q_cap) * (1.0 + 1.0 / math.tanh(x))


def S_dielectric_sym(omega: float, C_fF: float, Q_cap: float, T: float) -> float:
    """S(omega) + S(-omega) = 2 hbar coth(hbar|omega|/2kT) / (C Q_cap)."""
    return 2.0 * HBAR / (C_fF * 1e-15 * Q_cap) * thermal_coth(omega, T)


def S_inductive_sym(omega: float, L_nH: float, Q_ind: float, T: float) -> float:
    """S_II(omega) + S_II(-omega) for an inductor with quality factor Q_ind [A^2 s]."""
    return 2.0 * HBAR / (L_nH * 1e-9 * Q_ind) * thermal_coth(omega, T)


def S_flux(omega, A_Phi: float):
    """1/f flux noise [Wb^2 s] with A_Phi in Phi0/sqrt(Hz)."""
    return (A_Phi * PHI0) ** 2 * ONE_HZ / np.abs(omega)


def S_charge(omega, A_Q: float):
    """1/f charge noise [C^2 s] with A_Q in e/sqrt(Hz)."""
    return (A_Q * E_CHARGE) ** 2 * ONE_HZ / np.abs(omega)


def fermi_rate(g: float, mel: complex, S_at: float) -> float:
    """One-way golden-rule rate g^2 |<i|A|j>|^2 S(omega_ji)."""
    if S_at < 0:
        raise ValueError("spectral density must be non-negative")
    return g * g * abs(mel) ** 2 * S_at


# ---------------------------------------------------------------------------
# helpers


def _pair(s: LabeledSpectrum, src, dst) -> tuple[int, int, float]:
    i, j = s.index(src), s.index(dst)
    omega = ghz_to_angular(abs(s.energies[j] - s.energies[i]))
    return i, j, omega


def _commutes(A, B) -> bool:
    C = A @ B - B @ A
    return (abs(C).max() if sps.issparse(C) else np.abs(C).max()) == 0


def _parity_forbidden(s: LabeledSpectrum, op, i: int, j: int) -> bool:
    """True when an exact parity symmetry forces <j|op|i> = 0.

    Requires H and ``op`` to commute with the parity operator to the last bit
    of the tolerance below and the two states to carry opposite parity.
    """
    if s.parities is None or isinstance(op, str) and op not in s.hamiltonian.operators:
        return False
    pi, pj = s.parities[i], s.parities[j]
    if not (abs(pi) > 1 - 1e-9 and abs(pj) > 1 - 1e-9 and pi * pj < 0):
        return False
    P = s.hamiltonian.operators["parity"]
    A = s.hamiltonian.operators[op] if isinstance(op, str) else op
    if not _commutes(A, P):
        return False
    H = s.hamiltonian.matrix
    C = H @ P - P @ H
    scale = abs(H).max() if sps.issparse(H) else np.abs(H).max()
    return (abs(C).max() if sps.issparse(C) else np.abs(C).max()) <= 1e-14 * scale


def _mel2(s: LabeledSpectrum, op, i: int, j: int) -> float:
    if _parity_forbidden(s, op, i, j):
        return 0.0
    return abs(matrix_element(s, op, i, j)) ** 2


def _model(s: LabeledSpectrum) -> Model:
    return s.hamiltonian.model


def _require(s: LabeledSpectrum, *models: Model):
    if _model(s) not in models:
        raise ValueError(f"channel not defined for the {_model(s).value} model")


def _one_mode_energies(s):
    p = s.hamiltonian.params
    if _model(s) is Model.cos2phi:
        return (p.E_C, 0.0) if hasattr(p, "E_C") else (p["E_C"], 0.0)
    return p.E_C, p.E_Jphi


def _island(s: LabeledSpectrum):
    return s.hamiltonian.operators["island_charge"] if _model(s) is Model.three_mode else "N"


# ---------------------------------------------------------------------------
# dielectric loss


def rate_dielectric_1mode(s: LabeledSpectrum, env: NoiseEnvironment, src="0+", dst="0-") -> float:
    """(16 E_C / hbar Q_cap) coth(hbar w / 2kT) |<i|N|j>|^2."""
    _require(s, Model.one_mode, Model.cos2phi)
    i, j, w = _pair(s, src, dst)
    E_C, _ = _one_mode_energies(s)
    return 16.0 * ghz_to_angular(E_C) / env.Q_cap * thermal_coth(w, env.T) * _mel2(s, "N", i, j)


def rate_dielectric_3mode_shunt(s: LabeledSpectrum, env: NoiseEnvironment, src="0+", dst="0-") -> float:
    """(16 E_CS / hbar Q_cap) coth(.) |<i|N + n_Sigma|j>|^2."""
    _require(s, Model.three_mode)
    i, j, w = _pair(s, src, dst)
    p = s.hamiltonian.params
    return 16.0 * ghz_to_angular(p.E_CS) / env.Q_cap * thermal_coth(w, env.T) * _mel2(s, _island(s), i, j)


class JJRate(NamedTuple):
    charge_form: float  # from |<n_Delta>|^2
    phase_form: float  # from |<phi_Delta>|^2 via the commutator identity


def rate_dielectric_JJ(s: LabeledSpectrum, env: NoiseEnvironment, src="0+", dst="0-") -> JJRate:
    """Loss in the two small-junction capacitors, in both matrix-element forms.

    The forms coincide when the loop is symmetric; the charge form is the one
    used in budgets.
    """
    _require(s, Model.three_mode)
    i, j, w = _pair(s, src, dst)
    p = s.hamiltonian.params
    wCJ = ghz_to_angular(p.E_CJ)
    coth = thermal_coth(w, env.T)
    n_form = 8.0 * wCJ / env.Q_cap * coth * _mel2(s, "n_delta", i, j)
    phi_form = w * w / (2.0 * wCJ * env.Q_cap) * coth * _mel2(s, "phi_delta", i, j)
    return JJRate(n_form, phi_form)


# ---------------------------------------------------------------------------
# inductive loss


def rate_inductive(s: LabeledSpectrum, env: NoiseEnvironment, src="0+", dst="0-") -> float:
    """Quasiparticle-like loss in the superinductances.

    Three-mode: (4 E_L / hbar Q_ind) coth(.) (|<phi_S>|^2 + |<phi_D>|^2).
    One-mode: (2 E_Jphi / hbar Q_ind) coth(.) |<sin phi>|^2.
    """
    i, j, w = _pair(s, src, dst)
    coth = thermal_coth(w, env.T)
    if _model(s) is Model.three_mode:
        wL = ghz_to_angular(s.hamiltonian.params.E_L)
        m2 = _mel2(s, "phi_sigma", i, j) + _mel2(s, "phi_delta", i, j)
        return 4.0 * wL / env.Q_ind * coth * m2
    _, E_Jphi = _one_mode_energies(s)
    return 2.0 * ghz_to_angular(E_Jphi) / env.Q_ind * coth * _mel2(s, "sin_phi", i, j)


# ---------------------------------------------------------------------------
# 1/f noise


def rate_flux_1f(s: LabeledSpectrum, env: NoiseEnvironment, src="0+", dst="0-") -> float:
    """Flux 1/f noise, both signs of frequency counted.

    One-mode: 2 (2 pi E_Jphi / Phi0 hbar)^2 S_PhiPhi(w) |<sin phi>|^2.
    Three-mode: 8 pi^2 E_L^2 A^2 (2 pi Hz) / (hbar^2 Phi0^2 |w|) |<phi_D>|^2.
    """
    i, j, w = _pair(s, src, dst)
    if w == 0:
        raise ParameterError("flux 1/f rate is singular for degenerate levels")
    A2 = env.A_Phi**2  # in Phi0^2/Hz, so Phi0 cancels
    if _model(s) is Model.three_mode:
        wL = ghz_to_angular(s.hamiltonian.params.E_L)
        return 8.0 * math.pi**2 * wL**2 * A2 * ONE_HZ / w * _mel2(s, "phi_delta", i, j)
    _, E_Jphi = _one_mode_energies(s)
    g = 2.0 * math.pi * ghz_to_angular(E_Jphi)
    return 2.0 * g * g * A2 * ONE_HZ / w * _mel2(s, "sin_phi", i, j)


def rate_charge_1f(s: LabeledSpectrum, env: NoiseEnvironment, src="0+", dst="0-") -> float:
    """(8 E_C / hbar e)^2 A_Q^2 (2 pi Hz) / (2|w|) |<i|N|j>|^2, E_CS and N + n_Sigma for three modes."""
    i, j, w = _pair(s, src, dst)
    if w == 0:
        raise ParameterError("charge 1/f rate is singular for degenerate levels")
    if _model(s) is Model.three_mode:
        E_C = s.hamiltonian.params.E_CS
    else:
        E_C, _ = _one_mode_energies(s)
    g = 8.0 * ghz_to_angular(E_C)
    return g * g * env.A_Q**2 * ONE_HZ / (2.0 * w) * _mel2(s, _island(s), i, j)


# ---------------------------------------------------------------------------
# bias lines


def rate_radiative(s: LabeledSpectrum, env: NoiseEnvironment, line: str = "flux", src="0+", dst="0-") -> float:
    """Emission into the 50 Ohm charge or flux line.

    Charge: 4 pi w (R/R_Q) (C_g/C)^2 coth(.) |<N>|^2.
    Flux: w R_Q / (pi R) (M/L)^2 coth(.) |<sin phi>|^2 (one-mode, L = L_phi)
    or |<phi_D>|^2 (three-mode, L of one array).
    """
    i, j, w = _pair(s, src, dst)
    coth = thermal_coth(w, env.T)
    three = _model(s) is Model.three_mode
    p = s.hamiltonian.params
    if line == "charge":
        C = shunt_capacitance(p.E_CS if three else _one_mode_energies(s)[0])
        return 4.0 * math.pi * w * env.R / R_Q * (env.C_g / C) ** 2 * coth * _mel2(s, _island(s), i, j)
    if line == "flux":
        if three:
            L, op = flux_inductance(p.E_L), "phi_delta"
        else:
            E_Jphi = _one_mode_energies(s)[1]
            if E_Jphi == 0:
                return 0.0
            L, op = flux_inductance(E_Jphi), "sin_phi"
        return w * R_Q / (math.pi * env.R) * (env.M / L) ** 2 * coth * _mel2(s, op, i, j)
    raise ValueError(f"line must be 'charge' or 'flux', got {line!r}")


# ---------------------------------------------------------------------------
# commutator identity between phase and charge elements of the Delta mode


def phase_charge_identity_residual(s: LabeledSpectrum, n_levels: int | None = None) -> np.ndarray:
    """Relative violation of (E_k - E_j) <k|phi_D|j> = -4i E_CJ (<k|n_D|j> - eps <k|n_S|j>).

    The right-hand side is <k|[H, phi_D]|j> for the three-mode Hamiltonian.
    Returns the matrix of |lhs - rhs| / max(|lhs|, |rhs|, floor) over the
    lowest ``n_levels`` eigenstates. The floor, 1e-6 of the largest |rhs|,
    keeps selection-rule zeros (elements at rounding level) from dominating.
    """
    _require(s, Model.three_mode)
    n = n_levels or s.k
    p = s.hamiltonian.params
    V = s.vectors[:, :n]
    ops = s.hamiltonian.operators

    def mel(A):
        return V.conj().T @ (A @ V)

    E = s.energies[:n]
    # element [k, j] carries (E_k - E_j) <k|phi_D|j>
    lhs = (E[:, None] - E[None, :]) * mel(ops["phi_delta"])
    rhs = -4j * p.E_CJ * (mel(ops["n_delta"]) - p.dCJ_over_CJ * mel(ops["n_sigma"]))
    floor = 1e-6 * np.abs(rhs).max()
    err = np.abs(lhs - rhs) / np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), floor)
    np.fill_diagonal(err, 0.0)
    return err


# ---------------------------------------------------------------------------
# budgets


@dataclass
class RateBudget:
    transition: str
    src: int
    dst: int
    model: str
    phi_ext: float
    rates: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.rates.values()))

    @property
    def T1(self) -> float:
        return 1.0 / self.total if self.total > 0 else math.inf

    def dominant(self) -> Channel:
        return max(self.rates, key=self.rates.get)

    def kind(self, ch: Channel) -> str:
        return KIND[Channel(ch)]


def _channels(model: Model):
    base = [Channel.dielectric_shunt]
    if model is Model.three_mode:
        base.append(Channel.dielectric_JJ)
    return base + [Channel.inductive, Channel.flux_1f, Channel.charge_1f, Channel.radiative_charge, Channel.radiative_flux]


def channel_rate(s: LabeledSpectrum, env: NoiseEnvironment, ch: Channel, src, dst) -> float:
    ch = Channel(ch)
    three = _model(s) is Model.three_mode
    if ch is Channel.dielectric_shunt:
        f = rate_dielectric_3mode_shunt if three else rate_dielectric_1mode
        return f(s, env, src, dst)
    if ch is Channel.dielectric_JJ:
        return rate_dielectric_JJ(s, env, src, dst).charge_form
    if ch is Channel.inductive:
        return rate_inductive(s, env, src, dst)
    if ch is Channel.flux_1f:
        return rate_flux_1f(s, env, src, dst)
    if ch is Channel.charge_1f:
        return rate_charge_1f(s, env, src, dst)
    if ch is Channel.radiative_charge:
        return rate_radiative(s, env, "charge", src, dst)
    return rate_radiative(s, env, "flux", src, dst)


def doublet_pair(s: LabeledSpectrum) -> tuple[int, int]:
    """Levels of the ground doublet (lowest two eigenstates)."""
    return 0, 1


def plasmon_pair(s: LabeledSpectrum) -> tuple[int, int]:
    """Ground state and the charge-bright member of the first plasmon doublet.

    Uses the |1+> label when it is assigned; otherwise the level among the
    next two with the larger island-charge element from the ground state.
    """
    try:
        return 0, s.index("1+")
    except LabelError:
        pass
    if s.k < 4:
        raise ValueError("need at least 4 levels to locate the plasmon")
    m = np.abs(matrix_elements(s, _island(s)))[:, 0]
    return 0, 2 + int(np.argmax(m[2:4]))


def budget(
    s: LabeledSpectrum,
    env: NoiseEnvironment,
    transitions: dict | None = None,
) -> list[RateBudget]:
    """Per-channel rates for the doublet and plasmon transitions of one spectrum.

    A failing channel is recorded in ``errors`` and left out of the total.
    """
    if transitions is None:
        transitions = {"doublet": doublet_pair(s), "plasmon": plasmon_pair(s)}
    out = []
    model = _model(s)
    for name, (a, b) in transitions.items():
        i, j = s.index(a), s.index(b)
        rb = RateBudget(name, i, j, model.value, s.bias.phi_ext)
        for ch in _channels(model):
            try:
                r = channel_rate(s, env, ch, i, j)
                if not (math.isfinite(r) and r >= 0):
                    raise ArithmeticError(f"invalid rate {r}")
                rb.rates[ch] = r
            except (ParameterError, ArithmeticError, ValueError, KeyError) as exc:
                rb.errors[ch] = str(exc)
        out.append(rb)
    return out


def default_flux_grid(n: int = 81, half_width: float = 0.004) -> np.ndarray:
    return math.pi * (1.0 + np.linspace(-half_width, half_width, n))


def budget_sweep(
    model,
    params,
    env: NoiseEnvironment,
    flux_grid: Sequence[float] | None = None,
    N_g: float = 0.0,
    truncation: Truncation | None = None,
    k: int = 6,
    workers: int | None = None,
) -> list[RateBudget]:
    """Budgets over a flux grid, ordered by grid point then transition."""
    grid = default_flux_grid() if flux_grid is None else np.asarray(flux_grid, float)

    def run(phi):
        return budget(solve(model, params, BiasPoint(float(phi), N_g), k, truncation), env)

    workers = workers or _default_workers()
    if workers == 1:
        chunks = [run(phi) for phi in grid]
    else:
        with ThreadPoolExecutor(workers) as ex:
            chunks = list(ex.map(run, grid))
    return [rb for chunk in chunks for rb in chunk]


BUDGET_COLUMNS = ["phi_ext_rad", "transition", "channel", "rate_per_s", "T_limit_s", "kind"]


def write_budget_csv(budgets: Sequence[RateBudget], fh, header_lines: Sequence[str] = ()) -> int:
    for line in header_lines:
        fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(BUDGET_COLUMNS)
    n = 0
    for rb in budgets:
        for ch in _channels(Model(rb.model)):
            r = rb.rates.get(ch, float("nan"))
            T = 1.0 / r if r > 0 else (math.inf if r == 0 else float("nan"))
            w.writerow([fmt(rb.phi_ext), rb.transition, ch.value, fmt(float(r)), fmt(float(T)), KIND[ch]])
            n += 1
    return n
