"""Readout photon-number calibration and charge-offset fitting.

The resonator frequency conditioned on the doublet state is used in its
linearised mean-field form, f_s(n) = f0 + chi_s - K_s n, which is what the
dispersive-plus-Kerr model gives at low photon number.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize

DOUBLET_STATES = ("0p", "0m")


class CalibrationError(ValueError):
    pass


def _state(s) -> str:
    aliases = {"0p": "0p", "0+": "0p", "+": "0p", "plus": "0p", "0m": "0m", "0-": "0m", "-": "0m", "minus": "0m"}
    try:
        return aliases[str(s)]
    except KeyError:
        raise CalibrationError(f"unknown doublet state {s!r}") from None


@dataclass(frozen=True)
class ReadoutModelParams:
    """Resonator frequency f0, dispersive shifts chi_+/-, Kerr K_+/- (all GHz)."""

    omega0: float
    chi_plus: float
    chi_minus: float
    K_plus: float
    K_minus: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.omega0, self.chi_plus, self.chi_minus, self.K_plus, self.K_minus)):
            raise CalibrationError("readout parameters must be finite")

    @property
    def chi(self) -> float:
        """Doublet dispersive shift chi_- - chi_+."""
        return self.chi_minus - self.chi_plus


def conditional_resonator_freq(params: ReadoutModelParams, nbar, state) -> np.ndarray:
    """Resonance f0 + chi_s - K_s nbar for doublet state ``state`` (GHz)."""
    nbar = np.asarray(nbar, float)
    if np.any(nbar < 0):
        raise ValueError("photon number must be non-negative")
    if _state(state) == "0p":
        return params.omega0 + params.chi_plus - params.K_plus * nbar
    return params.omega0 + params.chi_minus - params.K_minus * nbar


def fit_dispersive(nbar_proxy, freq, state, omega0: float | None = None) -> ReadoutModelParams:
    """Independent straight-line fits per doublet state.

    chi follows from the difference of intercepts and does not depend on the
    scale of the photon-number proxy. Only chi_- - chi_+ is identifiable from
    the data; the bare frequency defaults to the mean intercept.
    """
    x = np.asarray(nbar_proxy, float)
    y = np.asarray(freq, float)
    st = np.array([_state(s) for s in state])
    if not (x.shape == y.shape == st.shape):
        raise CalibrationError("columns differ in length")
    coef = {}
    for s in DOUBLET_STATES:
        m = st == s
        if m.sum() < 2:
            raise CalibrationError(f"need at least 2 points for state {s}")
        A = np.column_stack([np.ones(m.sum()), x[m]])
        sol, _, rank, _ = np.linalg.lstsq(A, y[m], rcond=None)
        if rank < 2:
            raise CalibrationError(f"rank-deficient data for state {s} (single proxy value)")
        coef[s] = sol
    b_p, m_p = coef["0p"]
    b_m, m_m = coef["0m"]
    w0 = 0.5 * (b_p + b_m) if omega0 is None else omega0
    return ReadoutModelParams(float(w0), float(b_p - w0), float(b_m - w0), float(-m_p), float(-m_m))


@dataclass(frozen=True)
class StarkCalibration:
    slope: float  # d(delta f_q)/d(power) [GHz per power unit]
    nbar_per_power: float

    def __post_init__(self):
        if not self.nbar_per_power > 0:
            raise CalibrationError("photon conversion factor must be positive; check the sign of chi")

    def nbar(self, power):
        return self.nbar_per_power * np.asarray(power, float)


def photon_calibration(power, delta_wq, chi: float) -> StarkCalibration:
    """Photons per unit power from the Stark shift delta f_q = nbar chi (fit through the origin)."""
    if chi == 0 or not math.isfinite(chi):
        raise CalibrationError("chi must be finite and non-zero")
    p = np.asarray(power, float)
    d = np.asarray(delta_wq, float)
    if p.shape != d.shape or p.size < 1 or not np.any(p != 0):
        raise CalibrationError("need at least one non-zero power point")
    slope = float(np.dot(p, d) / np.dot(p, p))
    return StarkCalibration(slope, slope / chi)


# ---------------------------------------------------------------------------
# charge offset


@dataclass(frozen=True)
class ChargeOffsetFit:
    delta: float  # canonical offset in [-0.25, 0.25)
    amplitude: float
    offset: float
    residual: float


def _design(ng, delta):
    return np.column_stack([np.abs(np.cos(2 * np.pi * (ng - delta))), np.ones_like(ng)])


def _profile(ng, y, delta, nuisance):
    if not nuisance:
        r = np.abs(np.cos(2 * np.pi * (ng - delta))) - y
        return float(r @ r), 1.0, 0.0
    sol, *_ = np.linalg.lstsq(_design(ng, delta), y, rcond=None)
    r = _design(ng, delta) @ sol - y
    return float(r @ r), float(sol[0]), float(sol[1])


def canonical_offset(delta: float) -> float:
    """Representative of delta modulo 1/2 in [-0.25, 0.25).

    |cos(2 pi (N_g - d))| has period 1/2 in d, so offsets differing by a
    half Cooper pair are indistinguishable from this signal.
    """
    return float((delta + 0.25) % 0.5 - 0.25)


def fit_charge_offset(N_g, signal, nuisance: bool = True, n_grid: int = 200) -> ChargeOffsetFit:
    """Offset charge from a |cos(2 pi (N_g - d))| signal.

    Coarse grid over one period of d followed by a bounded local refinement.
    With ``nuisance`` the amplitude and a constant background are profiled
    out by linear least squares at each trial d.
    """
    ng = np.asarray(N_g, float)
    y = np.asarray(signal, float)
    if ng.shape != y.shape or ng.size < 4:
        raise CalibrationError("need at least 4 (N_g, signal) samples")
    if np.ptp(ng) < 0.5 - 1e-12:
        raise CalibrationError("N_g must span at least half a charge period")
    if np.ptp(y) <= 1e-12 * max(np.max(np.abs(y)), 1e-300):
        raise CalibrationError("signal is flat")
    grid = -0.25 + 0.5 * np.arange(n_grid) / n_grid
    costs = [_profile(ng, y, d, nuisance)[0] for d in grid]
    d0 = grid[int(np.argmin(costs))]
    step = 0.5 / n_grid
    res = optimize.minimize_scalar(lambda d: _profile(ng, y, d, nuisance)[0],
                                   bounds=(d0 - step, d0 + step), method="bounded",
                                   options={"xatol": 1e-10})
    cost, a, b = _profile(ng, y, res.x, nuisance)
    return ChargeOffsetFit(canonical_offset(res.x), a, b, math.sqrt(cost / ng.size))


def fold_quasiparticle_jumps(values, axis: float) -> np.ndarray:
    """Reflect points lying above ``axis`` back below it: v -> axis - |v - axis|.

    One-dimensional stand-in for merging the two quasiparticle-parity
    branches of a reduced readout variable before the offset fit.
    """
    v = np.asarray(values, float)
    return axis - np.abs(v - axis)


# ---------------------------------------------------------------------------
# ingestion


def _read(fh, columns: Sequence[str]):
    rows = list(csv.reader(line for line in fh if line.strip() and not line.startswith("#")))
    if not rows or [c.strip() for c in rows[0]] != list(columns):
        raise CalibrationError(f"expected header {','.join(columns)}")
    body = rows[1:]
    if any(len(r) != len(columns) for r in body):
        raise CalibrationError("row with wrong number of fields")
    return body


def read_dispersive_csv(fh):
    body = _read(fh, ("nbar_proxy", "freq_GHz", "state"))
    try:
        return (np.array([float(r[0]) for r in body]), np.array([float(r[1]) for r in body]),
                [_state(r[2].strip()) for r in body])
    except ValueError as exc:
        raise CalibrationError(str(exc)) from exc


def read_stark_csv(fh):
    body = _read(fh, ("power_arb", "delta_wq_GHz"))
    try:
        return np.array([float(r[0]) for r in body]), np.array([float(r[1]) for r in body])
    except ValueError as exc:
        raise CalibrationError(str(exc)) from exc


def read_charge_csv(fh):
    body = _read(fh, ("N_g", "signal"))
    try:
        return np.array([float(r[0]) for r in body]), np.array([float(r[1]) for r in body])
    except ValueError as exc:
        raise CalibrationError(str(exc)) from exc
