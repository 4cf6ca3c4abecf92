"""Assembly of the cos(2 phi), effective one-mode and three-mode Hamiltonians."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import scipy.sparse as sps

from .operators import ChargeBasis, OscillatorBasis, charge_ops, kron3, oscillator_ops
from .units import BiasPoint, CircuitParams, EffectiveParams


class Model(str, Enum):
    cos2phi = "cos2phi"
    one_mode = "one-mode"
    three_mode = "three-mode"


@dataclass(frozen=True)
class Truncation:
    n_max: int = 12
    n_fock: int = 12
    phi_zpf: float | None = None  # None -> default_phi_zpf(params)

    def as_dict(self) -> dict[str, Any]:
        return {"n_max": self.n_max, "n_fock": self.n_fock, "phi_zpf": self.phi_zpf}


@dataclass
class Hamiltonian:
    """A Hermitian matrix in GHz together with the observables of its basis.

    ``matrix`` is dense for the single-mode models and CSR for the
    three-mode model. ``operators`` maps names to matrices in the same basis;
    ``operators["parity"]`` is the conserved parity of the symmetric point.
    """

    matrix: Any
    model: Model
    bias: BiasPoint
    truncation: Truncation
    operators: dict[str, Any] = field(repr=False)
    params: Any = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if sps.issparse(self.matrix) else np.asarray(self.matrix)


def build_cos2phi(E_C: float, E_J2: float, bias: BiasPoint, basis: ChargeBasis) -> Hamiltonian:
    """4 E_C (N - N_g)^2 + E_J2 cos(2 phi)."""
    ops = charge_ops(basis)
    Nn = basis.charges - bias.N_g_eff
    H = np.diag(4.0 * E_C * Nn**2).astype(complex) + E_J2 * ops["cos_2phi"]
    observables = {k: ops[k] for k in ("N", "cos_phi", "sin_phi", "cos_2phi", "parity")}
    return Hamiltonian(
        H, Model.cos2phi, bias, Truncation(n_max=basis.n_max), observables,
        params={"E_C": E_C, "E_J2": E_J2},
    )


def build_one_mode(p: EffectiveParams, bias: BiasPoint, basis: ChargeBasis) -> Hamiltonian:
    """cos(2 phi) Hamiltonian with single-pair tunnelling and linearised flux term."""
    h = build_cos2phi(p.E_C, p.E_J2, bias, basis)
    ops = charge_ops(basis)
    H = h.matrix - p.E_J1 * ops["cos_phi"] - p.E_Jphi * (bias.phi_ext - math.pi) * ops["sin_phi"]
    return Hamiltonian(H, Model.one_mode, bias, h.truncation, h.operators, params=p)


def default_phi_zpf(p: CircuitParams) -> float:
    """Zero-point phase spread for the Sigma and Delta oscillators.

    Geometric mean of the spread set by the inductor alone,
    (E_CJ / 2 E_L)^(1/4), and the one including the junction curvature,
    (E_CJ / 2 (E_L + E_J))^(1/4).
    """
    loose = (p.E_CJ / (2.0 * p.E_L)) ** 0.25
    tight = (p.E_CJ / (2.0 * (p.E_L + p.E_J))) ** 0.25
    return math.sqrt(loose * tight)


def _three_mode_parts(p: CircuitParams, bias: BiasPoint, tr: Truncation):
    """Energy-independent operator terms and observables of the three-mode model.

    H = E_CS T_CS + E_CJ (T_CJ + dCJ T_dCJ) + E_L (T_L + dL T_dL) + E_J (T_J + dEJ T_dJ).
    """
    cb = ChargeBasis(tr.n_max)
    ob = OscillatorBasis(tr.n_fock, tr.phi_zpf)
    isl = charge_ops(cb)
    osc = oscillator_ops(ob)

    I1 = sps.identity(cb.dim, format="csr")
    I2 = np.eye(ob.dim)
    K = lambda a, b, c: kron3(sps.csr_matrix(a), sps.csr_matrix(b), sps.csr_matrix(c), sparse=True)

    Nn = sps.diags(cb.charges - bias.N_g_eff)
    x, n = osc["phi"], osc["n"]
    cx, sx = osc["cos_phi"], osc["sin_phi"]
    c0, s0 = math.cos(bias.phi_ext / 2.0), math.sin(bias.phi_ext / 2.0)
    cos_d = c0 * cx - s0 * sx
    sin_d = s0 * cx + c0 * sx
    n2 = n @ n
    x2 = x @ x

    terms = {
        "CS": 4.0 * (K(Nn @ Nn, I2, I2) + 2.0 * K(Nn, n, I2) + K(I1, n2, I2)),
        "CJ": 2.0 * (K(I1, n2, I2) + K(I1, I2, n2)),
        "L": K(I1, x2, I2) + K(I1, I2, x2),
        # -2 cos(phi_D) cos(phi - phi_S)
        "J": -2.0 * (K(isl["cos_phi"], cx, cos_d) + K(isl["sin_phi"], sx, cos_d)),
        # arm asymmetry, per unit relative difference
        "dCJ": -4.0 * K(I1, n, n),
        "dL": -1.0 * K(I1, x, x),
        # -2 sin(phi_D) sin(phi - phi_S); see notes on the sign convention
        "dJ": -2.0 * (K(isl["sin_phi"], cx, sin_d) - K(isl["cos_phi"], sx, sin_d)),
    }
    Nfull = K(isl["N"], I2, I2)
    n_sigma = K(I1, n, I2)
    observables = {
        "N": Nfull,
        "n_sigma": n_sigma,
        "n_delta": K(I1, I2, n),
        "phi_sigma": K(I1, x, I2),
        "phi_delta": K(I1, I2, x) + (bias.phi_ext / 2.0) * sps.identity(Nfull.shape[0], format="csr"),
        "island_charge": (Nfull + n_sigma).tocsr(),
        "sin_phi": K(isl["sin_phi"], I2, I2),
        "parity": K(isl["parity"], I2, osc["parity"]),
    }
    return terms, observables


def _resolve(p: CircuitParams, truncation: Truncation | None) -> Truncation:
    tr = truncation or Truncation()
    zpf = tr.phi_zpf if tr.phi_zpf is not None else default_phi_zpf(p)
    return Truncation(tr.n_max, tr.n_fock, zpf)


def _assemble(p: CircuitParams, T: dict):
    H = p.E_CS * T["CS"] + p.E_CJ * T["CJ"] + p.E_L * T["L"] + p.E_J * T["J"]
    if p.dCJ_over_CJ:
        H = H + p.dCJ_over_CJ * p.E_CJ * T["dCJ"]
    if p.dL_over_L:
        H = H + p.dL_over_L * p.E_L * T["dL"]
    if p.dEJ_over_EJ:
        H = H + p.dEJ_over_EJ * p.E_J * T["dJ"]
    return (0.5 * (H + H.conj().T)).tocsr()


def build_three_mode(
    p: CircuitParams,
    bias: BiasPoint,
    truncation: Truncation | None = None,
) -> Hamiltonian:
    """Three-mode KITE Hamiltonian, sparse, in GHz.

    The Delta oscillator is expanded around phi_ext / 2, i.e. its Fock-space
    phase operator is x = phi_Delta - phi_ext / 2. At phi_ext = pi and zero
    asymmetry, exp(i pi N) (x) 1 (x) (Fock parity of Delta) commutes with H.
    """
    tr = _resolve(p, truncation)
    T, observables = _three_mode_parts(p, bias, tr)
    return Hamiltonian(_assemble(p, T), Model.three_mode, bias, tr, observables, params=p)


THREE_MODE_FIT_PARAMS = ("E_J", "E_CJ", "E_L", "E_CS", "epsilon")


def three_mode_derivatives(p: CircuitParams, bias: BiasPoint, truncation: Truncation | None = None):
    """Hamiltonian and dH/d(E_J, E_CJ, E_L, E_CS, epsilon) at a fixed basis.

    ``epsilon`` is the single junction asymmetry of
    :meth:`CircuitParams.with_asymmetry`; the basis (including the oscillator
    spread) is held fixed so the derivatives are exact for the truncated model.
    """
    tr = _resolve(p, truncation)
    T, observables = _three_mode_parts(p, bias, tr)
    eps = p.epsilon
    sym = lambda A: (0.5 * (A + A.conj().T)).tocsr()
    dH = {
        "E_J": sym(T["J"] + eps * T["dJ"]),
        "E_CJ": sym(T["CJ"] + eps * T["dCJ"]),
        "E_L": sym(T["L"]),
        "E_CS": sym(T["CS"]),
        "epsilon": sym(p.E_CJ * T["dCJ"] + p.E_J * T["dJ"]),
    }
    H = Hamiltonian(_assemble(p, T), Model.three_mode, bias, tr, observables, params=p)
    return H, dH


def build(model: Model | str, params, bias: BiasPoint, truncation: Truncation | None = None) -> Hamiltonian:
    """Dispatch on the model tag. ``params`` is EffectiveParams (single-mode) or CircuitParams."""
    model = Model(model)
    tr = truncation or Truncation()
    if model is Model.three_mode:
        return build_three_mode(params, bias, tr)
    basis = ChargeBasis(tr.n_max)
    if model is Model.one_mode:
        return build_one_mode(params, bias, basis)
    if isinstance(params, EffectiveParams):
        return build_cos2phi(params.E_C, params.E_J2, bias, basis)
    return build_cos2phi(params["E_C"], params["E_J2"], bias, basis)
