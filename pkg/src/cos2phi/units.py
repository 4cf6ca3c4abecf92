"""Physical constants, parameter containers and unit conversions.

Energies are stored as E/h in GHz, rates are returned in 1/s, phases in
radians. Capacitances are reported in fF and inductances in nH.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# CODATA 2018 (exact SI values where defined)
H_PLANCK = 6.62607015e-34  # J s
HBAR = H_PLANCK / (2.0 * math.pi)
E_CHARGE = 1.602176634e-19  # C
K_BOLTZMANN = 1.380649e-23  # J/K
PHI0 = H_PLANCK / (2.0 * E_CHARGE)  # Wb
R_Q = H_PLANCK / (2.0 * E_CHARGE) ** 2  # superconducting resistance quantum, Ohm

GHZ = 1e9


class ParameterError(ValueError):
    """Raised for out-of-domain physical parameters or malformed parameter files."""


def ghz_to_joule(e_ghz: float) -> float:
    return e_ghz * GHZ * H_PLANCK


def joule_to_ghz(e_joule: float) -> float:
    return e_joule / (H_PLANCK * GHZ)


def ghz_to_kelvin(e_ghz: float) -> float:
    return ghz_to_joule(e_ghz) / K_BOLTZMANN


def kelvin_to_ghz(t_kelvin: float) -> float:
    return joule_to_ghz(t_kelvin * K_BOLTZMANN)


def ghz_to_angular(f_ghz: float) -> float:
    """E/h in GHz -> angular frequency E/hbar in rad/s."""
    return 2.0 * math.pi * f_ghz * GHZ


def angular_to_ghz(omega: float) -> float:
    return omega / (2.0 * math.pi * GHZ)


def thermal_coth(omega: float, T: float) -> float:
    """coth(hbar |omega| / 2 k_B T).

    ``omega`` is an angular frequency in rad/s, ``T`` in kelvin. Large
    arguments saturate to exactly 1.
    """
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    if omega == 0:
        raise ParameterError("thermal_coth is singular at omega = 0")
    x = HBAR * abs(omega) / (2.0 * K_BOLTZMANN * T)
    if x > 20.0:
        # coth(x) - 1 ~ 2 exp(-2x) < 1e-17
        return 1.0
    return 1.0 / math.tanh(x)


def shunt_capacitance(E_C: float) -> float:
    """Capacitance C = e^2 / (2 E_C) in fF for a charging energy in GHz."""
    if not E_C > 0:
        raise ParameterError(f"charging energy must be positive, got {E_C}")
    return E_CHARGE**2 / (2.0 * ghz_to_joule(E_C)) * 1e15


def charging_energy(C_fF: float) -> float:
    """Inverse of :func:`shunt_capacitance` (GHz)."""
    if not C_fF > 0:
        raise ParameterError(f"capacitance must be positive, got {C_fF}")
    return joule_to_ghz(E_CHARGE**2 / (2.0 * C_fF * 1e-15))


def flux_inductance(E_Jphi: float) -> float:
    """Inductance Phi0^2 / ((2 pi)^2 E) in nH for an inductive energy in GHz."""
    if not E_Jphi > 0:
        raise ParameterError(f"inductive energy must be positive, got {E_Jphi}")
    return PHI0**2 / ((2.0 * math.pi) ** 2 * ghz_to_joule(E_Jphi)) * 1e9


def inductive_energy(L_nH: float) -> float:
    """Inverse of :func:`flux_inductance` (GHz)."""
    if not L_nH > 0:
        raise ParameterError(f"inductance must be positive, got {L_nH}")
    return joule_to_ghz(PHI0**2 / ((2.0 * math.pi) ** 2 * L_nH * 1e-9))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class CircuitParams:
    """Lumped-element parameters of the three-mode KITE circuit (GHz).

    ``dCJ_over_CJ``, ``dL_over_L`` and ``dEJ_over_EJ`` are the relative
    half-differences between the two arms. Use :meth:`with_asymmetry` for the
    usual single-parameter description.
    """

    E_J: float
    E_CJ: float
    E_L: float
    E_CS: float
    dCJ_over_CJ: float = 0.0
    dL_over_L: float = 0.0
    dEJ_over_EJ: float = 0.0

    def __post_init__(self):
        for name in ("E_J", "E_CJ", "E_L", "E_CS"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be positive and finite, got {v}")
        for name in ("dCJ_over_CJ", "dL_over_L", "dEJ_over_EJ"):
            v = getattr(self, name)
            if not (math.isfinite(v) and abs(v) < 1):
                raise ParameterError(f"|{name}| must be < 1, got {v}")

    @classmethod
    def with_asymmetry(
        cls, E_J: float, E_CJ: float, E_L: float, E_CS: float, epsilon: float = 0.0
    ) -> "CircuitParams":
        """Junction-area asymmetry at fixed plasma frequency; inductors symmetric."""
        return cls(E_J, E_CJ, E_L, E_CS, epsilon, 0.0, epsilon)

    @property
    def epsilon(self) -> float:
        if self.dCJ_over_CJ != self.dEJ_over_EJ or self.dL_over_L != 0:
            raise ParameterError("parameters are not of single-epsilon form")
        return self.dEJ_over_EJ

    @property
    def plasma_frequency(self) -> float:
        """sqrt(8 E_J E_CJ) in GHz."""
        return math.sqrt(8.0 * self.E_J * self.E_CJ)

    def scaled(self, factor: float) -> "CircuitParams":
        return replace(
            self,
            E_J=self.E_J * factor,
            E_CJ=self.E_CJ * factor,
            E_L=self.E_L * factor,
            E_CS=self.E_CS * factor,
        )


@dataclass(frozen=True)
class EffectiveParams:
    """Parameters of the effective single-mode cos(2 phi) Hamiltonian (GHz)."""

    E_J2: float
    E_J1: float
    E_Jphi: float
    E_C: float

    def __post_init__(self):
        if not (self.E_J2 > 0 and self.E_C > 0):
            raise ParameterError("E_J2 and E_C must be positive")
        if not (self.E_J1 >= 0 and self.E_Jphi >= 0):
            raise ParameterError("E_J1 and E_Jphi must be non-negative")

    @property
    def ratio(self) -> float:
        """Transmon-regime ratio E_J2 / E_C."""
        return self.E_J2 / self.E_C

    @property
    def plasmon_frequency(self) -> float:
        """Approximate plasmon frequency sqrt(32 E_J2 E_C) in GHz."""
        return math.sqrt(32.0 * self.E_J2 * self.E_C)


class QPParity(str, Enum):
    even = "even"
    odd = "odd"


@dataclass(frozen=True)
class BiasPoint:
    phi_ext: float = math.pi
    N_g: float = 0.0
    qp_parity: QPParity = QPParity.even

    def __post_init__(self):
        object.__setattr__(self, "qp_parity", QPParity(self.qp_parity))
        if not (math.isfinite(self.phi_ext) and math.isfinite(self.N_g)):
            raise ParameterError("bias point must be finite")

    @property
    def N_g_eff(self) -> float:
        """Offset charge including the half-charge shift of odd quasiparticle parity."""
        return self.N_g + (0.5 if self.qp_parity is QPParity.odd else 0.0)

    @property
    def flux_quanta(self) -> float:
        """External flux in units of Phi0."""
        return self.phi_ext / (2.0 * math.pi)


@dataclass(frozen=True)
class NoiseEnvironment:
    """Temperature, quality factors, 1/f amplitudes and bias-line couplings.

    Units: T [K], A_Phi [Phi0/sqrt(Hz)], A_Q [e/sqrt(Hz)], C_g [fF], M [nH],
    R [Ohm].
    """

    T: float = 0.043
    Q_cap: float = 1.5e6
    Q_ind: float = 5e8
    A_Phi: float = 5.6e-6
    A_Q: float = 2e-3
    C_g: float = 0.16
    M: float = 2.1e-3
    R: float = 50.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"{f.name} must be positive and finite, got {v}")


# Reference values of the device.
TABLE_I_CIRCUIT = CircuitParams.with_asymmetry(16.83, 4.82, 1.27, 0.072, 0.03)
TABLE_I_EFFECTIVE = EffectiveParams(E_J2=1.14, E_J1=0.07, E_Jphi=1.92, E_C=0.052)


# ---------------------------------------------------------------------------
# parameter files

_SECTIONS = {
    "circuit": CircuitParams,
    "effective": EffectiveParams,
    "noise": NoiseEnvironment,
    "bias": BiasPoint,
}


@dataclass(frozen=True)
class ParameterSet:
    circuit: CircuitParams | None = None
    effective: EffectiveParams | None = None
    noise: NoiseEnvironment | None = None
    bias: BiasPoint | None = None


def _build(section: str, values: Mapping[str, Any]):
    cls = _SECTIONS[section]
    if section == "circuit" and "epsilon" in values:
        values = dict(values)
        eps = values.pop("epsilon")
        clash = {"dCJ_over_CJ", "dL_over_L", "dEJ_over_EJ"} & values.keys()
        if clash:
            raise ParameterError(f"'epsilon' cannot be combined with {sorted(clash)}")
        values.update(dCJ_over_CJ=eps, dL_over_L=0.0, dEJ_over_EJ=eps)
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ParameterError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ParameterError(f"[{section}]: {exc}") from exc


def parse_parameters(data: Mapping[str, Any]) -> ParameterSet:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ParameterError(f"unknown sections: {sorted(unknown)}")
    built = {}
    for section, values in data.items():
        if not isinstance(values, Mapping):
            raise ParameterError(f"section [{section}] must be a table")
        built[section] = _build(section, values)
    return ParameterSet(**built)


def load_parameters(path: str | Path) -> ParameterSet:
    """Read a TOML parameter file with [circuit], [effective], [noise], [bias] tables."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParameterError(f"{path}: {exc}") from exc
    return parse_parameters(data)


def dump_parameters(ps: ParameterSet) -> str:
    """Serialise a parameter set back to TOML text."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(ps, section)
        if obj is None:
            continue
        lines.append(f"[{section}]")
        for key, value in asdict(obj).items():
            if isinstance(value, Enum):
                lines.append(f'{key} = "{value.value}"')
            else:
                lines.append(f"{key} = {float(value)!r}")
        lines.append("")
    return "\n".join(lines)
