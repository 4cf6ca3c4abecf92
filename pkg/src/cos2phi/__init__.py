"""Spectrum, decoherence and readout analysis for cos(2 phi) KITE qubits."""

from .hamiltonians import Hamiltonian, Model, Truncation, build
from .spectrum import LabeledSpectrum, assign_labels, diagonalize, matrix_element, solve
from .units import (
    TABLE_I_CIRCUIT,
    TABLE_I_EFFECTIVE,
    BiasPoint,
    CircuitParams,
    EffectiveParams,
    NoiseEnvironment,
    ParameterError,
    QPParity,
    load_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "BiasPoint",
    "CircuitParams",
    "EffectiveParams",
    "Hamiltonian",
    "LabeledSpectrum",
    "Model",
    "NoiseEnvironment",
    "ParameterError",
    "QPParity",
    "TABLE_I_CIRCUIT",
    "TABLE_I_EFFECTIVE",
    "Truncation",
    "assign_labels",
    "build",
    "diagonalize",
    "load_parameters",
    "matrix_element",
    "solve",
]
