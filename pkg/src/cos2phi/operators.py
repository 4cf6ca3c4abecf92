"""Operator matrices in truncated bases.

Island mode: compact charge basis N = -n_max..n_max. KITE internal modes:
harmonic-oscillator Fock bases. Products are ordered island (slowest),
Sigma, Delta (fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps


@dataclass(frozen=True)
class ChargeBasis:
    n_max: int = 12

    def __post_init__(self):
        if int(self.n_max) != self.n_max or self.n_max < 2:
            raise ValueError(f"charge cutoff must be an integer >= 2, got {self.n_max}")

    @property
    def dim(self) -> int:
        return 2 * self.n_max + 1

    @property
    def charges(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1, dtype=float)


@dataclass(frozen=True)
class OscillatorBasis:
    n_fock: int = 12
    phi_zpf: float = 1.0

    def __post_init__(self):
        if int(self.n_fock) != self.n_fock or self.n_fock < 4:
            raise ValueError(f"Fock cutoff must be an integer >= 4, got {self.n_fock}")
        if not self.phi_zpf > 0:
            raise ValueError("phi_zpf must be positive")

    @property
    def dim(self) -> int:
        return self.n_fock

    @property
    def n_zpf(self) -> float:
        return 0.5 / self.phi_zpf


def charge_ops(basis: ChargeBasis) -> dict[str, np.ndarray]:
    """N, cos(phi), sin(phi), cos(2 phi), sin(2 phi) and the parity exp(i pi N).

    ``exp(i phi)`` raises the charge by one, so that [phi, N] = i.
    """
    d = basis.dim
    N = basis.charges
    up1 = np.eye(d, k=-1)
    up2 = np.eye(d, k=-2)
    return {
        "N": np.diag(N),
        "exp_iphi": up1,
        "cos_phi": 0.5 * (up1 + up1.T),
        "sin_phi": -0.5j * (up1 - up1.T),
        "cos_2phi": 0.5 * (up2 + up2.T),
        "sin_2phi": -0.5j * (up2 - up2.T),
        "parity": np.diag(np.where(np.arange(-basis.n_max, basis.n_max + 1) % 2 == 0, 1.0, -1.0)),
    }


def _annihilation(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), k=1)


def hermitian_function(A: np.ndarray, func) -> np.ndarray:
    """f(A) for Hermitian A by spectral decomposition."""
    w, v = np.linalg.eigh(A)
    return (v * func(w)) @ v.conj().T


def oscillator_ops(basis: OscillatorBasis) -> dict[str, np.ndarray]:
    """phi, n, cos(phi), sin(phi) and Fock parity of a truncated oscillator.

    The phase is real symmetric and the charge imaginary antisymmetric, so
    cos/sin stay real.
    """
    if basis.n_fock < 4:
        raise ValueError("n_fock must be >= 4")
    a = _annihilation(basis.n_fock)
    phi = basis.phi_zpf * (a + a.T)
    n = 1j / (2.0 * basis.phi_zpf) * (a.T - a)
    w, v = np.linalg.eigh(phi)
    cos = (v * np.cos(w)) @ v.T
    sin = (v * np.sin(w)) @ v.T
    # symmetrise away rounding so Hermiticity holds bit-exactly
    cos = 0.5 * (cos + cos.T)
    sin = 0.5 * (sin + sin.T)
    parity = np.diag((-1.0) ** np.arange(basis.n_fock))
    return {"phi": phi, "n": n, "cos_phi": cos, "sin_phi": sin, "parity": parity}


def kron3(A, B, C, sparse: bool = False):
    """A (x) B (x) C, island index slowest and Delta index fastest."""
    for m in (A, B, C):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"kron3 factors must be square, got shape {m.shape}")
    if sparse:
        return sps.kron(sps.kron(A, B, format="csr"), C, format="csr")
    return np.kron(np.kron(A, B), C)
