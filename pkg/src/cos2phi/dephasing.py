"""Echo dephasing from first-order 1/f flux and charge noise.

The echo filter for a total delay ``tau`` with a finite pi pulse of length
``tau_pi`` is written, with u = omega tau and r = tau_pi / tau, as

    g1 = 16 sin^2((1 + r) u / 4) sin^2((1 - r) u / 4) / u^2,

which equals |1 + e^{iu} - 2 e^{iu/2} cos(r u / 2)|^2 / u^2 and has no 0/0 at
small u. For 1/f noise the dephasing exponent then involves

    J(tau) = int_{w_min}^{w_max} g1(w, tau) dw / w,

which tends to ln 2 when tau_pi = 0 and the band is wide.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicSpline

from .spectrum import fmt
from .units import NoiseEnvironment

TAU_PI = 300e-9
OMEGA_MIN = 2.0 * math.pi * 1e-3
OMEGA_MAX = 2.0 * math.pi * 1e9


class QuadratureError(ArithmeticError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class EchoKernel:
    """Echo-sequence settings: pi-pulse length [s] and integration band [rad/s]."""

    tau_pi: float = TAU_PI
    omega_min: float = OMEGA_MIN
    omega_max: float = OMEGA_MAX

    def __post_init__(self):
        if self.tau_pi < 0:
            raise ValueError("tau_pi must be non-negative")
        if not 0 < self.omega_min < self.omega_max:
            raise ValueError("need 0 < omega_min < omega_max")

    def check(self, tau: float):
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        if self.tau_pi > tau:
            raise ValueError(f"tau_pi={self.tau_pi} exceeds tau={tau}")


def echo_kernel(omega, tau: float, tau_pi: float = TAU_PI):
    """Echo filter function g1(omega, tau) (dimensionless, >= 0)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    u = np.abs(np.asarray(omega, dtype=float)) * tau
    r = tau_pi / tau
    with np.errstate(invalid="ignore", divide="ignore"):
        g = 16.0 * np.sin((1 + r) * u / 4) ** 2 * np.sin((1 - r) * u / 4) ** 2 / u**2
    small = u < 1e-6
    if np.any(small):
        g = np.where(small, (u / 4) ** 2 * (1 - r * r) ** 2, g)
    return g if g.ndim else float(g)


# ---------------------------------------------------------------------------
# the kernel integral J(tau)

_U_LOG_END = 100.0  # log-variable quadrature below this u
_U_OSC_END = 2000.0  # equal-width panels up to here, averaged tail beyond
_N_OSC_PANELS = 60


def _tail(r: float, u0: float, u1: float) -> float:
    """Slow part of the integrand beyond u0; fast oscillations average out (O(u0^-3))."""
    if u1 <= u0:
        return 0.0
    inv = 0.5 / u0**2 - 0.5 / u1**2
    if r == 0:
        return 6.0 * inv
    # 2 cos(r u) / u^3 with an oscillation-weighted rule
    val, _ = integrate.quad(lambda u: 2.0 / u**3, u0, u1, weight="cos", wvar=r, limlst=100)
    return 4.0 * inv + val


_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def _panels(tau: float, tau_pi: float, a: float, b: float, n: int) -> float:
    """Gauss-Legendre on n equal panels of g1(u)/u over [a, b]."""
    edges = np.linspace(a, b, n + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    u = mid[:, None] + half[:, None] * _GL_X[None, :]
    g = echo_kernel(u / tau, tau, tau_pi) / u
    return float(np.sum(half * (g @ _GL_W)))


@functools.lru_cache(maxsize=4096)
def _echo_integral(tau: float, tau_pi: float, omega_min: float, omega_max: float, epsrel: float) -> float:
    r = tau_pi / tau
    u_lo, u_hi = omega_min * tau, omega_max * tau

    def g_over_u_log(s):  # integrand in s = ln u
        return float(echo_kernel(math.exp(s) / tau, tau, tau_pi))

    total = 0.0
    edges = [u_lo] + [x for x in (1e-2, 1.0, 10.0, _U_LOG_END) if u_lo < x < u_hi] + [min(u_hi, _U_LOG_END)]
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        val, err = integrate.quad(g_over_u_log, math.log(a), math.log(b), epsabs=0, epsrel=epsrel, limit=400)
        if err > 1e3 * epsrel * max(abs(val), 1e-300):
            raise QuadratureError(f"kernel integral did not converge on [{a}, {b}]", partial=total + val)
        total += val
    if u_hi > _U_LOG_END:
        stop = min(u_hi, _U_OSC_END)
        total += _panels(tau, tau_pi, _U_LOG_END, stop, _N_OSC_PANELS)
        total += _tail(r, stop, u_hi)
    return total


def echo_integral(tau: float, kernel: EchoKernel = EchoKernel(), epsrel: float = 1e-9) -> float:
    """J(tau) = int g1(w, tau) dw / w over the configured band."""
    kernel.check(tau)
    return _echo_integral(float(tau), kernel.tau_pi, kernel.omega_min, kernel.omega_max, epsrel)


class _EchoTable:
    """Spline of J over log(tau) for repeated envelope evaluations."""

    def __init__(self, kernel: EchoKernel, tau_min: float, tau_max: float, n: int = 161):
        tau_min = max(tau_min, kernel.tau_pi * 1.0001, 1e-12)
        self.lo, self.hi = math.log(tau_min), math.log(max(tau_max, 1.01 * tau_min))
        x = np.linspace(self.lo, self.hi, n)
        self.spline = CubicSpline(x, [echo_integral(math.exp(v), kernel) for v in x])

    def __call__(self, tau):
        x = np.log(np.asarray(tau, float))
        if np.any(x < self.lo - 1e-12) or np.any(x > self.hi + 1e-12):
            raise ValueError("tau outside tabulated range")
        return self.spline(x)


@functools.lru_cache(maxsize=32)
def _table(kernel: EchoKernel, lo_decade: int, hi_decade: int) -> _EchoTable:
    return _EchoTable(kernel, 10.0**lo_decade, 10.0**hi_decade, n=40 * (hi_decade - lo_decade) + 1)


def _J(tau: np.ndarray, kernel: EchoKernel) -> np.ndarray:
    lo = math.floor(math.log10(max(float(np.min(tau)), kernel.tau_pi * 1.0001, 1e-12)))
    hi = math.ceil(math.log10(float(np.max(tau))) + 1e-12)
    if np.min(tau) < kernel.tau_pi:
        raise ValueError("tau shorter than tau_pi")
    return _table(kernel, lo, max(hi, lo + 1))(tau)


# ---------------------------------------------------------------------------
# envelopes


def _prefactor(kind: str, sensitivity: float, amplitude: float) -> float:
    """Coefficient c with exponent = c tau^2 J(tau)."""
    if kind == "flux":
        # (2 pi / Phi0)^2 S_PhiPhi = (2 pi)^2 A^2 (2 pi Hz) / w with A in Phi0/sqrt(Hz)
        return sensitivity**2 * (2 * math.pi) ** 2 * amplitude**2 * 2 * math.pi
    if kind == "charge":
        # S_QQ / (2e)^2 = A^2 (2 pi Hz) / (4 w) with A in e/sqrt(Hz)
        return sensitivity**2 * amplitude**2 * 2 * math.pi / 4.0
    raise ValueError(f"kind must be 'flux' or 'charge', got {kind!r}")


def _envelope(tau, c: float, kernel: EchoKernel, exact: bool):
    tau = np.atleast_1d(np.asarray(tau, float))
    if not np.all(np.isfinite(tau)) or np.any(tau <= 0):
        raise ValueError("tau must be positive and finite")
    if c == 0:
        return np.ones_like(tau)
    J = np.array([echo_integral(t, kernel) for t in tau]) if exact else _J(tau, kernel)
    return np.exp(-c * tau**2 * J)


def envelope_flux(tau, dwq_dphi: float, env: NoiseEnvironment, kernel: EchoKernel = EchoKernel(), exact: bool = True):
    """Echo envelope from first-order 1/f flux noise.

    ``dwq_dphi`` is d(omega_q)/d(phi_ext) in rad/s per rad.
    """
    if not math.isfinite(dwq_dphi):
        raise ValueError("sensitivity must be finite")
    return _envelope(tau, _prefactor("flux", dwq_dphi, env.A_Phi), kernel, exact)


def envelope_charge(tau, dwq_dNg: float, env: NoiseEnvironment, kernel: EchoKernel = EchoKernel(), exact: bool = True):
    """Echo envelope from first-order 1/f charge noise; ``dwq_dNg`` in rad/s per Cooper pair."""
    if not math.isfinite(dwq_dNg):
        raise ValueError("sensitivity must be finite")
    return _envelope(tau, _prefactor("charge", dwq_dNg, env.A_Q), kernel, exact)


def gaussian_rate_estimate(kind: str, sensitivity: float, amplitude: float) -> float:
    """Gamma_phi for an instantaneous pi pulse and an infinite band: sqrt(c ln 2)."""
    return math.sqrt(_prefactor(kind, sensitivity, amplitude) * math.log(2.0))


# ---------------------------------------------------------------------------
# T2 and fits


def combine_T2(Gamma_nu: float, Gamma_phi: float) -> float:
    """1/e time of exp(-Gamma_nu t - (Gamma_phi t)^2).

    Evaluated as 2 / (sqrt(Gamma_nu^2 + 4 Gamma_phi^2) + Gamma_nu), which is the
    same root without cancellation when Gamma_phi is small.
    """
    if Gamma_nu < 0 or Gamma_phi < 0:
        raise ValueError("rates must be non-negative")
    if Gamma_nu == 0 and Gamma_phi == 0:
        raise ValueError("both rates are zero; T2 is infinite")
    return 2.0 / (math.hypot(Gamma_nu, 2.0 * Gamma_phi) + Gamma_nu)


@dataclass(frozen=True)
class EnvelopeFit:
    Gamma_nu: float
    Gamma_phi: float
    T2_echo: float
    residual: float  # rms of the fit residuals
    amplitude: float = 1.0

    def report(self) -> str:
        keys = ("Gamma_nu_per_s", "Gamma_phi_per_s", "T2_echo_s", "residual")
        vals = (self.Gamma_nu, self.Gamma_phi, self.T2_echo, self.residual)
        return "".join(f"{k}={fmt(float(v))}\n" for k, v in zip(keys, vals))


def fit_envelope(tau, signal, Gamma_nu: float | None = None, fit_amplitude: bool = True) -> EnvelopeFit:
    """Least-squares fit of a exp(-Gamma_nu t - (Gamma_phi t)^2).

    With ``Gamma_nu`` given it is held fixed and only Gamma_phi (and the
    amplitude) are free.
    """
    tau = np.asarray(tau, float)
    y = np.asarray(signal, float)
    if tau.shape != y.shape or tau.size < 5:
        raise FitError("need at least 5 (tau, signal) samples")
    if np.ptp(y) <= 1e-12 * max(np.max(np.abs(y)), 1e-300):
        raise FitError("signal is constant; decay rates are undetermined")
    T = float(np.max(tau))
    # rates scaled by the record length so the optimiser works on O(1) numbers
    free_nu = Gamma_nu is None

    def unpack(x):
        i = 0
        a = x[i] if fit_amplitude else 1.0
        i += fit_amplitude
        nu = x[i] / T if free_nu else Gamma_nu
        i += free_nu
        return a, nu, x[i] / T

    def resid(x):
        a, nu, ph = unpack(x)
        return a * np.exp(-nu * tau - (ph * tau) ** 2) - y

    # start from a log-linear estimate of the overall decay
    pos = y > 0.05 * np.max(y)
    slope = -np.polyfit(tau[pos], np.log(y[pos] / np.max(y)), 1)[0] if pos.sum() >= 2 else 1.0 / T
    scale = max(slope * T, 1e-3)
    x0 = ([float(np.max(y))] if fit_amplitude else []) + ([0.5 * scale] if free_nu else []) + [0.5 * scale]
    lo = ([0.0] if fit_amplitude else []) + ([0.0] if free_nu else []) + [0.0]
    best = None
    for start in (x0, [v * 0.1 if i >= fit_amplitude else v for i, v in enumerate(x0)]):
        res = optimize.least_squares(resid, start, bounds=(lo, np.inf), xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if best is None or res.cost < best.cost:
            best = res
    a, nu, ph = unpack(best.x)
    return EnvelopeFit(float(nu), float(ph), combine_T2(nu, ph), float(np.sqrt(np.mean(best.fun**2))), float(a))


@dataclass(frozen=True)
class GaussianFit:
    Gamma_phi: float
    r_squared: float
    n_points: int


def gaussian_rate(tau, f, window=(0.05, 0.95)) -> GaussianFit:
    """Fit f = exp(-(Gamma tau)^2) using only samples with f inside ``window``."""
    tau = np.asarray(tau, float)
    f = np.asarray(f, float)
    sel = (f >= window[0]) & (f <= window[1])
    if sel.sum() < 3:
        raise FitError("fewer than 3 samples inside the fit window")
    t, y = tau[sel], f[sel]
    g0 = math.sqrt(np.mean(-np.log(y) / t**2))
    T = 1.0 / g0
    res = optimize.least_squares(lambda x: np.exp(-(x[0] / T * t) ** 2) - y, [1.0], xtol=1e-15, ftol=1e-15)
    ss_res = float(np.sum(res.fun**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return GaussianFit(float(res.x[0] / T), 1.0 - ss_res / ss_tot, int(sel.sum()))


def gaussian_rate_for(
    kind: str, sensitivity: float, amplitude: float, kernel: EchoKernel = EchoKernel(), n_tau: int = 60
) -> float:
    """Gamma_phi obtained by computing the echo envelope and fitting a Gaussian to it."""
    g0 = gaussian_rate_estimate(kind, sensitivity, amplitude)
    if g0 == 0:
        return 0.0
    tau = np.linspace(0.1, 3.0, n_tau) / g0
    tau = tau[tau >= kernel.tau_pi]
    if tau.size < 5:
        raise FitError("decay faster than the pi pulse; envelope undefined")
    f = _envelope(tau, _prefactor(kind, sensitivity, amplitude), kernel, exact=False)
    return gaussian_rate(tau, f).Gamma_phi


@dataclass
class NoiseFit:
    amplitude: float
    kind: str
    mode: str
    residuals: np.ndarray
    used: np.ndarray  # mask of bias points that entered the fit


def fit_noise_amplitude(
    gamma_phi: Sequence[float],
    sensitivities: Sequence[float],
    kind: str = "flux",
    kernel: EchoKernel = EchoKernel(),
    mode: str = "fit",
) -> NoiseFit:
    """Noise amplitude from Gaussian dephasing rates versus bias.

    ``mode="fit"`` minimises the squared relative residuals of Gamma_phi;
    ``mode="bound"`` returns the largest amplitude whose predicted rates do
    not exceed any observation. Points with zero sensitivity are skipped.
    """
    g = np.asarray(gamma_phi, float)
    d = np.abs(np.asarray(sensitivities, float))
    if g.shape != d.shape:
        raise ValueError("gamma_phi and sensitivities differ in length")
    used = d > 0
    if used.sum() < 3:
        raise FitError("need at least 3 bias points with non-zero sensitivity")
    if mode not in ("fit", "bound"):
        raise ValueError("mode must be 'fit' or 'bound'")
    gu, du = g[used], d[used]

    def model(A):
        return np.array([gaussian_rate_for(kind, s, A, kernel) for s in du])

    # the analytic estimate is proportional to A; start from it
    unit = np.array([gaussian_rate_estimate(kind, s, 1.0) for s in du])
    per_point = gu / unit
    if mode == "bound":
        amps = []
        for gi, si, a0 in zip(gu, du, per_point):
            f = lambda lnA: math.log(gaussian_rate_for(kind, si, math.exp(lnA), kernel) / gi)
            amps.append(math.exp(optimize.brentq(f, math.log(a0) - 2, math.log(a0) + 2, xtol=1e-12)))
        A = float(min(amps))
    else:
        A0 = float(np.exp(np.mean(np.log(per_point))))
        obj = lambda lnA: float(np.sum((model(math.exp(lnA)) / gu - 1.0) ** 2))
        res = optimize.minimize_scalar(obj, bracket=(math.log(A0) - 0.3, math.log(A0) + 0.3),
                                       options={"xtol": 1e-10})
        A = float(math.exp(res.x))
    return NoiseFit(A, kind, mode, model(A) - gu, used)


# ---------------------------------------------------------------------------
# output

ENVELOPE_COLUMNS = ["tau_s", "f"]


def write_envelope_csv(tau, f, fh, header_lines: Sequence[str] = ()) -> None:
    for line in header_lines:
        fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ENVELOPE_COLUMNS)
    for t, v in zip(np.asarray(tau, float), np.asarray(f, float)):
        w.writerow([fmt(float(t)), fmt(float(v))])
