"""Three-state quantum-jump dynamics, readout errors and rate estimation.

States are ordered (0+, 0-, >=1). The generator Q has Q[i, j] = rate j -> i
for i != j and columns summing to zero, so that dP/dt = Q P.

Random streams: the trajectory uses ``Generator(Philox(seed))`` and the
readout misclassification uses the same key advanced by one ``jumped()``
call, so changing the readout model never perturbs the trajectory.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

from .spectrum import fmt
from .units import H_PLANCK, K_BOLTZMANN, GHZ

log = logging.getLogger(__name__)

STATES = ("0p", "0m", "ge1")


class IdentifiabilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generators and readout


def generator(gamma_d: float, gamma_up: float, gamma_down: float) -> np.ndarray:
    """Parity-symmetric generator.

    gamma_d: 0- <-> 0+ (each direction); gamma_up: 0+/0- -> >=1;
    gamma_down: >=1 -> 0+ and >=1 -> 0- (each).
    """
    for name, g in (("gamma_d", gamma_d), ("gamma_up", gamma_up), ("gamma_down", gamma_down)):
        if not (g >= 0 and math.isfinite(g)):
            raise ValueError(f"{name} must be finite and >= 0")
    return np.array([
        [-gamma_d - gamma_up, gamma_d, gamma_down],
        [gamma_d, -gamma_d - gamma_up, gamma_down],
        [gamma_up, gamma_up, -2.0 * gamma_down],
    ])


def validate_generator(Q: np.ndarray, atol: float = 1e-9) -> None:
    Q = np.asarray(Q, float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("generator must be square")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise ValueError("off-diagonal rates must be non-negative")
    scale = max(np.abs(Q).max(), 1.0)
    if np.any(np.abs(Q.sum(axis=0)) > atol * scale):
        raise ValueError("generator columns must sum to zero")


def propagate(Q: np.ndarray, P0, t: float) -> np.ndarray:
    """P(t) = exp(Q t) P0 (scaling-and-squaring Pade via scipy)."""
    P0 = np.asarray(P0, float)
    if np.any(P0 < 0) or abs(P0.sum() - 1.0) > 1e-12:
        raise ValueError("P0 must be a probability vector")
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return P0.copy()
    P = linalg.expm(np.asarray(Q, float) * t) @ P0
    P[(P < 0) & (P > -1e-14)] = 0.0
    return P


def stationary(Q: np.ndarray) -> np.ndarray:
    """Stationary distribution (null vector of Q, normalised)."""
    w, v = np.linalg.eig(Q)
    k = int(np.argmin(np.abs(w)))
    p = np.real(v[:, k])
    return p / p.sum()


def fidelity_matrix(e_d: float, e_p: float) -> np.ndarray:
    """F[measured, true] with doublet-internal error e_d and doublet<->plasmon error e_p."""
    if not (0 <= e_d and 0 <= e_p and e_d + e_p <= 1 and e_p <= 1):
        raise ValueError("error probabilities out of range")
    return np.array([
        [1.0 - e_d - e_p, e_d, 0.5 * e_p],
        [e_d, 1.0 - e_d - e_p, 0.5 * e_p],
        [e_p, e_p, 1.0 - e_p],
    ])


# ---------------------------------------------------------------------------
# simulation


@dataclass
class TelegraphRecord:
    t: np.ndarray  # measurement times [s]
    outcomes: np.ndarray  # indices into STATES
    fidelity: np.ndarray | None = None
    true_states: np.ndarray | None = None
    jump_times: np.ndarray | None = None  # continuous trajectory, first entry 0
    jump_states: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.outcomes = np.asarray(self.outcomes, int)
        if self.t.shape != self.outcomes.shape:
            raise ValueError("times and outcomes differ in length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def dt(self) -> float:
        d = np.diff(self.t)
        if d.size == 0 or np.ptp(d) > 1e-9 * d.mean():
            raise ValueError("record is not uniformly sampled")
        return float(d.mean())

    def __len__(self):
        return len(self.t)


def _streams(seed: int):
    bitgen = np.random.Philox(seed)
    return np.random.Generator(bitgen), np.random.Generator(bitgen.jumped())


def simulate_trajectory(Q: np.ndarray, t_end: float, rng: np.random.Generator, p0=None):
    """Gillespie trajectory on [0, t_end]; returns (jump_times, states)."""
    Q = np.asarray(Q, float)
    validate_generator(Q)
    n = Q.shape[0]
    if p0 is None:
        p0 = stationary(Q) if np.any(Q) else np.eye(n)[0]
    s = int(rng.choice(n, p=np.clip(p0, 0, None) / np.sum(np.clip(p0, 0, None))))
    times, states = [0.0], [s]
    out = -np.diag(Q)
    t = 0.0
    while True:
        rate = out[s]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= t_end:
            break
        probs = Q[:, s].copy()
        probs[s] = 0.0
        s = int(rng.choice(n, p=probs / rate))
        times.append(t)
        states.append(s)
    return np.array(times), np.array(states, dtype=int)


def simulate_telegraph(
    Q: np.ndarray,
    fidelity: np.ndarray,
    n_shots: int,
    dt: float,
    seed: int,
    p0=None,
) -> TelegraphRecord:
    """Continuous-time trajectory read out every ``dt`` with misclassification.

    Starts from the stationary distribution unless ``p0`` is given.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    F = np.asarray(fidelity, float)
    if np.any(F < 0) or np.any(np.abs(F.sum(axis=0) - 1) > 1e-12):
        raise ValueError("fidelity matrix must be column-stochastic")
    traj_rng, readout_rng = _streams(seed)
    t = dt * np.arange(n_shots)
    jt, js = simulate_trajectory(Q, t[-1] + dt, traj_rng, p0)
    true = js[np.searchsorted(jt, t, side="right") - 1]
    # inverse-CDF misclassification, one uniform per shot
    cdf = np.cumsum(F, axis=0)
    u = readout_rng.random(n_shots)
    meas = (u[:, None] > cdf[:, true].T).sum(axis=1)
    meas = np.minimum(meas, F.shape[0] - 1)
    return TelegraphRecord(t, meas, F, true, jt, js)


def dwell_times(record: TelegraphRecord) -> dict[int, np.ndarray]:
    """Completed dwell durations per state from the continuous trajectory."""
    if record.jump_times is None:
        raise ValueError("record has no continuous trajectory")
    d = np.diff(record.jump_times)
    st = record.jump_states[:-1]
    return {s: d[st == s] for s in range(3)}


# ---------------------------------------------------------------------------
# estimation


def lag_counts(outcomes: np.ndarray, lags: Sequence[int], n_states: int = 3) -> np.ndarray:
    """C[l, i, j] = number of (outcome i at k, outcome j at k + lags[l]) pairs."""
    o = np.asarray(outcomes, int)
    C = np.zeros((len(lags), n_states, n_states))
    for l, k in enumerate(lags):
        if k < 1 or k >= len(o):
            raise ValueError(f"lag {k} outside 1..{len(o) - 1}")
        np.add.at(C[l], (o[:-k], o[k:]), 1.0)
    return C


@dataclass
class RateEstimate:
    gamma_d: float  # 0- -> 0+ (= 0+ -> 0-)
    gamma_up: float  # 0+/- -> >=1
    gamma_down: float  # >=1 -> 0+/-
    e_d: float
    e_p: float
    loglik: float
    converged: bool
    ci: dict = field(default_factory=dict)

    @property
    def generator(self) -> np.ndarray:
        return generator(self.gamma_d, self.gamma_up, self.gamma_down)

    @property
    def doublet_T1(self) -> float:
        """Two-level relaxation time 1 / (Gamma_0+->0- + Gamma_0-->0+)."""
        return 1.0 / (2.0 * self.gamma_d) if self.gamma_d > 0 else math.inf

    @property
    def plasmon_T1(self) -> float:
        """Decay time of the >=1 population."""
        return 1.0 / (2.0 * self.gamma_down) if self.gamma_down > 0 else math.inf

    def expected_transitions(self, duration: float) -> float:
        """Mean number of jumps the estimated generator implies over ``duration``."""
        Q = self.generator
        pi = stationary(Q) if np.any(Q) else np.full(3, 1.0 / 3.0)
        return float(duration * np.sum(-np.diag(Q) * np.clip(pi, 0, None)))

    def as_vector(self) -> np.ndarray:
        return np.array([self.gamma_d, self.gamma_up, self.gamma_down, self.e_d, self.e_p])

    def report(self) -> str:
        names = ("gamma_d_per_s", "gamma_up_per_s", "gamma_down_per_s", "e_d", "e_p")
        lines = [f"{k}={fmt(float(v))}" for k, v in zip(names, self.as_vector())]
        lines.append(f"doublet_T1_s={fmt(self.doublet_T1)}")
        lines.append(f"converged={self.converged}")
        for k, (lo, hi) in self.ci.items():
            lines.append(f"{k}_ci95=[{fmt(float(lo))}, {fmt(float(hi))}]")
        return "\n".join(lines) + "\n"


_E_MAX = 0.45
_PENALTY = 1e-7


def _joint_model(x, taus, q_emp):
    g = np.exp(x[:3])
    F = fidelity_matrix(x[3], x[4])
    Q = generator(*g)
    # prior over true states from the empirical outcome marginal
    pi = np.clip(np.linalg.solve(F, q_emp), 1e-12, None)
    pi /= pi.sum()
    out = []
    for tau in taus:
        E = linalg.expm(Q * tau)
        # p[i, j] = sum_ab F[i, a] pi_a E[b, a] F[j, b]
        out.append((F * pi[None, :]) @ E.T @ F.T)
    return np.array(out)


def estimate_rates_from_counts(counts: np.ndarray, taus: Sequence[float], x0=None) -> RateEstimate:
    """Composite multinomial likelihood of lagged outcome pairs.

    ``counts[l]`` holds joint counts at wait time ``taus[l]``. The free
    parameters are three log-rates and the two readout error probabilities.
    """
    counts = np.asarray(counts, float)
    taus = np.asarray(taus, float)
    if len(np.unique(taus)) < 3:
        raise IdentifiabilityError("need at least 3 distinct wait times to separate rates from readout errors")
    if counts.shape != (len(taus), 3, 3):
        raise ValueError("counts must have shape (n_lags, 3, 3)")
    total = counts.sum(axis=(1, 2))
    if np.any(total == 0):
        raise IdentifiabilityError("a wait time has no counts")
    q_emp = counts.sum(axis=(0, 2)) / counts.sum()
    t_lo, t_hi = taus.min(), taus.max()
    g_min, g_max = 1e-4 / t_hi, 50.0 / t_lo
    lo = [math.log(g_min)] * 3 + [0.0, 0.0]
    hi = [math.log(g_max)] * 3 + [_E_MAX, _E_MAX]

    n_pairs = counts.sum()

    def nll(x):
        p = _joint_model(x, taus, q_emp)
        # a vanishing linear penalty pins rates the data cannot see (e.g. an
        # unpopulated state) to the lower bound without biasing the others
        penalty = _PENALTY * t_hi * float(np.sum(np.exp(x[:3])))
        return -float(np.sum(counts * np.log(np.clip(p, 1e-300, None)))) / n_pairs + penalty

    if x0 is not None:
        starts = [np.asarray(x0, float)]
    else:
        # moment start: off-diagonal flow at the shortest lag
        P1 = counts[np.argmin(taus)] / counts[np.argmin(taus)].sum(axis=1, keepdims=True).clip(1)
        g0 = np.clip([P1[1, 0], P1[0, 2], P1[2, 0]], g_min * t_lo * 10, 0.5) / t_lo
        starts = [np.r_[np.log(g0 * shrink), 0.02, 0.02] for shrink in (1.0, 0.1)]
    best = None
    for s in starts:
        s = np.clip(s, lo, hi)
        res = optimize.minimize(nll, s, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                                options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    g = np.exp(best.x[:3])
    return RateEstimate(*map(float, g), float(best.x[3]), float(best.x[4]),
                        -best.fun * n_pairs, bool(best.success))


def estimate_rates(record: TelegraphRecord, lags: Sequence[int] = (1, 2, 4, 8, 16, 32, 64)) -> RateEstimate:
    """Rates and readout errors from a uniformly sampled outcome record.

    ``lags`` are wait times in units of the sampling interval.
    """
    lags = list(lags)
    if len(set(lags)) < 3:
        raise IdentifiabilityError("need at least 3 distinct wait times")
    dt = record.dt
    return estimate_rates_from_counts(lag_counts(record.outcomes, lags), dt * np.asarray(lags, float))


def bootstrap(
    batches: Sequence,
    estimator: Callable[[list], np.ndarray],
    n_resamples: int = 200,
    seed: int = 0,
    ci: tuple[float, float] = (2.5, 97.5),
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Percentile bootstrap over batches.

    Returns (point estimate on all batches, lower, upper).
    """
    if len(batches) < 10:
        raise ValueError("need at least 10 batches")
    rng = np.random.Generator(np.random.Philox(seed))
    idx = rng.integers(0, len(batches), size=(n_resamples, len(batches)))
    point = np.asarray(estimator(list(batches)), float)

    def run(row):
        return np.asarray(estimator([batches[i] for i in row]), float)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            samples = np.array(list(ex.map(run, idx)))
    else:
        samples = np.array([run(r) for r in idx])
    lo, hi = np.percentile(samples, ci, axis=0)
    return point, lo, hi


def estimate_with_ci(
    record: TelegraphRecord,
    lags: Sequence[int] = (1, 2, 4, 8, 16, 32, 64),
    n_batches: int = 100,
    n_resamples: int = 200,
    seed: int = 0,
) -> RateEstimate:
    """Point estimate plus bootstrap CIs over contiguous batches of the record."""
    dt = record.dt
    taus = dt * np.asarray(lags, float)
    parts = np.array_split(record.outcomes, n_batches)
    counts = [lag_counts(p, lags) for p in parts]
    est = estimate_rates_from_counts(np.sum(counts, axis=0), taus)
    x0 = np.r_[np.log(np.maximum(est.as_vector()[:3], 1e-300)), est.e_d, est.e_p]

    def estimator(bs):
        return estimate_rates_from_counts(np.sum(bs, axis=0), taus, x0=x0).as_vector()

    _, lo, hi = bootstrap(counts, estimator, n_resamples, seed)
    names = ("gamma_d", "gamma_up", "gamma_down", "e_d", "e_p")
    est.ci = {k: (float(a), float(b)) for k, a, b in zip(names, lo, hi)}
    return est


# ---------------------------------------------------------------------------
# quasiparticle parity switching


def simulate_qp_parity(T_jump: float, n_samples: int, dt: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Poisson parity switching sampled every ``dt``; returns (t, parity in {0, 1})."""
    if not (T_jump > 0 and dt > 0):
        raise ValueError("T_jump and dt must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    t = dt * np.arange(n_samples)
    n_jumps = rng.poisson(t[-1] / T_jump) if n_samples > 1 else 0
    jumps = np.sort(rng.uniform(0.0, t[-1], n_jumps))
    parity = (np.searchsorted(jumps, t, side="right") + int(rng.integers(2))) % 2
    return t, parity


@dataclass(frozen=True)
class JumpFit:
    T_jump: float
    residual: float
    wait_times: np.ndarray
    p_no_jump: np.ndarray


def no_jump_probability(parity: np.ndarray, lag: int) -> float:
    """Fraction of windows of ``lag`` samples with no parity change inside."""
    p = np.asarray(parity)
    change = np.r_[0, np.cumsum(p[1:] != p[:-1])]
    if lag >= len(p):
        raise ValueError("lag longer than record")
    return float(np.mean(change[lag:] == change[:-lag])) if lag > 0 else 1.0


def qp_no_jump(t: np.ndarray, parity: np.ndarray, lags: Sequence[int]) -> JumpFit:
    """Fit P(no jump within t) = exp(-t / T_jump) over the given lags."""
    t = np.asarray(t, float)
    d = np.diff(t)
    if np.any(d <= 0) or np.ptp(d) > 1e-6 * d.mean():
        raise ValueError("parity record must be uniformly sampled")
    lags = np.asarray(sorted(set(int(k) for k in lags)))
    if len(lags) < 2:
        raise ValueError("need at least 2 wait times")
    w = d.mean() * lags
    P = np.array([no_jump_probability(parity, int(k)) for k in lags])
    ok = P > 0
    if ok.sum() < 2 or np.all(P[ok] == 1.0):
        raise ValueError("degenerate no-jump data")
    # weighted log-linear fit through the origin (P(0) = 1)
    y = np.log(P[ok])
    rate = -float(np.sum(w[ok] * y * P[ok]) / np.sum(w[ok] ** 2 * P[ok]))
    res = optimize.least_squares(lambda r: np.exp(-r[0] * w) - P, [rate], bounds=(0, np.inf))
    r = float(res.x[0])
    T = 1.0 / r if r > 0 else math.inf
    return JumpFit(T, float(np.sqrt(np.mean(res.fun**2))), w, P)


# ---------------------------------------------------------------------------
# temperatures


@dataclass(frozen=True)
class TemperatureFit:
    T: float
    flag: str  # "ok", "non_thermal", "below_resolution", "infinite"


def temperature_from_populations(populations: Sequence[float], omega_p_GHz: float) -> TemperatureFit:
    """Boltzmann fit p_n ∝ exp(-n h f_p / k_B T) on a harmonic ladder."""
    p = np.asarray(populations, float)
    if p.ndim != 1 or p.size < 2 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("populations must be a normalised vector of length >= 2")
    if not omega_p_GHz > 0:
        raise ValueError("plasmon frequency must be positive")
    hw_over_k = H_PLANCK * omega_p_GHz * GHZ / K_BOLTZMANN
    if np.all(p[1:] == 0):
        return TemperatureFit(0.0, "below_resolution")
    if np.allclose(p, p[0], rtol=1e-12, atol=0):
        return TemperatureFit(math.inf, "infinite")
    n = np.arange(p.size)
    flag = "ok" if np.all(np.diff(p) <= 0) else "non_thermal"
    if flag != "ok":
        log.warning("populations are not monotone; Boltzmann fit is approximate")

    def model(x):
        w = np.exp(-n * x)
        return w / w.sum()

    pos = p > 0
    x0 = max(-np.polyfit(n[pos], np.log(p[pos]), 1)[0], 1e-6)
    res = optimize.least_squares(lambda x: model(x[0]) - p, [x0], bounds=(1e-12, np.inf), xtol=1e-15, ftol=1e-15)
    x = float(res.x[0])
    return TemperatureFit(hw_over_k / x, flag)


def effective_temperature(f_GHz: float, p_ground: float, p_excited: float) -> float:
    """Two-level Boltzmann temperature h f / (k_B ln(p0 / p1))."""
    if not (p_ground > p_excited > 0):
        raise ValueError("need p_ground > p_excited > 0")
    return H_PLANCK * f_GHz * GHZ / (K_BOLTZMANN * math.log(p_ground / p_excited))


# ---------------------------------------------------------------------------
# record files

RECORD_COLUMNS = ["t_s", "outcome"]


def write_record_csv(record: TelegraphRecord, fh, header_lines: Sequence[str] = ()) -> None:
    for line in header_lines:
        fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for t, o in zip(record.t, record.outcomes):
        w.writerow([fmt(float(t)), STATES[o]])


def read_record_csv(fh) -> TelegraphRecord:
    rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0] != RECORD_COLUMNS:
        raise ValueError(f"record header must be {','.join(RECORD_COLUMNS)}")
    try:
        t = [float(r[0]) for r in rows[1:]]
        o = [STATES.index(r[1]) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed record row: {exc}") from exc
    return TelegraphRecord(np.array(t), np.array(o))
