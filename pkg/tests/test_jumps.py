import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cos2phi import jumps as jmp

TRUTH = dict(gamma_d=1 / 140e-6, gamma_up=3000.0, gamma_down=1 / 120e-6)


rates = st.floats(0.0, 1e5)


@given(rates, rates, rates, st.floats(0.0, 1e-3))
def test_propagator_column_stochastic(gd, gu, gw, t):
    Q = jmp.generator(gd, gu, gw)
    jmp.validate_generator(Q)
    E = np.array([jmp.propagate(Q, e, t) for e in np.eye(3)]).T
    assert np.all(E >= 0)
    assert np.allclose(E.sum(axis=0), 1.0, atol=1e-12)


def test_propagate_against_closed_form_two_state():
    # doublet-only dynamics: P_0+(t) = (1 + exp(-2 gamma t)) / 2
    Q = jmp.generator(1e4, 0.0, 0.0)
    for t in (0.0, 1e-5, 1e-4):
        P = jmp.propagate(Q, [1, 0, 0], t)
        assert math.isclose(P[0], 0.5 * (1 + math.exp(-2e4 * t)), rel_tol=1e-12)


def test_stationary_distribution():
    Q = jmp.generator(**TRUTH)
    pi = jmp.stationary(Q)
    assert np.allclose(Q @ pi, 0, atol=1e-9)
    # detailed balance between the doublet and >=1: pi_ge1 / pi_0+ = 2 gamma_up / (2 gamma_down)
    assert math.isclose(pi[2] / pi[0], TRUTH["gamma_up"] / TRUTH["gamma_down"], rel_tol=1e-10)


def test_generator_validation():
    with pytest.raises(ValueError):
        jmp.generator(-1, 0, 0)
    with pytest.raises(ValueError):
        jmp.validate_generator(np.array([[0, 1], [1, 0]]))
    with pytest.raises(ValueError):
        jmp.validate_generator(np.array([[-1, -1], [1, 1]]))
    with pytest.raises(ValueError):
        jmp.propagate(jmp.generator(1, 1, 1), [0.5, 0.6, 0], 1.0)


def test_fidelity_matrix():
    F = jmp.fidelity_matrix(0.05, 0.03)
    assert np.allclose(F.sum(axis=0), 1)
    assert np.array_equal(jmp.fidelity_matrix(0, 0), np.eye(3))
    with pytest.raises(ValueError):
        jmp.fidelity_matrix(0.7, 0.5)


def test_dwell_times_are_exponential():
    Q = jmp.generator(**TRUTH)
    rec = jmp.simulate_telegraph(Q, np.eye(3), 200_000, 10e-6, seed=3)
    d = jmp.dwell_times(rec)
    # exit rate of >=1 is 2 gamma_down
    assert abs(d[2].mean() * 2 * TRUTH["gamma_down"] - 1) < 0.05
    exit0 = TRUTH["gamma_d"] + TRUTH["gamma_up"]
    assert abs(d[0].mean() * exit0 - 1) < 0.05


def test_simulation_is_seed_deterministic_and_streams_separate():
    Q = jmp.generator(**TRUTH)
    a = jmp.simulate_telegraph(Q, jmp.fidelity_matrix(0.05, 0.03), 5000, 10e-6, seed=7)
    b = jmp.simulate_telegraph(Q, jmp.fidelity_matrix(0.05, 0.03), 5000, 10e-6, seed=7)
    c = jmp.simulate_telegraph(Q, jmp.fidelity_matrix(0.2, 0.1), 5000, 10e-6, seed=7)
    assert np.array_equal(a.outcomes, b.outcomes)
    # the readout model does not disturb the underlying trajectory
    assert np.array_equal(a.true_states, c.true_states)
    assert not np.array_equal(a.outcomes, c.outcomes)


def test_perfect_readout_reports_true_state():
    rec = jmp.simulate_telegraph(jmp.generator(**TRUTH), np.eye(3), 2000, 10e-6, seed=1)
    assert np.array_equal(rec.outcomes, rec.true_states)


def test_lag_counts():
    o = np.array([0, 1, 1, 2, 0])
    C = jmp.lag_counts(o, [1, 2])
    assert C[0].sum() == 4 and C[1].sum() == 3
    assert C[0][1, 1] == 1 and C[0][2, 0] == 1
    with pytest.raises(ValueError):
        jmp.lag_counts(o, [5])


@pytest.mark.parametrize("seed", [11, 12])
def test_round_trip_within_ten_percent(seed):
    F = jmp.fidelity_matrix(0.05, 0.03)
    rec = jmp.simulate_telegraph(jmp.generator(**TRUTH), F, 100_000, 10e-6, seed=seed)
    est = jmp.estimate_rates(rec)
    truth = np.array([TRUTH["gamma_d"], TRUTH["gamma_up"], TRUTH["gamma_down"], 0.05, 0.03])
    assert np.all(np.abs(est.as_vector() / truth - 1) < 0.10), est.report()
    assert est.converged


def test_no_jumps_gives_negligible_rates():
    rec = jmp.simulate_telegraph(jmp.generator(0, 0, 0), np.eye(3), 20_000, 10e-6, seed=2,
                                 p0=[1.0, 0.0, 0.0])
    est = jmp.estimate_rates(rec)
    assert est.expected_transitions(rec.t[-1]) < 1.0


def test_identifiability_guard():
    rec = jmp.simulate_telegraph(jmp.generator(**TRUTH), np.eye(3), 2000, 10e-6, seed=1)
    with pytest.raises(jmp.IdentifiabilityError):
        jmp.estimate_rates(rec, lags=(1, 1, 2))


def test_bootstrap_interval_brackets_point():
    rng = np.random.Generator(np.random.Philox(0))
    data = list(rng.normal(5.0, 1.0, 400))
    point, lo, hi = jmp.bootstrap(data, lambda b: np.array([np.mean(b)]), 300, seed=1)
    assert lo[0] < point[0] < hi[0]
    assert abs((hi[0] - lo[0]) - 2 * 1.96 / 20) < 0.05
    with pytest.raises(ValueError):
        jmp.bootstrap(data[:5], np.mean)


@pytest.mark.slow
def test_estimate_with_ci_covers_truth():
    F = jmp.fidelity_matrix(0.05, 0.03)
    rec = jmp.simulate_telegraph(jmp.generator(**TRUTH), F, 100_000, 10e-6, seed=5)
    est = jmp.estimate_with_ci(rec, n_batches=50, n_resamples=40, seed=2)
    lo, hi = est.ci["gamma_d"]
    assert lo < est.gamma_d < hi
    assert "gamma_d_ci95" in est.report()


def test_qp_parity_round_trip():
    t, p = jmp.simulate_qp_parity(56e-3, 2_000_000, 50e-6, seed=4)
    fit = jmp.qp_no_jump(t, p, [10, 50, 100, 200, 400, 800])
    assert abs(fit.T_jump / 56e-3 - 1) < 0.1
    assert np.all(np.diff(fit.p_no_jump) <= 0)


def test_no_jump_probability_edge_cases():
    p = np.array([0, 0, 1, 1, 1, 0])
    assert jmp.no_jump_probability(p, 0) == 1.0
    assert math.isclose(jmp.no_jump_probability(p, 1), 3 / 5)
    with pytest.raises(ValueError):
        jmp.no_jump_probability(p, 6)


def test_temperature_from_populations():
    f = 5.0
    T = 0.06
    x = jmp.H_PLANCK * f * 1e9 / (jmp.K_BOLTZMANN * T)
    p = np.exp(-x * np.arange(4))
    p /= p.sum()
    fit = jmp.temperature_from_populations(p, f)
    assert fit.flag == "ok" and math.isclose(fit.T, T, rel_tol=1e-8)
    assert jmp.temperature_from_populations([1.0, 0.0, 0.0], f).flag == "below_resolution"
    assert jmp.temperature_from_populations([0.5, 0.5], f).flag == "infinite"
    assert jmp.temperature_from_populations([0.5, 0.2, 0.3], f).flag == "non_thermal"
    assert math.isclose(jmp.effective_temperature(f, p[0], p[1]), T, rel_tol=1e-12)
    with pytest.raises(ValueError):
        jmp.effective_temperature(f, 0.2, 0.5)


def test_record_csv_round_trip():
    rec = jmp.simulate_telegraph(jmp.generator(**TRUTH), jmp.fidelity_matrix(0.05, 0.03), 300, 10e-6, seed=9)
    buf = io.StringIO()
    jmp.write_record_csv(rec, buf, ["x"])
    buf.seek(0)
    back = jmp.read_record_csv(buf)
    assert np.array_equal(back.outcomes, rec.outcomes)
    assert np.allclose(back.t, rec.t, rtol=1e-12)
    with pytest.raises(ValueError):
        jmp.read_record_csv(io.StringIO("t,o\n0,0p\n"))
    with pytest.raises(ValueError):
        jmp.read_record_csv(io.StringIO("t_s,outcome\n0,1x\n"))
