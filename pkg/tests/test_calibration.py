import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cos2phi import calibration as cal

KHZ = 1e-6  # in GHz
TRUE = cal.ReadoutModelParams(7.1, 100.5 * KHZ, -100.5 * KHZ, -4 * KHZ, 22 * KHZ)


def _dispersive_data(rng, noise=0.0):
    n = np.linspace(0, 10, 21)
    x, y, s = [], [], []
    for state in ("0p", "0m"):
        f = cal.conditional_resonator_freq(TRUE, n, state) + noise * rng.standard_normal(n.size)
        x += list(n)
        y += list(f)
        s += [state] * n.size
    return np.array(x), np.array(y), s


def test_dispersive_round_trip_exact(rng):
    fit = cal.fit_dispersive(*_dispersive_data(rng))
    assert math.isclose(fit.chi, -201 * KHZ, rel_tol=1e-9)
    assert math.isclose(fit.K_plus, -4 * KHZ, rel_tol=1e-9)
    assert math.isclose(fit.K_minus, 22 * KHZ, rel_tol=1e-9)
    assert math.isclose(fit.omega0, TRUE.omega0, rel_tol=1e-12)


def test_chi_independent_of_proxy_scale(rng):
    x, y, s = _dispersive_data(rng)
    a = cal.fit_dispersive(x, y, s)
    b = cal.fit_dispersive(3.7 * x, y, s)
    assert math.isclose(a.chi, b.chi, rel_tol=1e-10)
    assert math.isclose(b.K_minus * 3.7, a.K_minus, rel_tol=1e-10)


def test_dispersive_guards():
    with pytest.raises(cal.CalibrationError):
        cal.fit_dispersive([1, 2, 3], [1, 2, 3], ["0p", "0p", "0m"])
    with pytest.raises(cal.CalibrationError):
        cal.fit_dispersive([1, 1, 2, 3], [1, 2, 3, 4], ["0p", "0p", "0m", "0m"])
    with pytest.raises(cal.CalibrationError):
        cal.fit_dispersive([1, 2], [1, 2], ["0p", "up"])
    with pytest.raises(ValueError):
        cal.conditional_resonator_freq(TRUE, [-1.0], "0p")


def test_photon_calibration():
    chi = -201 * KHZ
    power = np.linspace(0, 2, 9)
    nbar_per_power = 2.3
    stark = cal.photon_calibration(power, power * nbar_per_power * chi, chi)
    assert math.isclose(stark.nbar_per_power, 2.3, rel_tol=1e-12)
    assert math.isclose(stark.nbar(1.0), 2.3)
    with pytest.raises(cal.CalibrationError):
        cal.photon_calibration(power, -power * nbar_per_power * chi, chi)
    with pytest.raises(cal.CalibrationError):
        cal.photon_calibration(power, power, 0.0)
    with pytest.raises(cal.CalibrationError):
        cal.photon_calibration([0.0, 0.0], [0.0, 0.0], chi)


@given(st.floats(-3, 3))
def test_canonical_offset(d):
    c = cal.canonical_offset(d)
    assert -0.25 <= c < 0.25
    k = (d - c) / 0.5
    assert abs(k - round(k)) < 1e-9


@given(st.floats(-0.24, 0.24))
def test_charge_offset_round_trip(delta):
    ng = np.linspace(0, 1, 101)
    sig = 0.3 * np.abs(np.cos(2 * np.pi * (ng - delta))) + 0.1
    fit = cal.fit_charge_offset(ng, sig)
    assert abs(fit.delta - delta) < 1e-6
    assert math.isclose(fit.amplitude, 0.3, rel_tol=1e-5)


def test_charge_offset_guards():
    with pytest.raises(cal.CalibrationError):
        cal.fit_charge_offset([0, 0.1, 0.2, 0.3], [1, 2, 3, 4])
    with pytest.raises(cal.CalibrationError):
        cal.fit_charge_offset(np.linspace(0, 1, 10), np.ones(10))


def test_fold_quasiparticle_jumps():
    v = np.array([0.1, 0.6, 0.5, 0.9])
    assert np.allclose(cal.fold_quasiparticle_jumps(v, 0.5), [0.1, 0.4, 0.5, 0.1])


def test_csv_readers():
    x, y, s = cal.read_dispersive_csv(io.StringIO("# c\nnbar_proxy,freq_GHz,state\n0,7.1,0p\n1,7.2,0m\n"))
    assert s == ["0p", "0m"] and y[1] == 7.2
    p, d = cal.read_stark_csv(io.StringIO("power_arb,delta_wq_GHz\n1,2\n"))
    assert p[0] == 1 and d[0] == 2
    ng, sig = cal.read_charge_csv(io.StringIO("N_g,signal\n0.1,0.5\n"))
    assert ng[0] == 0.1
    with pytest.raises(cal.CalibrationError):
        cal.read_stark_csv(io.StringIO("power,delta\n1,2\n"))
    with pytest.raises(cal.CalibrationError):
        cal.read_charge_csv(io.StringIO("N_g,signal\n0.1\n"))
    with pytest.raises(cal.CalibrationError):
        cal.read_charge_csv(io.StringIO("N_g,signal\nx,0.5\n"))
