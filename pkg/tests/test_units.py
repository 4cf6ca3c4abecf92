import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cos2phi import units as u
from cos2phi.units import BiasPoint, CircuitParams, EffectiveParams, NoiseEnvironment, ParameterError, QPParity

positive = st.floats(1e-3, 1e3)


@given(positive)
def test_ghz_joule_round_trip(e):
    assert math.isclose(u.joule_to_ghz(u.ghz_to_joule(e)), e, rel_tol=1e-14)


@given(positive)
def test_kelvin_round_trip(e):
    assert math.isclose(u.kelvin_to_ghz(u.ghz_to_kelvin(e)), e, rel_tol=1e-14)


@given(positive)
def test_capacitance_round_trip(e):
    assert math.isclose(u.charging_energy(u.shunt_capacitance(e)), e, rel_tol=1e-13)


@given(positive)
def test_inductance_round_trip(e):
    assert math.isclose(u.inductive_energy(u.flux_inductance(e)), e, rel_tol=1e-13)


def test_known_conversions():
    # 1 GHz is h * 1e9 J, about 48 mK
    assert math.isclose(u.ghz_to_joule(1.0), 6.62607015e-25, rel_tol=1e-15)
    assert math.isclose(u.ghz_to_kelvin(1.0), 0.04799243, rel_tol=1e-6)
    assert math.isclose(u.ghz_to_angular(1.0), 2 * math.pi * 1e9)
    # E_C = 0.052 GHz is roughly 370 fF
    assert 360 < u.shunt_capacitance(0.052) < 380


def test_thermal_coth_limits():
    assert u.thermal_coth(2 * math.pi * 10e9, 0.01) == 1.0
    w, T = 2 * math.pi * 1e6, 0.05
    x = u.HBAR * w / (2 * u.K_BOLTZMANN * T)
    assert math.isclose(u.thermal_coth(w, T), 1 / math.tanh(x))
    assert math.isclose(u.thermal_coth(-w, T), u.thermal_coth(w, T))
    with pytest.raises(ParameterError):
        u.thermal_coth(w, 0.0)
    with pytest.raises(ParameterError):
        u.thermal_coth(0.0, T)


def test_circuit_params_validation():
    with pytest.raises(ParameterError):
        CircuitParams(-1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ParameterError):
        CircuitParams(1.0, 1.0, 1.0, float("nan"))
    with pytest.raises(ParameterError):
        CircuitParams.with_asymmetry(1, 1, 1, 1, 1.5)
    p = CircuitParams.with_asymmetry(16.83, 4.82, 1.27, 0.072, 0.03)
    assert p.epsilon == 0.03
    assert p.dL_over_L == 0.0
    with pytest.raises(ParameterError):
        CircuitParams(1, 1, 1, 1, 0.1, 0.0, 0.2).epsilon


def test_scaled_params():
    p = u.TABLE_I_CIRCUIT.scaled(2.0)
    assert p.E_J == 2 * 16.83 and p.epsilon == 0.03
    assert math.isclose(p.plasma_frequency, 2 * u.TABLE_I_CIRCUIT.plasma_frequency)


def test_effective_params():
    e = u.TABLE_I_EFFECTIVE
    assert math.isclose(e.ratio, 1.14 / 0.052)
    with pytest.raises(ParameterError):
        EffectiveParams(0.0, 0.1, 1.0, 0.05)
    with pytest.raises(ParameterError):
        EffectiveParams(1.0, -0.1, 1.0, 0.05)


def test_bias_point():
    b = BiasPoint(math.pi, 0.2, "odd")
    assert b.qp_parity is QPParity.odd
    assert math.isclose(b.N_g_eff, 0.7)
    assert math.isclose(b.flux_quanta, 0.5)
    with pytest.raises(ParameterError):
        BiasPoint(float("inf"), 0.0)


def test_noise_environment_defaults_and_validation():
    env = NoiseEnvironment()
    assert env.Q_cap == 1.5e6 and env.A_Phi == 5.6e-6 and env.T == 0.043
    with pytest.raises(ParameterError):
        NoiseEnvironment(T=0.0)


def test_toml_round_trip(tmp_path):
    text = """
[circuit]
E_J = 16.83
E_CJ = 4.82
E_L = 1.27
E_CS = 0.072
epsilon = 0.03

[noise]
T = 0.05

[bias]
phi_ext = 3.0
N_g = 0.1
qp_parity = "odd"
"""
    f = tmp_path / "p.toml"
    f.write_text(text)
    ps = u.load_parameters(f)
    assert ps.circuit == u.TABLE_I_CIRCUIT
    assert ps.noise.T == 0.05 and ps.noise.Q_cap == 1.5e6
    assert ps.bias.qp_parity is QPParity.odd
    g = tmp_path / "q.toml"
    g.write_text(u.dump_parameters(ps))
    assert u.load_parameters(g) == ps


@pytest.mark.parametrize("text", [
    "[circuit]\nE_J = 1\n",
    "[circuit]\nE_J=1\nE_CJ=1\nE_L=1\nE_CS=1\nbogus=2\n",
    "[nonsense]\na=1\n",
    "[circuit]\nE_J=1\nE_CJ=1\nE_L=1\nE_CS=1\nepsilon=0.1\ndL_over_L=0.1\n",
    "not toml at all [",
])
def test_bad_parameter_files(tmp_path, text):
    f = tmp_path / "bad.toml"
    f.write_text(text)
    with pytest.raises(ParameterError):
        u.load_parameters(f)
