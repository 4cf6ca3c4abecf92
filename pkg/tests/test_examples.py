"""Device-level worked examples for the rate, dephasing and jump modules.

Values are compared with the measured device figures at the quoted
tolerance. Some examples cannot hold within the model as implemented and
are marked as strict expected failures with the reason.
"""

import math

import numpy as np
import pytest

from cos2phi import TABLE_I_CIRCUIT, TABLE_I_EFFECTIVE, BiasPoint, Model, NoiseEnvironment, Truncation, solve
from cos2phi import decoherence as dec
from cos2phi import dephasing as dph
from cos2phi import jumps as jmp
from cos2phi.units import H_PLANCK, K_BOLTZMANN
from cos2phi.decoherence import Channel
from cos2phi.spectrum import sensitivity

PI = math.pi
ENV = NoiseEnvironment()


def _one(phi=PI, ng=0.0, p=TABLE_I_EFFECTIVE):
    return solve(Model.one_mode, p, BiasPoint(phi, ng), k=6, truncation=Truncation(16))


@pytest.fixture(scope="module")
def s1():
    return _one()


@pytest.fixture(scope="module")
def s3():
    return solve(Model.three_mode, TABLE_I_CIRCUIT, BiasPoint(PI, 0.0), k=6, truncation=Truncation(10, 14))


def test_plasmon_dielectric_lifetime_order_100us(s1):
    i, j = dec.plasmon_pair(s1)
    T = 1.0 / dec.rate_dielectric_1mode(s1, ENV, i, j)
    assert 100e-6 / 3 <= T <= 300e-6


def test_inductive_bound_above_measured_lifetime(s1):
    assert 1.0 / dec.rate_inductive(s1, ENV, 0, 1) >= 70e-6


@pytest.mark.xfail(strict=True, reason="linearised one-mode flux term and the three-mode arrays weigh inductive loss "
                   "differently at the doublet; the two forms differ by more than a factor 2")
def test_inductive_forms_agree_within_factor_two(s1, s3):
    r = dec.rate_inductive(s1, ENV, 0, 1) / dec.rate_inductive(s3, ENV, 0, 1)
    assert 0.5 <= r <= 2.0


def test_charge_noise_far_below_flux_noise(s1):
    s = _one(p=TABLE_I_EFFECTIVE, ng=0.1)
    assert dec.rate_charge_1f(s, ENV, 0, 1) < 1e-2 * dec.rate_flux_1f(s1, ENV, 0, 1)


@pytest.mark.xfail(strict=True, reason="with the coupling corrected to 2.1 pH the flux-line limit is about 4 ms, "
                   "roughly 60 times the measured 70 us rather than 100 times")
def test_flux_line_two_orders_above_measured(s1):
    assert 1.0 / dec.rate_radiative(s1, ENV, "flux", 0, 1) >= 100 * 70e-6


def test_budget_dominance(s1):
    doublet, plasmon = dec.budget(s1, ENV)
    assert doublet.dominant() == Channel.flux_1f
    assert math.isclose(doublet.total, sum(doublet.rates.values()), rel_tol=0, abs_tol=0)
    off = dec.budget(_one(PI * 1.004), ENV)[1]
    assert 0.5 <= plasmon.total / off.total <= 2.0


@pytest.mark.xfail(strict=True, reason="with A_Q at its 2e-3 e/sqrt(Hz) upper bound the 1/f charge channel "
                   "(about 70 us) outweighs dielectric loss (about 135 us) on the plasmon")
def test_plasmon_budget_dominated_by_dielectric(s1):
    assert dec.budget(s1, ENV)[1].dominant() == Channel.dielectric_shunt


@pytest.mark.xfail(strict=True, reason="first-order charge sensitivity vanishes at N_g = 0, so the first-order "
                   "envelope never decays and no finite dephasing time follows")
def test_charge_dephasing_at_zero_offset_charge():
    d = sensitivity(Model.one_mode, TABLE_I_EFFECTIVE, BiasPoint(PI, 0.0), wrt="N_g", truncation=Truncation(16))
    tau = np.geomspace(1e-6, 1e-3, 30)
    f = dph.envelope_charge(tau, d, ENV)
    T2 = tau[np.argmin(np.abs(f - math.exp(-1)))]
    assert 100e-6 <= T2 <= 400e-6


def test_temperature_round_trip_43mK():
    hw = H_PLANCK * 1.1e9 / K_BOLTZMANN
    w = np.exp(-np.arange(5) * hw / 0.043)
    fit = jmp.temperature_from_populations(w / w.sum(), 1.1)
    assert fit.flag == "ok" and abs(fit.T / 0.043 - 1) < 0.01


def test_initialisation_effective_temperature():
    T = jmp.effective_temperature(13.6e-3, 0.83, 0.17)
    assert abs(T - 0.41e-3) < 0.02e-3
