import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from optosql.constants import HBAR
from optosql.limits import (
    added_noise_uncorrelated, backaction_rate, db, force_noise_spectrum, from_db,
    optimal_measurement_rate, optimal_quadrature, quantum_cooperativity, relative_snr_spectrum,
    snr_relative_to_sql, sql_ratio_map, sql_spectrum, sub_sql_band, variational_envelope,
)
from optosql.model import (
    effective_resonance, effective_susceptibility, imprecision_spectrum,
    measured_displacement_spectrum, mech_susceptibility, qba_force_spectrum,
    thermal_force_spectrum,
)
from optosql.params import MechanicalOscillator, ParameterError, ThermalBath, experiment_params

from conftest import make_system

KHZ = 2 * math.pi * 1e3


@pytest.fixture
def osc():
    return MechanicalOscillator.from_quality(1.63e-12, 2 * math.pi * 1.135e6, 1.03e9)


def test_added_noise_at_and_off_optimum(osc):
    for w in osc.omega_m * np.array([0.5, 0.999, 1.0, 1.0003, 2.0]):
        sql = HBAR * abs(mech_susceptibility(osc, w))
        g_opt = optimal_measurement_rate(osc, w)
        assert added_noise_uncorrelated(osc, g_opt, w) == pytest.approx(sql, rel=1e-12)
        assert added_noise_uncorrelated(osc, 2 * g_opt, w) == pytest.approx(1.25 * sql, rel=1e-12)
        imp = osc.x_zpf ** 2 / (4 * g_opt)
        ba = abs(mech_susceptibility(osc, w)) ** 2 * HBAR ** 2 / osc.x_zpf ** 2 * g_opt
        assert imp == pytest.approx(ba, rel=1e-12)
    assert added_noise_uncorrelated(osc, 1e-30, osc.omega_m) > 1e6 * HBAR * abs(
        mech_susceptibility(osc, osc.omega_m))


def test_optimal_rate_on_resonance(osc):
    assert optimal_measurement_rate(osc, osc.omega_m) == pytest.approx(osc.gamma_m / 4, rel=1e-12)


def test_optimal_rate_matches_numerical_minimum(osc):
    for w in osc.omega_m * np.array([0.3, 0.9999, 1.00002, 1.7]):
        g0 = optimal_measurement_rate(osc, w)
        res = minimize_scalar(lambda u: added_noise_uncorrelated(osc, g0 * math.exp(u), w) /
                              (HBAR * abs(mech_susceptibility(osc, w))),
                              bracket=(-1, 0, 1), tol=1e-12)
        assert g0 * math.exp(res.x) == pytest.approx(g0, rel=1e-5)


def test_sql_curve_bare_and_effective(exp):
    free = exp.with_coupling(0.0)
    osc = exp.oscillator
    c = sql_spectrum(free, [0.0, osc.omega_m])
    assert c.values[1] == pytest.approx(HBAR * osc.quality / (osc.mass * osc.omega_m ** 2), rel=1e-12)
    assert c.values[0] == pytest.approx(HBAR / (osc.mass * osc.omega_m ** 2), rel=1e-12)
    bare = sql_spectrum(exp, [osc.omega_m], susceptibility="bare")
    assert bare.susceptibility == "bare"
    assert bare.values[0] == pytest.approx(c.values[1], rel=1e-12)
    w = effective_resonance(exp) + np.array([-5, 0, 5]) * KHZ
    eff = sql_spectrum(exp, w)
    assert np.allclose(eff.values, HBAR * np.abs(effective_susceptibility(exp, w)))
    assert np.all(eff.values > 0)
    with pytest.raises(ValueError):
        sql_spectrum(exp, w, susceptibility="other")


def test_cooperativity_scaling(exp):
    c = quantum_cooperativity(exp)
    assert quantum_cooperativity(exp.with_coupling(2 * exp.g)) == pytest.approx(4 * c)
    from dataclasses import replace
    hot = replace(exp, bath=ThermalBath(n_th=2 * exp.bath.n_eff))
    assert quantum_cooperativity(hot) == pytest.approx(c / 2)
    assert backaction_rate(exp) == pytest.approx(4 * exp.g ** 2 / exp.kappa)
    with pytest.raises(ValueError):
        quantum_cooperativity(replace(exp, bath=ThermalBath(n_th=0.0)))


def test_db_round_trip():
    x = np.array([0.708, 1.0, 3.3])
    assert np.allclose(from_db(db(x)), x, rtol=1e-14)
    assert db(0.708) == pytest.approx(-1.5, abs=0.002)


def test_optimal_quadrature_without_correlations():
    s = make_system(g_over_omega=1e-7)
    w = np.array([0.99e6, 1.0e6, 1.02e6])
    th, _ = optimal_quadrature(s, w)
    assert np.allclose(th, math.pi / 2, atol=1e-5)


def test_envelope_is_optimal(exp):
    w = effective_resonance(exp) + np.linspace(-20, 20, 81) * KHZ
    plan = variational_envelope(exp, w)
    rng = np.random.default_rng(4)
    thetas = rng.uniform(0, math.pi, 64)
    grid = measured_displacement_spectrum(exp, thetas[:, None], w[None, :])
    assert np.all(plan.envelope <= grid.min(axis=0) + 1e-12 * plan.envelope)
    assert np.all(plan.envelope <= measured_displacement_spectrum(exp, math.pi / 2, w))
    assert np.all((plan.theta_opt >= 0) & (plan.theta_opt < math.pi))
    assert np.allclose(plan.ratio, plan.envelope / plan.sql)


def test_envelope_below_sql_on_both_sides(exp):
    w0 = effective_resonance(exp)
    w = w0 + np.concatenate([-np.linspace(1.5, 8, 30), np.linspace(1.5, 8, 30)]) * KHZ
    r = variational_envelope(exp, w).ratio
    assert np.min(r[:30]) < 1 and np.min(r[30:]) < 1


def test_variational_band_widens_with_cooperativity():
    widths = []
    for cq in (4.6, 8.8, 17.3):
        s = experiment_params(c_q=cq)
        widths.append(sum(hi - lo for lo, hi in sub_sql_band(s)))
    assert widths[0] < widths[1] < widths[2]


def test_fixed_quadrature_band(exp):
    bands = sub_sql_band(exp, theta=0.8 * math.pi)
    w0 = effective_resonance(exp)
    assert len(bands) == 1
    lo, hi = bands[0]
    assert lo > w0
    assert 4 * KHZ < hi - lo < 16 * KHZ
    r_lo = measured_displacement_spectrum(exp, 0.8 * math.pi, lo) / sql_spectrum(exp, [lo]).values[0]
    assert r_lo == pytest.approx(1.0, abs=1e-5)


def test_no_band_without_correlations_or_detection(exp):
    assert sub_sql_band(exp.with_coupling(1e-3 * exp.g)) == []
    assert sub_sql_band(exp.with_efficiency(0.01)) == []
    resonant = exp.with_detuning(0.0)
    assert sub_sql_band(resonant, theta=math.pi / 2) == []


def test_phase_readout_at_probe_detuning_is_marginal(exp):
    # the detuned probe leaves a weak correlation in the theta = pi/2 quadrature
    w = effective_resonance(exp) + np.linspace(-20, 20, 801) * KHZ
    r = sql_ratio_map(exp, [math.pi / 2], w)[0]
    assert db(r.min()) > -0.3


def test_correlations_are_necessary_to_beat_sql():
    base = make_system(kappa_over_omega=1e3, n_th=0.0, eta=1.0)
    w = base.oscillator.omega_m * np.array([0.999, 0.9999, 1.0, 1.0002, 1.003])
    for g in base.g * np.logspace(-2, 2, 41):
        s = base.with_coupling(g)
        chi2 = np.abs(effective_susceptibility(s, w)) ** 2
        for th in np.linspace(0.05, 0.95, 19) * math.pi:
            added = imprecision_spectrum(s, th, w) + chi2 * qba_force_spectrum(s, w)
            assert np.all(added >= HBAR * np.sqrt(chi2) * (1 - 1e-12))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 0.95), st.floats(1.01, 1.5), st.floats(-10, 10))
def test_envelope_monotone_in_efficiency(eta, factor, off_khz):
    s = experiment_params(eta=eta * 0.95 / 1.5)
    better = s.with_efficiency(min(s.eta * factor, 0.95))
    w = np.array([effective_resonance(s) + off_khz * KHZ])
    assert optimal_quadrature(better, w)[1][0] <= optimal_quadrature(s, w)[1][0] * (1 + 1e-9)


def test_force_noise_on_resonance_is_force_limited():
    s = make_system(kappa_over_omega=1e3, g_over_omega=3e-4, n_th=5.0, q=1e6)
    w0 = effective_resonance(s)
    sff = force_noise_spectrum(s, math.pi / 2, w0)
    assert sff == pytest.approx(thermal_force_spectrum(s) + qba_force_spectrum(s, w0), rel=1e-3)


def test_force_sensitivity_at_drive_frequency(exp):
    w = effective_resonance(exp) + 8.2 * KHZ
    asd = math.sqrt(force_noise_spectrum(exp, 0.8 * math.pi, w))
    assert asd == pytest.approx(11.2e-18, rel=0.05)


def test_snr_at_sql_touch_point():
    s = make_system(kappa_over_omega=1e4, n_th=0.0, eta=1.0)
    w = s.oscillator.omega_m * 1.001
    chi2 = abs(effective_susceptibility(s, w)) ** 2
    ratio = imprecision_spectrum(s, math.pi / 2, w) / (chi2 * qba_force_spectrum(s, w))
    tuned = s.with_coupling(s.g * ratio ** 0.25)
    rep = snr_relative_to_sql(tuned, math.pi / 2, w, 1e-40)
    assert rep.relative_snr == pytest.approx(1.0, rel=1e-3)


def test_snr_report_fields(exp):
    w = effective_resonance(exp) + 8.2 * KHZ
    a = snr_relative_to_sql(exp, math.pi / 2, w, 1e-36)
    b = snr_relative_to_sql(exp, 0.8 * math.pi, w, 1e-36)
    assert a.force_signal == pytest.approx(1e-36, rel=1e-12)
    assert b.force_signal == pytest.approx(a.force_signal, rel=1e-9)
    assert b.signal == a.signal
    assert b.relative_snr > 1 > a.relative_snr
    assert b.relative_snr_db == pytest.approx(db(b.relative_snr))
    assert "added" in b.convention
    t = snr_relative_to_sql(exp, 0.8 * math.pi, w, 1e-36, floor="total")
    assert t.relative_snr < b.relative_snr
    with pytest.raises(ValueError):
        snr_relative_to_sql(exp, 1.0, w, 0.0)
    with pytest.raises(ValueError):
        snr_relative_to_sql(exp, 1.0, w, 1.0, floor="nope")


def test_relative_snr_band_is_contiguous(exp):
    w0 = effective_resonance(exp)
    w = w0 + np.linspace(0, 20, 2001) * KHZ
    above = relative_snr_spectrum(exp, 0.8 * math.pi, w) > 1
    edges = np.flatnonzero(np.diff(above.astype(int)))
    assert above.any() and len(edges) == 2
