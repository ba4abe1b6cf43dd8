import hashlib
import math
import os

import numpy as np
import pytest
import yaml

from optosql.calibration import (
    AuxiliaryCoolingSpec, CalibrationToneSpec, synthesize_record,
)
from optosql.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_PHYSICS, main, read_csv_columns, \
    write_csv
from optosql.config import ConfigError, config_from_dict, default_config_text, load_config
from optosql.params import EXP_G0, experiment_params

TWO_PI = 2 * math.pi


def write(path, data):
    path.write_text(yaml.safe_dump(data) if not isinstance(data, str) else data)
    return path


def run(tmp_path, command, cfg=None, *extra, name="out.csv"):
    argv = [command, "--out", str(tmp_path / name), "--quiet"]
    if cfg is not None:
        argv += ["--config", str(write(tmp_path / "cfg.yaml", cfg))]
    return main(argv + list(extra)), tmp_path / name


# --- configuration ------------------------------------------------------------

def test_defaults_reproduce_operating_point():
    cfg = load_config()
    ref = experiment_params()
    assert cfg.system.g == pytest.approx(ref.g, rel=1e-12)
    assert cfg.system.detuning == pytest.approx(ref.detuning, rel=1e-12)
    assert cfg.system.eta == ref.eta
    assert config_from_dict(yaml.safe_load(default_config_text())).system.g == pytest.approx(ref.g)


@pytest.mark.parametrize("bad", [
    {"schema_version": 1, "bogus": 1},
    {"schema_version": 2},
    {},
    {"schema_version": 1, "system": {"eta_det": 1.5}},
    {"schema_version": 1, "system": {"mass_kg": -1}},
    {"schema_version": 1, "system": {"cooperativity": 1, "g_hz": 1e5}},
    {"schema_version": 1, "grid": {"points": 1}},
])
def test_schema_rejections(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_yaml_exponent_floats(tmp_path):
    p = write(tmp_path / "c.yaml", "schema_version: 1\ngrid: {span_hz: 1.0e4, points: 11}\n"
                                   "system: {kappa_hz: 16.2e6}\n")
    cfg = load_config(p)
    assert cfg.grid.span_hz == 1e4
    assert cfg.system.kappa == pytest.approx(TWO_PI * 16.2e6)


def test_missing_config_file(tmp_path):
    code, _ = run(tmp_path, "spectrum")
    assert code == EXIT_OK
    assert main(["spectrum", "--config", str(tmp_path / "nope.yaml"), "--out",
                 str(tmp_path / "x.csv"), "--quiet"]) == EXIT_CONFIG


# --- exit codes ---------------------------------------------------------------

def test_exit_codes(tmp_path):
    assert run(tmp_path, "spectrum", {"schema_version": 1, "bogus": 1})[0] == EXIT_CONFIG
    blue = {"schema_version": 1, "system": {"detuning_over_kappa": 0.2, "cooperativity": 500}}
    assert run(tmp_path, "spectrum", blue)[0] == EXIT_PHYSICS
    assert not (tmp_path / "out.csv").exists()
    # a fit over fewer points than the problem needs
    write_csv(tmp_path / "tiny.csv", ["f_Hz", "value"], [np.linspace(1.13e6, 1.14e6, 5), np.ones(5)])
    code, _ = run(tmp_path, "fit", {"schema_version": 1, "fit": {"spectrum": "tiny.csv"}},
                  name="fit.yaml")
    assert code == EXIT_NUMERIC


# --- outputs -------------------------------------------------------------------

GOLDEN = {"schema_version": 1, "system": {"theta_rad": 2.5},
          "grid": {"span_hz": 20000, "points": 101}}
GOLDEN_SHA256 = "c8b788209fbb65729b068aeb9cb1dca5ee78e5c50de144f9396a3fce32e14459"


def test_spectrum_golden_digest(tmp_path):
    code, out = run(tmp_path, "spectrum", GOLDEN)
    assert code == EXIT_OK
    assert hashlib.sha256(out.read_bytes()).hexdigest() == GOLDEN_SHA256


def test_spectrum_columns_and_single_sided(tmp_path):
    _, a = run(tmp_path, "spectrum", GOLDEN, name="a.csv")
    _, b = run(tmp_path, "spectrum", GOLDEN, "--single-sided", name="b.csv")
    da, db_ = read_csv_columns(a), read_csv_columns(b)
    assert list(da) == ["f_Hz", "Sxx_total", "Sxx_imp", "Sxx_qba", "Sxx_th", "Sxx_corr_term",
                        "Sxx_SQL", "ratio_dB"]
    for c in ("Sxx_total", "Sxx_imp", "Sxx_SQL"):
        assert np.allclose(db_[c], 2 * da[c], rtol=1e-11)
    assert np.array_equal(da["ratio_dB"], db_["ratio_dB"])
    parts = da["Sxx_imp"] + da["Sxx_qba"] + da["Sxx_th"] + da["Sxx_corr_term"]
    assert np.allclose(parts, da["Sxx_total"], rtol=1e-10)


def test_spectrum_phase_readout_above_sql(tmp_path):
    cfg = {"schema_version": 1, "system": {"detuning_over_kappa": 0.0, "theta_rad": math.pi / 2},
           "grid": {"span_hz": 40000, "points": 801}}
    code, out = run(tmp_path, "spectrum", cfg)
    assert code == EXIT_OK
    assert np.all(read_csv_columns(out)["ratio_dB"] >= -1e-9)


def test_spectrum_without_coupling(tmp_path):
    cfg = {"schema_version": 1, "system": {"g_hz": 0.0, "theta_rad": 2.0}}
    code, out = run(tmp_path, "spectrum", cfg)
    assert code == EXIT_OK
    d = read_csv_columns(out)
    assert np.all(np.isinf(d["Sxx_imp"])) and np.all(d["Sxx_qba"] == 0)
    # weak coupling: shot-noise floor plus the thermal Lorentzian
    cfg["system"]["g_hz"] = 1.0
    _, out = run(tmp_path, "spectrum", cfg)
    d = read_csv_columns(out)
    assert np.allclose(d["Sxx_total"], d["Sxx_imp"] + d["Sxx_th"], rtol=1e-10)


def test_determinism_byte_identical(tmp_path):
    cfg = {"schema_version": 1, "heatmap": {"theta_points": 5}, "grid": {"points": 21}}
    _, a = run(tmp_path, "heatmap", cfg, "--seed", "3", name="a.csv")
    _, b = run(tmp_path, "heatmap", cfg, "--seed", "3", name="b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "t.csv"
    target.write_text("old\n")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        write_csv(target, ["a"], [np.arange(3.0)])
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["t.csv"]


def test_heatmap_flags_and_trend(tmp_path):
    counts = {}
    for c_q in (4.6, 17.3):
        cfg = {"schema_version": 1, "system": {"cooperativity": c_q},
               "heatmap": {"theta_points": 41}, "grid": {"points": 201}}
        code, out = run(tmp_path, "heatmap", cfg, name=f"h{c_q}.csv")
        assert code == EXIT_OK
        d = read_csv_columns(out)
        assert np.array_equal(d["sub_sql"] == 1, d["ratio"] < 1)
        assert d["theta_rad"].min() == pytest.approx(0.1 * math.pi)
        assert d["theta_rad"].max() == pytest.approx(0.9 * math.pi)
        counts[c_q] = int(d["sub_sql"].sum())
    assert counts[17.3] > counts[4.6]
    lossy = {"schema_version": 1, "system": {"eta_det": 0.01},
             "heatmap": {"theta_points": 41}, "grid": {"points": 201}}
    _, out = run(tmp_path, "heatmap", lossy, name="lossy.csv")
    assert read_csv_columns(out)["sub_sql"].sum() == 0


def test_optimize_envelope(tmp_path):
    code, out = run(tmp_path, "optimize", {"schema_version": 1})
    d = read_csv_columns(out)
    assert code == EXIT_OK
    assert -2.5 < d["ratio_dB"].min() < -1.0
    assert np.all((d["theta_opt_rad"] >= 0) & (d["theta_opt_rad"] < math.pi))


def test_snr_band(tmp_path):
    cfg = {"schema_version": 1, "grid": {"span_hz": 40000, "points": 4001}}
    code, out = run(tmp_path, "snr", cfg)
    assert code == EXIT_OK
    d = read_csv_columns(out)
    sel = np.isclose(d["theta_rad"], 0.8 * math.pi)
    f, rel = d["f_Hz"][sel], d["relative_snr"][sel]
    above = f[rel > 1]
    assert above.size and np.all(np.diff(np.flatnonzero(rel > 1)) == 1)
    width = above[-1] - above[0]
    assert 4e3 < width < 16e3


def test_calibrate_recovers_g0(tmp_path):
    tone = CalibrationToneSpec(TWO_PI * 1.135e6, 0.02)
    aux = AuxiliaryCoolingSpec(TWO_PI * 16.2e6, -0.33 * TWO_PI * 16.2e6)
    rec = synthesize_record(EXP_G0, TWO_PI * 1.135e6, tone, aux, gain=12.5)
    record = {"v_mech_qba": rec.v_mech_qba, "v_cal_qba": rec.v_cal_qba,
              "tone": {"f_cal_hz": 1.135e6, "phi_rad": 0.02},
              "aux": {"kappa_aux_hz": 16.2e6, "detuning_aux_hz": -0.33 * 16.2e6}}
    write(tmp_path / "rec.yaml", record)
    code, out = run(tmp_path, "calibrate", {"schema_version": 1, "calibrate": {"record": "rec.yaml"}},
                    name="cal.yaml")
    assert code == EXIT_OK
    rep = yaml.safe_load(out.read_text())
    assert rep["g0_hz"] == pytest.approx(120.7, rel=1e-12)
    assert rep["K_V2_per_rad2"] == pytest.approx(12.5, rel=1e-12)


def test_calibrate_bad_record_is_config_error(tmp_path):
    cfg = {"schema_version": 1, "calibrate": {"record": {"v_mech_qba": 1.0}}}
    assert run(tmp_path, "calibrate", cfg, name="cal.yaml")[0] == EXIT_CONFIG


@pytest.mark.slow
def test_simulate_then_fit(tmp_path):
    theta = 0.8 * math.pi
    sim = {"schema_version": 1, "simulate": {"segments": 100, "thetas_rad": [theta]}}
    code, out = run(tmp_path, "simulate", sim, "--seed", "7", name="sim.csv")
    assert code == EXIT_OK
    fit = {"schema_version": 1,
           "fit": {"spectrum": str(out), "quality": 10000,
                   "guess": {"g_hz": 1.0e5, "theta_rad": 2.3, "detuning_hz": -2.2e6}}}
    code, rep_path = run(tmp_path, "fit", fit, name="fit.yaml")
    assert code == EXIT_OK
    est = yaml.safe_load(rep_path.read_text())["estimates_external"]
    truth = experiment_params(theta=theta)
    assert est["g_hz"] == pytest.approx(truth.g / TWO_PI, rel=0.03)
    assert est["theta_rad"] == pytest.approx(theta, abs=0.03)
    assert abs(est["detuning_hz"] - truth.detuning / TWO_PI) < 0.03 * truth.kappa / TWO_PI
