"""Command-line front end: ``optosql <command> --config cfg.yaml --out result.csv``.

Exit codes: 0 success, 2 configuration error, 3 physically invalid
configuration (instability, blind quadrature, failed calibration), 4
numerical failure or non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .calibration import (
    CalibrationError, CalibrationRecord, extract_g0, fit_cooling_series, load_record,
    minimum_occupancy, sql_ratio, transduction_factor, voltage_to_displacement,
)
from .config import ConfigError, load_config, load_yaml
from .fitting import FitError, FitProblem, fit_spectrum, residual_diagnostics
from .limits import (
    db, measurement_linewidth, relative_snr_spectrum, sql_ratio_map, sub_sql_band,
    variational_envelope,
)
from .model import (
    BlindQuadratureError, UnstableError, check_stability, detector_efficiency,
    effective_resonance, effective_susceptibility, measured_displacement_spectrum,
    noise_spectrum, transduction,
)
from .oracle import (
    build_state_space, compare_to_analytic, integrate, simulate_photocurrent_psd,
    synthesize_photocurrent,
)
from .params import ParameterError, desk_scale, normalize_angle

log = logging.getLogger("optosql")

EXIT_OK, EXIT_CONFIG, EXIT_PHYSICS, EXIT_NUMERIC = 0, 2, 3, 4
TWO_PI = 2.0 * math.pi


class NumericalError(RuntimeError):
    pass


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12e")


def write_csv(path, header, columns):
    """Write columns atomically (temporary file then rename)."""
    n = len(columns[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(n):
        w.writerow([_fmt(c[i]) for c in columns])
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report(path, data):
    _atomic_write(path, yaml.safe_dump(data, sort_keys=False))


def read_csv_columns(path):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ConfigError(f"{path}: ragged rows")
    return {h: data[:, i] for i, h in enumerate(header)}


def _density_scale(args):
    return 2.0 if args.single_sided else 1.0


def _theta(args, cfg):
    return cfg.system.detection.theta if args.theta is None else normalize_angle(args.theta)


def _say(args, msg):
    if not args.quiet:
        print(msg)


# --- commands -------------------------------------------------------------

def cmd_spectrum(cfg, args):
    sysp = cfg.system
    check_stability(sysp)
    theta = _theta(args, cfg)
    omega = cfg.grid.omega(sysp)
    spec = noise_spectrum(sysp, theta, omega)
    k = _density_scale(args)
    with np.errstate(divide="ignore"):
        ratio_db = db(spec["total"] / spec["sql"])
    write_csv(args.out,
              ["f_Hz", "Sxx_total", "Sxx_imp", "Sxx_qba", "Sxx_th", "Sxx_corr_term", "Sxx_SQL",
               "ratio_dB"],
              [omega / TWO_PI] + [k * spec[c] for c in ("total", "imp", "qba", "th", "corr", "sql")]
              + [ratio_db])
    _say(args, f"theta = {theta:.6f} rad; min ratio {np.min(ratio_db):+.3f} dB at "
               f"{(omega[np.argmin(ratio_db)] - effective_resonance(sysp)) / TWO_PI:+.1f} Hz "
               f"from resonance")


def cmd_heatmap(cfg, args):
    sysp = cfg.system
    check_stability(sysp)
    h = cfg.block("heatmap")
    thetas = np.linspace(h["theta_min_rad"], h["theta_max_rad"], h["theta_points"])
    omega = cfg.grid.omega(sysp)
    ratio = sql_ratio_map(sysp, thetas, omega)
    tt, ww = np.meshgrid(thetas, omega, indexing="ij")
    write_csv(args.out, ["theta_rad", "f_Hz", "ratio", "sub_sql"],
              [tt.ravel(), ww.ravel() / TWO_PI, ratio.ravel(), (ratio < 1).ravel()])
    _say(args, f"{int(np.sum(ratio < 1))} of {ratio.size} cells below the SQL")


def cmd_optimize(cfg, args):
    sysp = cfg.system
    check_stability(sysp)
    omega = cfg.grid.omega(sysp)
    plan = variational_envelope(sysp, omega)
    k = _density_scale(args)
    write_csv(args.out, ["f_Hz", "theta_opt_rad", "Sxx_opt", "Sxx_SQL", "ratio_dB"],
              [omega / TWO_PI, plan.theta_opt, k * plan.envelope, k * plan.sql, plan.ratio_db])
    w0 = effective_resonance(sysp)
    i = int(np.argmin(plan.ratio_db))
    _say(args, f"best {plan.ratio_db[i]:+.3f} dB at {(omega[i] - w0) / TWO_PI:+.1f} Hz, "
               f"theta = {plan.theta_opt[i] / math.pi:.4f} pi")
    for lo, hi in sub_sql_band(sysp):
        _say(args, f"sub-SQL band {(lo - w0) / TWO_PI:+.1f} .. {(hi - w0) / TWO_PI:+.1f} Hz")


def _desk_system(cfg, quality):
    return desk_scale(cfg.system, quality)


def _default_band(sysp):
    w0 = effective_resonance(sysp)
    half = 10.0 * measurement_linewidth(sysp)
    return w0 - half, w0 + half


def cmd_simulate(cfg, args):
    s = cfg.block("simulate")
    sysp = _desk_system(cfg, s["quality"])
    build_state_space(sysp)
    dt = TWO_PI / (sysp.oscillator.omega_m * s["steps_per_period"])
    thetas = ([normalize_angle(args.theta)] if args.theta is not None
              else [normalize_angle(t) for t in s["thetas_rad"]])
    res = simulate_photocurrent_psd(sysp, thetas, s["segments"], s["segment_length"], dt,
                                    seed=args.seed)
    band = (tuple(TWO_PI * f for f in s["band_hz"]) if "band_hz" in s else _default_band(sysp))
    k = _density_scale(args)
    cols = [[], [], [], []]
    eta_d = detector_efficiency(sysp)
    for th in thetas:
        est = res[th]
        rep = compare_to_analytic(est, sysp, th, band=band)
        _say(args, f"theta = {th:.6f} rad: band-RMS deviation {100 * rep.rms:.2f} % "
                   f"(statistical {100 * rep.expected_rms:.2f} %)")
        sel = (est.omega >= band[0]) & (est.omega <= band[1])
        w = est.omega[sel]
        x = est.psd[sel] / (eta_d * np.abs(transduction(sysp, th, w)) ** 2)
        cols[0].append(np.full(w.size, th))
        cols[1].append(w / TWO_PI)
        cols[2].append(k * x)
        cols[3].append(k * x * est.rel_uncertainty)
    write_csv(args.out, ["theta_rad", "f_Hz", "value", "stderr"], [np.concatenate(c) for c in cols])
    n_trace = s.get("trace_steps", 0)
    if n_trace:
        ss = build_state_space(sysp)
        tr = integrate(ss, n_trace * dt, dt, seed=args.seed)
        cur = synthesize_photocurrent(tr, sysp, thetas[0])
        st = tr.state[0]
        out = Path(args.out)
        write_csv(out.with_name(out.stem + "_trace.csv"), ["t", "X", "Y", "x", "p", "I"],
                  [tr.time, st[:, 0], st[:, 1], st[:, 2], st[:, 3], cur[0]])


def cmd_fit(cfg, args):
    f = cfg.block("fit")
    if "spectrum" not in f:
        raise ConfigError("fit.spectrum (CSV path) is required")
    data = read_csv_columns(cfg.resolve_path(f["spectrum"]))
    for col in ("f_Hz", "value"):
        if col not in data:
            raise ConfigError(f"fit spectrum lacks column {col}")
    sysp = _desk_system(cfg, f["quality"]) if "quality" in f else cfg.system
    omega, value = TWO_PI * data["f_Hz"], data["value"]
    sigma = None
    if "theta_rad" in data:
        avail = np.unique(data["theta_rad"])
        pick = avail[0] if args.theta is None else avail[np.argmin(np.abs(avail - args.theta))]
        keep = data["theta_rad"] == pick
        omega, value = omega[keep], value[keep]
        if "stderr" in data:
            data["stderr"] = data["stderr"][keep]
    if f.get("weighted") and "stderr" in data:
        sigma = data["stderr"] / value
    if "band_hz" in f:
        lo, hi = (TWO_PI * x for x in f["band_hz"])
        keep = (omega >= lo) & (omega <= hi)
        omega, value = omega[keep], value[keep]
        sigma = None if sigma is None else sigma[keep]
    order = np.argsort(omega)
    guess = {}
    g = f.get("guess", {})
    if "g_hz" in g:
        guess["g"] = TWO_PI * g["g_hz"]
    if "theta_rad" in g:
        guess["theta"] = g["theta_rad"]
    if "detuning_hz" in g:
        guess["detuning"] = TWO_PI * g["detuning_hz"]
    if "eta_det" in g:
        guess["eta"] = g["eta_det"]
    if args.theta is not None and "theta" not in guess:
        guess["theta"] = args.theta
    problem = FitProblem(omega[order], value[order], sysp, free=tuple(f["free"]), guess=guess,
                         sigma=None if sigma is None else sigma[order])
    res = fit_spectrum(problem)
    diag = residual_diagnostics(problem, res)
    rep = res.report()
    to_hz = {"g": 1 / TWO_PI, "detuning": 1 / TWO_PI, "theta": 1.0, "eta": 1.0}
    rep["estimates_external"] = {
        {"g": "g_hz", "detuning": "detuning_hz", "theta": "theta_rad", "eta": "eta_det"}[k]:
            float(v * to_hz[k]) for k, v in res.values.items()}
    rep["diagnostics"] = {"runs_z": float(diag.runs_z), "runs_p": float(diag.runs_p),
                          "flags": list(diag.flags)}
    write_report(args.out, rep)
    for k, v in rep["estimates_external"].items():
        _say(args, f"{k} = {v:.8g}")
    if not res.converged:
        raise NumericalError(f"fit did not converge: {res.message}")


def _load_calibration(cfg):
    c = cfg.block("calibrate")
    rec = c.get("record")
    if rec is None:
        raise ConfigError("calibrate.record is required")
    if isinstance(rec, str):
        rec = load_yaml(cfg.resolve_path(rec))
        if not isinstance(rec, dict):
            raise ConfigError("calibration record file must hold a mapping")
    try:
        return load_record(rec)
    except (CalibrationError, ParameterError) as exc:
        raise ConfigError(f"calibration record: {exc}") from None


def cmd_calibrate(cfg, args):
    c = cfg.block("calibrate")
    record = _load_calibration(cfg)
    osc = cfg.system.oscillator
    wm = osc.omega_m
    report = {"n_min": float(minimum_occupancy(record.aux, wm)),
              "K_V2_per_rad2": float(transduction_factor(record)),
              "g0_hz": float(extract_g0(record, wm) / TWO_PI)}
    if "cooling_series" in c:
        rows = read_csv_columns(cfg.resolve_path(c["cooling_series"]))
        recs = [CalibrationRecord(vm, vc, record.tone, record.aux)
                for vm, vc in zip(rows["v_mech_qba"], rows["v_cal_qba"])]
        fit = fit_cooling_series(recs, wm)
        report["g0_hz"] = float(fit.g0 / TWO_PI)
        report["g0_stderr_hz"] = float(fit.g0_stderr / TWO_PI)
        report["cooling_runs"] = len(recs)
    if "spectrum" in c:
        rows = read_csv_columns(cfg.resolve_path(c["spectrum"]))
        if "f_Hz" not in rows or "S_VV" not in rows:
            raise ConfigError("voltage spectrum needs columns f_Hz and S_VV")
        if record.v_cal_meas is None:
            raise ConfigError("record must give v_cal_meas to convert a spectrum")
        omega = TWO_PI * rows["f_Hz"]
        s_vv = rows["S_VV"]
        k = _density_scale(args)
        sxx = voltage_to_displacement(record, osc, omega, s_vv).total
        ratio = sql_ratio(record, osc, omega, s_vv).ratio
        write_csv(args.out, ["f_Hz", "Sxx_m2_per_Hz", "ratio_to_SQL"],
                  [omega / TWO_PI, k * sxx, ratio])
        for key, v in report.items():
            _say(args, f"{key} = {v:.8g}")
    else:
        write_report(args.out, report)
        for key, v in report.items():
            _say(args, f"{key} = {v:.8g}")


def cmd_snr(cfg, args):
    s = cfg.block("snr")
    sysp = cfg.system
    check_stability(sysp)
    thetas = ([normalize_angle(args.theta)] if args.theta is not None
              else [normalize_angle(t) for t in s["thetas_rad"]])
    omega = cfg.grid.omega(sysp)
    w0 = effective_resonance(sysp)
    chi2 = np.abs(effective_susceptibility(sysp, omega)) ** 2
    eta_d = detector_efficiency(sysp)
    force = s["force_psd_n2_per_hz"]
    cols = [[] for _ in range(6)]
    for th in thetas:
        rel = relative_snr_spectrum(sysp, th, omega, floor=s["floor"])
        gain = eta_d * np.abs(transduction(sysp, th, omega)) ** 2
        cols[0].append(np.full(omega.size, th))
        cols[1].append(omega / TWO_PI)
        cols[2].append(rel)
        cols[3].append(db(rel))
        cols[4].append(gain * chi2 * force)
        cols[5].append(gain * measured_displacement_spectrum(sysp, th, omega))
        above = omega[rel > 1]
        if above.size:
            _say(args, f"theta = {th:.6f} rad: SNR above SQL-limited value from "
                       f"{(above[0] - w0) / TWO_PI:+.1f} to {(above[-1] - w0) / TWO_PI:+.1f} Hz")
        else:
            _say(args, f"theta = {th:.6f} rad: SNR never exceeds the SQL-limited value")
    write_csv(args.out, ["theta_rad", "f_Hz", "relative_snr", "relative_snr_dB", "signal_raw",
                         "noise_raw"], [np.concatenate(c) for c in cols])


COMMANDS = {
    "spectrum": cmd_spectrum,
    "heatmap": cmd_heatmap,
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "snr": cmd_snr,
}


def build_parser():
    p = argparse.ArgumentParser(prog="optosql", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", type=Path, default=None,
                       help="YAML/JSON configuration (defaults to the built-in operating point)")
        c.add_argument("--out", type=Path, required=True)
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--theta", type=float, default=None, help="homodyne angle in rad")
        c.add_argument("--single-sided", action="store_true",
                       help="write single-sided densities (x2)")
        c.add_argument("--quiet", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ParameterError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (UnstableError, BlindQuadratureError, CalibrationError) as exc:
        log.error("invalid physical configuration: %s", exc)
        return EXIT_PHYSICS
    except (NumericalError, FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
