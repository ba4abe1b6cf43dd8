"""Absolute calibration of homodyne voltage spectra.

Step one uses a sideband-cooled oscillator, whose occupancy is pinned by
quantum backaction, as a thermometer to extract g0 against a phase
modulation tone. Step two uses the same tone to convert any voltage spectrum
into displacement units, or straight into a ratio to the bare SQL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.signal
from scipy.optimize import least_squares

from .constants import HBAR
from .model import NoiseSpectrum
from .params import MechanicalOscillator, ParameterError


class CalibrationError(ValueError):
    """Raised when calibration inputs are inconsistent or a tone cannot be found."""


@dataclass(frozen=True)
class CalibrationToneSpec:
    omega_cal: float
    phi: float

    def __post_init__(self):
        if not self.phi > 0:
            raise CalibrationError("phase modulation depth must be positive")
        if not self.omega_cal > 0:
            raise CalibrationError("tone frequency must be positive")

    @property
    def phase_variance(self):
        return 0.5 * self.phi ** 2


@dataclass(frozen=True)
class AuxiliaryCoolingSpec:
    kappa_aux: float
    detuning_aux: float

    def __post_init__(self):
        if not self.kappa_aux > 0:
            raise CalibrationError("auxiliary linewidth must be positive")
        if not self.detuning_aux < 0:
            raise CalibrationError("auxiliary beam must be red-detuned (negative detuning)")

    def n_min(self, omega_m):
        return minimum_occupancy(self, omega_m)


def _sideband_weights(aux, omega_m):
    k2 = (aux.kappa_aux / 2.0) ** 2
    a_minus = 1.0 / (k2 + (aux.detuning_aux + omega_m) ** 2)  # anti-Stokes
    a_plus = 1.0 / (k2 + (aux.detuning_aux - omega_m) ** 2)  # Stokes
    return a_minus, a_plus


def minimum_occupancy(aux: AuxiliaryCoolingSpec, omega_m):
    """Backaction-limited phonon occupancy under sideband cooling."""
    a_minus, a_plus = _sideband_weights(aux, omega_m)
    if a_minus <= a_plus:
        raise CalibrationError("auxiliary beam does not cool (Stokes rate >= anti-Stokes rate)")
    return a_plus / (a_minus - a_plus)


@dataclass(frozen=True)
class CalibrationRecord:
    """Voltage variances (V^2) from the backaction-referenced calibration run.

    ``v_cal_meas`` is the tone variance in the spectrum being converted; it
    defaults to the reference value and is usually set per spectrum with
    :meth:`for_measurement`.
    """

    v_mech_qba: float
    v_cal_qba: float
    tone: CalibrationToneSpec
    aux: AuxiliaryCoolingSpec
    v_cal_meas: Optional[float] = None
    g0: Optional[float] = None

    def __post_init__(self):
        for name in ("v_mech_qba", "v_cal_qba"):
            if not getattr(self, name) > 0:
                raise CalibrationError(f"{name} must be positive")
        if self.v_cal_meas is not None and not self.v_cal_meas > 0:
            raise CalibrationError("calibration tone variance in the measurement must be positive")
        if self.g0 is not None and not self.g0 > 0:
            raise CalibrationError("g0 must be positive")

    def for_measurement(self, v_cal_meas):
        return replace(self, v_cal_meas=v_cal_meas)

    def with_g0(self, omega_m):
        return replace(self, g0=extract_g0(self, omega_m))

    @property
    def tone_variance_meas(self):
        return self.v_cal_qba if self.v_cal_meas is None else self.v_cal_meas


def transduction_factor(record: CalibrationRecord):
    """Voltage-per-phase conversion K in V^2/rad^2."""
    return record.v_cal_qba / record.tone.phase_variance


def extract_g0(record: CalibrationRecord, omega_m):
    """Vacuum coupling rate from one backaction-limited cooling record."""
    n_min = minimum_occupancy(record.aux, omega_m)
    radicand = (record.v_mech_qba / record.v_cal_qba) * omega_m ** 2 * record.tone.phase_variance \
        / (2.0 * (n_min + 0.5))
    assert radicand > 0
    return math.sqrt(radicand)


def _scaled_frequency_variance(record, omega_m):
    """<dOmega^2>_mech / 2 inferred from the voltage ratio (equals g0^2 (n + 1/2))."""
    return 0.5 * (record.v_mech_qba / record.v_cal_qba) * omega_m ** 2 * record.tone.phase_variance


@dataclass
class CoolingFit:
    g0: float
    g0_stderr: float
    n_th: Optional[float]
    n_th_stderr: Optional[float]
    occupancies: np.ndarray
    residuals: np.ndarray


def fit_cooling_series(records: Sequence[CalibrationRecord], omega_m, gamma_m=None,
                       gamma_opt=None, rel_sigma=None):
    """Combine a sideband-cooling dataset into one g0 estimate.

    Each record yields y_i = g0^2 (n_i + 1/2). Without `gamma_opt` every run
    is taken to sit at the backaction floor n_min and g0^2 follows from a
    weighted linear least-squares fit. With per-run optical damping rates
    `gamma_opt` (and the intrinsic `gamma_m`) the occupancy is
    n_i = (gamma_m n_th + gamma_opt_i n_min) / (gamma_m + gamma_opt_i) and the
    bath occupancy n_th is fitted jointly. `rel_sigma` are relative
    uncertainties of y_i (default: equal).
    """
    if len(records) == 0:
        raise CalibrationError("empty cooling dataset")
    y = np.array([_scaled_frequency_variance(r, omega_m) for r in records])
    n_min = np.array([minimum_occupancy(r.aux, omega_m) for r in records])
    w = np.ones_like(y) if rel_sigma is None else 1.0 / np.asarray(rel_sigma, dtype=float)
    if gamma_opt is None:
        a = n_min + 0.5
        # minimize sum(w_i^2 (y_i - g0^2 a_i)^2 / y_i^2)
        u = w * a / y
        g2 = float(np.sum(u * w) / np.sum(u * u))
        res = w * (1.0 - g2 * a / y)
        dof = max(len(y) - 1, 1)
        s2 = float(np.sum(res ** 2) / dof) if len(y) > 1 else 0.0
        g2_err = math.sqrt(s2 / np.sum(u * u))
        g0 = math.sqrt(g2)
        return CoolingFit(g0, 0.5 * g2_err / g0, None, None, n_min, res)

    if gamma_m is None:
        raise CalibrationError("gamma_m is required when fitting the bath occupancy")
    gopt = np.asarray(gamma_opt, dtype=float)
    if gopt.shape != y.shape:
        raise CalibrationError("one optical damping rate per record is required")

    def occupancy(n_th):
        return (gamma_m * n_th + gopt * n_min) / (gamma_m + gopt)

    def resid(p):
        g2, n_th = p
        return w * (1.0 - g2 * (occupancy(n_th) + 0.5) / y)

    g2_0 = float(np.median(y / (n_min + 0.5)))
    sol = least_squares(resid, [g2_0, float(np.max(n_min))], x_scale="jac",
                        bounds=([0.0, 0.0], [np.inf, np.inf]))
    g2, n_th = sol.x
    dof = max(len(y) - 2, 1)
    s2 = float(np.sum(sol.fun ** 2) / dof)
    try:
        cov = np.linalg.inv(sol.jac.T @ sol.jac) * s2
        g2_err, n_err = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        g2_err = n_err = float("nan")
    g0 = math.sqrt(g2)
    return CoolingFit(g0, 0.5 * g2_err / g0, float(n_th), float(n_err), occupancy(n_th), sol.fun)


def synthesize_record(g0, omega_m, tone: CalibrationToneSpec, aux: AuxiliaryCoolingSpec,
                      gain=1.0, occupancy=None, v_cal_meas=None):
    """Forward model: the variances a record would hold for coupling `g0`.

    `gain` is the transduction factor K (V^2/rad^2). `occupancy` defaults to
    the backaction floor n_min.
    """
    n = minimum_occupancy(aux, omega_m) if occupancy is None else occupancy
    v_mech = gain * 2.0 * g0 ** 2 * (n + 0.5) / omega_m ** 2
    return CalibrationRecord(v_mech_qba=v_mech, v_cal_qba=gain * tone.phase_variance,
                             tone=tone, aux=aux, v_cal_meas=v_cal_meas)


def _require_tone_meas(record):
    if record.v_cal_meas is None:
        raise CalibrationError("record lacks the tone variance of the measurement being converted")
    return record.v_cal_meas


def conversion_factor(record: CalibrationRecord, osc: MechanicalOscillator, path="recast"):
    """Multiplier taking S_VV (V^2 s) to S_xx (m^2 s).

    ``path="g0"`` uses the extracted coupling rate, ``path="recast"`` the
    g0-free form in which the modulation depth cancels.
    """
    v_meas = _require_tone_meas(record)
    xz2 = osc.x_zpf ** 2
    if path == "g0":
        g0 = record.g0 if record.g0 is not None else extract_g0(record, osc.omega_m)
        return xz2 * osc.omega_m ** 2 * record.tone.phase_variance / (g0 ** 2 * v_meas)
    if path == "recast":
        n_min = minimum_occupancy(record.aux, osc.omega_m)
        return xz2 * (2.0 * n_min + 1.0) / record.v_mech_qba * record.v_cal_qba / v_meas
    raise ValueError(f"unknown conversion path {path!r}")


def voltage_to_displacement(record: CalibrationRecord, osc: MechanicalOscillator, omega, s_vv,
                            path="recast"):
    """Calibrated displacement spectrum from a voltage spectrum on grid `omega`."""
    s_vv = np.asarray(s_vv, dtype=float)
    factor = conversion_factor(record, osc, path)
    return NoiseSpectrum(np.asarray(omega, dtype=float), {"total": factor * s_vv},
                         meta={"calibration_path": path, "conversion_factor": factor})


@dataclass
class SqlRatio:
    omega: np.ndarray
    ratio: np.ndarray
    susceptibility: str = "bare chi_m"


def sql_ratio(record: CalibrationRecord, osc: MechanicalOscillator, omega, s_vv):
    """Measured noise over the bare-oscillator SQL, free of the mass.

    Uses the tone frequency for the phase-to-frequency conversion of the
    tone; with omega_cal = omega_m this equals the calibrated spectrum
    divided by hbar |chi_m|.
    """
    v_meas = _require_tone_meas(record)
    omega = np.asarray(omega, dtype=float)
    w_m, g_m = osc.omega_m, osc.gamma_m
    n_min = minimum_occupancy(record.aux, w_m)
    root = np.sqrt((w_m ** 2 - omega ** 2) ** 2 + g_m ** 2 * omega ** 2)
    pref = w_m * (n_min + 0.5) * root / (record.v_mech_qba * record.tone.omega_cal ** 2)
    return SqlRatio(omega, pref * record.v_cal_qba / v_meas * np.asarray(s_vv, dtype=float))


def bare_sql(osc: MechanicalOscillator, omega):
    omega = np.asarray(omega, dtype=float)
    return HBAR / (osc.mass * np.sqrt((osc.omega_m ** 2 - omega ** 2) ** 2
                                      + osc.gamma_m ** 2 * omega ** 2))


# --- reading variances from spectra ------------------------------------------

def _kernel_fraction(window, nperseg, offset_bins, halfwidth_bins):
    """Share of a windowed tone's power landing in the 2*halfwidth+1 bins around the tone.

    `offset_bins` is the tone position relative to the central bin. Summed
    over every bin the periodogram of a tone recovers N*sum(w^2) (Parseval),
    whatever the offset.
    """
    w = scipy.signal.get_window(window, nperseg)
    n = np.arange(nperseg)
    k = np.arange(-halfwidth_bins, halfwidth_bins + 1) - offset_bins
    dtft = np.exp(-2j * np.pi * np.outer(k, n) / nperseg) @ w
    return float(np.sum(np.abs(dtft) ** 2) / (nperseg * np.sum(w ** 2)))


def tone_variance_from_psd(omega, psd, omega_cal, bin_halfwidth, window=None, nperseg=None,
                           detect_ratio=10.0, background_bins=None):
    """Variance (V^2) of a tone at `omega_cal` in a double-sided PSD (V^2 s).

    The PSD is integrated over +-`bin_halfwidth` bins around +-omega_cal
    (the negative side is taken as the mirror image when the grid lacks it)
    after removing the median background of the neighbouring bins. Passing
    the Welch `window` name and `nperseg` rescales for window leakage out of
    the integration range.
    """
    omega = np.asarray(omega, dtype=float)
    psd = np.asarray(psd, dtype=float)
    if omega.size < 3:
        raise CalibrationError("PSD grid too short")
    d_omega = float(np.median(np.diff(omega)))
    if not omega[0] <= omega_cal <= omega[-1]:
        raise CalibrationError("tone frequency outside the PSD grid")
    bg_bins = background_bins or max(8 * bin_halfwidth, 32)

    def side(center):
        i0 = int(round((center - omega[0]) / d_omega))
        lo, hi = max(i0 - bin_halfwidth, 0), min(i0 + bin_halfwidth + 1, omega.size)
        ring = np.r_[max(lo - bg_bins, 0):lo, hi:min(hi + bg_bins, omega.size)]
        if ring.size == 0:
            raise CalibrationError("no background bins around the tone")
        bg = float(np.median(psd[ring]))
        peak = float(np.max(psd[lo:hi]))
        if not peak > detect_ratio * bg:
            raise CalibrationError(f"no tone found near {center / (2 * np.pi):.6g} Hz")
        excess = float(np.sum(psd[lo:hi] - bg)) * d_omega / (2.0 * np.pi)
        offset = (center - omega[i0]) / d_omega
        return excess, offset

    pos, offset = side(omega_cal)
    if omega[0] <= -omega_cal:
        neg, _ = side(-omega_cal)
    else:
        neg = pos
    var = pos + neg
    if window is not None:
        if nperseg is None:
            raise ValueError("nperseg is required for the leakage correction")
        var /= _kernel_fraction(window, nperseg, offset, bin_halfwidth)
    return var


def mechanical_variance_from_psd(omega, psd, omega_center, halfwidth, floor=None):
    """Integrated mechanical variance around `omega_center` above the imprecision floor.

    `halfwidth` is in rad/s. `floor` defaults to the median PSD outside the
    band. Both frequency signs are integrated as for the tone.
    """
    omega = np.asarray(omega, dtype=float)
    psd = np.asarray(psd, dtype=float)
    band = np.abs(np.abs(omega) - omega_center) <= halfwidth
    if not np.any(band):
        raise CalibrationError("integration band does not overlap the grid")
    if floor is None:
        if np.all(band):
            raise CalibrationError("cannot estimate the floor: band covers the whole grid")
        floor = float(np.median(psd[~band]))
    d_omega = np.gradient(omega)
    var = float(np.sum((psd[band] - floor) * d_omega[band])) / (2.0 * np.pi)
    if not np.any(omega[band] < 0):
        var *= 2.0
    if var <= 0:
        raise CalibrationError("no mechanical variance above the floor")
    return var


def load_record(data: dict):
    """Build a record from external units (Hz, rad, V^2)."""
    allowed = {"v_mech_qba", "v_cal_qba", "v_cal_meas", "tone", "aux", "g0_hz"}
    unknown = set(data) - allowed
    if unknown:
        raise ParameterError(f"unknown calibration record keys: {sorted(unknown)}")
    try:
        tone = CalibrationToneSpec(omega_cal=2 * np.pi * float(data["tone"]["f_cal_hz"]),
                                   phi=float(data["tone"]["phi_rad"]))
        aux = AuxiliaryCoolingSpec(kappa_aux=2 * np.pi * float(data["aux"]["kappa_aux_hz"]),
                                   detuning_aux=2 * np.pi * float(data["aux"]["detuning_aux_hz"]))
        g0 = data.get("g0_hz")
        return CalibrationRecord(
            v_mech_qba=float(data["v_mech_qba"]), v_cal_qba=float(data["v_cal_qba"]),
            tone=tone, aux=aux,
            v_cal_meas=None if data.get("v_cal_meas") is None else float(data["v_cal_meas"]),
            g0=None if g0 is None else 2 * np.pi * float(g0))
    except KeyError as exc:
        raise ParameterError(f"calibration record missing key {exc}") from None
