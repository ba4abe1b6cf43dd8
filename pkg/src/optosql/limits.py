"""Standard quantum limit, variational readout and force-sensing figures of merit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from ._optimize import golden_section
from .constants import HBAR
from .model import (
    detector_efficiency,
    effective_linewidth,
    effective_resonance,
    effective_susceptibility,
    mech_susceptibility,
    measured_displacement_spectrum,
    noise_spectrum,
    transduction,
    zero_point_force_spectrum,
)
from .params import MechanicalOscillator, SystemParams


def db(ratio):
    return 10.0 * np.log10(ratio)


def from_db(value):
    return 10.0 ** (np.asarray(value) / 10.0)


# --- uncorrelated imprecision/backaction tradeoff -----------------------------

def added_noise_uncorrelated(osc: MechanicalOscillator, gamma_meas, omega):
    """Imprecision plus backaction displacement noise at measurement rate `gamma_meas`."""
    xz2 = osc.x_zpf ** 2
    chi2 = np.abs(mech_susceptibility(osc, omega)) ** 2
    return xz2 / (4.0 * gamma_meas) + chi2 * HBAR ** 2 / xz2 * gamma_meas


def optimal_measurement_rate(osc: MechanicalOscillator, omega):
    return osc.x_zpf ** 2 / (2.0 * HBAR * np.abs(mech_susceptibility(osc, omega)))


# --- SQL --------------------------------------------------------------------

@dataclass
class SqlCurve:
    omega: np.ndarray
    values: np.ndarray
    susceptibility: str  # "effective" or "bare"


def sql_spectrum(sys: SystemParams, omega, susceptibility="effective"):
    """hbar |chi(Omega)| using the dressed (default) or bare mechanical response."""
    omega = np.asarray(omega, dtype=float)
    if susceptibility == "effective":
        chi = effective_susceptibility(sys, omega)
    elif susceptibility == "bare":
        chi = mech_susceptibility(sys.oscillator, omega)
    else:
        raise ValueError(f"unknown susceptibility source {susceptibility!r}")
    return SqlCurve(omega, HBAR * np.abs(chi), susceptibility)


def backaction_rate(sys: SystemParams):
    """Quantum backaction decoherence rate 4 g^2 / kappa."""
    return 4.0 * sys.g ** 2 / sys.kappa


def quantum_cooperativity(sys: SystemParams):
    gamma = sys.bath.decoherence_rate(sys.oscillator.gamma_m)
    if gamma <= 0:
        raise ValueError("quantum cooperativity undefined for a zero-occupancy bath")
    return backaction_rate(sys) / gamma


# --- variational readout ------------------------------------------------------

def optimal_quadrature(sys: SystemParams, omega, n_coarse=256, tol=1e-6):
    """Homodyne angle minimizing the measured spectrum, per frequency.

    A coarse scan over [0, pi) picks the best cell, golden-section search
    refines it to `tol` rad. Returns ``(theta_opt, s_min)`` with the shape of
    `omega`.
    """
    omega = np.asarray(omega, dtype=float)
    flat = np.atleast_1d(omega).ravel()
    thetas = np.linspace(0.0, np.pi, n_coarse, endpoint=False)
    coarse = measured_displacement_spectrum(sys, thetas[:, None], flat[None, :])
    best = thetas[np.argmin(coarse, axis=0)]
    h = np.pi / n_coarse
    theta, s_min = golden_section(
        lambda t: measured_displacement_spectrum(sys, t, flat), best - h, best + h, tol)
    theta = np.mod(theta, np.pi)
    return theta.reshape(omega.shape), s_min.reshape(omega.shape)


@dataclass
class VariationalPlan:
    omega: np.ndarray
    theta_opt: np.ndarray
    envelope: np.ndarray
    sql: np.ndarray

    @property
    def ratio(self):
        return self.envelope / self.sql

    @property
    def ratio_db(self):
        return db(self.ratio)


def variational_envelope(sys: SystemParams, omega):
    omega = np.asarray(omega, dtype=float)
    theta, s_min = optimal_quadrature(sys, omega)
    return VariationalPlan(omega, theta, s_min, sql_spectrum(sys, omega).values)


def sql_ratio_map(sys: SystemParams, thetas, omega):
    """S_meas / SQL on a (theta, omega) grid; rows follow `thetas`."""
    thetas = np.asarray(thetas, dtype=float)
    omega = np.asarray(omega, dtype=float)
    sql = sql_spectrum(sys, omega).values
    return measured_displacement_spectrum(sys, thetas[:, None], omega[None, :]) / sql[None, :]


def measurement_linewidth(sys: SystemParams):
    """Width of the resonance broadened by damping, backaction and thermal decoherence."""
    return (effective_linewidth(sys) + backaction_rate(sys)
            + sys.bath.decoherence_rate(sys.oscillator.gamma_m))


def band_search_grid(sys: SystemParams, n=2048, widths=5.0):
    """Log-symmetric grid around the dressed resonance for band searches."""
    w0 = effective_resonance(sys)
    span = widths * measurement_linewidth(sys)
    offsets = np.logspace(np.log10(span * 1e-4), np.log10(span), n // 2)
    return np.concatenate([w0 - offsets[::-1], w0 + offsets])


def sub_sql_band(sys: SystemParams, theta=None, omega=None, rtol=1e-6):
    """Frequency intervals where the measured noise is below the SQL.

    With `theta` given the readout angle is fixed; with ``theta=None`` the
    variational (per-frequency optimal) readout is used. Endpoints are located
    by bracketed root finding on the log ratio. Returns a list of
    ``(omega_lo, omega_hi)`` in rad/s, empty when the SQL is never beaten.
    """
    if omega is None:
        omega = band_search_grid(sys)
    omega = np.asarray(omega, dtype=float)

    def log_ratio(w):
        w = np.asarray(w, dtype=float)
        if theta is None:
            s = optimal_quadrature(sys, w)[1]
        else:
            s = measured_displacement_spectrum(sys, theta, w)
        return np.log(s / sql_spectrum(sys, w).values)

    lr = log_ratio(omega)
    below = lr < 0
    if not np.any(below):
        return []

    def edge(i):
        a, b = omega[i], omega[i + 1]
        return brentq(lambda w: float(log_ratio(w)), a, b, xtol=rtol * 1e-3 * abs(a), rtol=1e-14)

    bands = []
    start = omega[0] if below[0] else None
    for i in range(len(omega) - 1):
        if below[i] == below[i + 1]:
            continue
        x = edge(i)
        if below[i + 1]:
            start = x
        else:
            bands.append((start, x))
            start = None
    if start is not None:
        bands.append((start, omega[-1]))
    return bands


# --- force sensing --------------------------------------------------------------

def force_noise_spectrum(sys: SystemParams, theta, omega):
    """Measured displacement noise referred to force via the dressed response (N^2 s)."""
    chi = effective_susceptibility(sys, omega)
    return measured_displacement_spectrum(sys, theta, omega) / np.abs(chi) ** 2


@dataclass
class SnrReport:
    """Signal, noise and SNR of a driven-force measurement at one frequency.

    ``*_raw`` entries are photocurrent-referred (shot noise = 1/2), the rest
    are displacement-referred except ``force_signal``.
    """

    omega0: float
    theta: float
    force_power: float
    signal: float
    signal_raw: float
    force_signal: float
    noise_floor: float
    noise_raw: float
    reference_floor: float
    snr: float
    reference_snr: float
    relative_snr: float
    convention: str
    meta: dict = field(default_factory=dict)

    @property
    def relative_snr_db(self):
        return float(db(self.relative_snr))


def _noise_floors(sys, theta, omega, floor):
    spec = noise_spectrum(sys, theta, omega)
    chi = effective_susceptibility(sys, omega)
    s_zp = np.abs(chi) ** 2 * zero_point_force_spectrum(sys)
    if floor == "added":
        noise = spec["imp"] + spec["qba"] + spec["corr"] + s_zp
    elif floor == "total":
        noise = spec["total"]
    else:
        raise ValueError(f"unknown noise-floor convention {floor!r}")
    return noise, spec["sql"] + s_zp, spec


def snr_relative_to_sql(sys: SystemParams, theta, omega0, force_power, floor="added"):
    """SNR of a force tone relative to a measurement sitting at the SQL.

    ``floor="added"`` compares the measurement-added noise plus zero-point
    motion with SQL plus zero-point motion; ``floor="total"`` keeps the full
    measured noise (thermal excess included) in the numerator's floor.
    """
    if force_power <= 0:
        raise ValueError("force power must be positive")
    noise, ref, spec = _noise_floors(sys, theta, np.asarray(omega0, dtype=float), floor)
    chi2 = float(np.abs(effective_susceptibility(sys, omega0)) ** 2)
    signal = chi2 * force_power
    gain = detector_efficiency(sys) * float(np.abs(transduction(sys, theta, omega0)) ** 2)
    noise, ref = float(noise), float(ref)
    return SnrReport(
        omega0=float(omega0),
        theta=float(theta),
        force_power=float(force_power),
        signal=signal,
        signal_raw=gain * signal,
        force_signal=gain * signal / (gain * chi2),
        noise_floor=noise,
        noise_raw=gain * float(spec["total"]),
        reference_floor=ref,
        snr=signal / noise,
        reference_snr=signal / ref,
        relative_snr=ref / noise,
        convention=f"floor={floor}; reference=SQL+zero-point",
    )


def relative_snr_spectrum(sys: SystemParams, theta, omega, floor="added"):
    noise, ref, _ = _noise_floors(sys, theta, np.asarray(omega, dtype=float), floor)
    return ref / noise
