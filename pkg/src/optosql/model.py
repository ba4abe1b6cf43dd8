"""Frequency-domain response functions and symmetrized noise spectra.

Everything here is a pure function of a :class:`~optosql.params.SystemParams`
and an angular frequency (scalar or array, rad/s, lab frame relative to the
optical carrier). Spectra are double-sided and symmetrized: a displacement
spectrum integrates over ``dOmega / 2pi`` to the variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np

from ._optimize import golden_section
from .constants import HBAR
from .params import MechanicalOscillator, OpticalCavity, SystemParams


class UnstableError(RuntimeError):
    """The linearized dynamics are not damped (anti-damping or a pole on the grid)."""


class BlindQuadratureError(ZeroDivisionError):
    """The chosen quadrature carries no displacement signal at this frequency."""


# --- susceptibilities -------------------------------------------------------

def mech_susceptibility(osc: MechanicalOscillator, omega):
    omega = np.asarray(omega, dtype=float)
    return 1.0 / (osc.mass * (osc.omega_m ** 2 - omega ** 2 - 1j * osc.gamma_m * omega))


def _chi_c(kappa, detuning, omega):
    return 1.0 / (kappa / 2.0 - 1j * (detuning + omega))


def cavity_susceptibility(cav: OpticalCavity, omega):
    return _chi_c(cav.kappa, cav.detuning, np.asarray(omega, dtype=float))


def _probe_chi(sys, omega):
    omega = np.asarray(omega, dtype=float)
    return _chi_c(sys.kappa, sys.detuning, omega), _chi_c(sys.kappa, sys.detuning, -omega)


def inverse_effective_susceptibility(sys: SystemParams, omega):
    """chi_eff^-1: bare inverse response plus one optical-spring term per tone."""
    omega = np.asarray(omega, dtype=float)
    osc = sys.oscillator
    inv = osc.mass * (osc.omega_m ** 2 - omega ** 2 - 1j * osc.gamma_m * omega)
    for g, kappa, det in sys.tones():
        spring = _chi_c(kappa, det, omega) - np.conj(_chi_c(kappa, det, -omega))
        inv = inv - 2j * g ** 2 * osc.mass * osc.omega_m * spring
    return inv


def effective_susceptibility(sys: SystemParams, omega):
    inv = inverse_effective_susceptibility(sys, omega)
    tiny = np.finfo(float).tiny
    if np.any(~np.isfinite(inv)) or np.any(np.abs(inv) <= tiny):
        raise UnstableError("effective susceptibility has a pole on the evaluation grid")
    return 1.0 / inv


# --- stability --------------------------------------------------------------

def drift_matrix(sys: SystemParams):
    """Drift matrix of the linear dynamics in zero-point units.

    State ordering: (x/x_zpf, p/p_zpf, X_1, Y_1, X_2, Y_2, ...) with one
    (amplitude, phase) pair per tone; p_zpf = m omega_m x_zpf.
    """
    osc = sys.oscillator
    tones = sys.tones()
    n = 2 + 2 * len(tones)
    a = np.zeros((n, n))
    a[0, 1] = osc.omega_m
    a[1, 0] = -osc.omega_m
    a[1, 1] = -osc.gamma_m
    for k, (g, kappa, det) in enumerate(tones):
        i = 2 + 2 * k
        a[i, i] = a[i + 1, i + 1] = -kappa / 2.0
        a[i, i + 1] = -det
        a[i + 1, i] = det
        a[i + 1, 0] = np.sqrt(2.0) * g
        a[1, i] = 2.0 * np.sqrt(2.0) * g
    return a


def check_stability(sys: SystemParams):
    """Raise :class:`UnstableError` unless every mode of the dynamics is damped.

    Returns the eigenvalues (1/s) of the drift matrix.
    """
    ev = np.linalg.eigvals(drift_matrix(sys))
    worst = ev[np.argmax(ev.real)]
    if worst.real >= 0:
        raise UnstableError(f"anti-damped mode with eigenvalue {worst:.6g} 1/s")
    return ev


def effective_resonance(sys: SystemParams, rel_tol=1e-6):
    """Frequency minimizing |chi_eff^-1|, i.e. the dressed mechanical resonance."""
    osc = sys.oscillator
    lo, hi = 0.5 * osc.omega_m, 1.5 * osc.omega_m
    grid = np.linspace(lo, hi, 4097)
    mag = np.abs(inverse_effective_susceptibility(sys, grid))
    i = int(np.argmin(mag))
    step = grid[1] - grid[0]
    a, b = grid[i] - step, grid[i] + step
    x, _ = golden_section(lambda w: np.abs(inverse_effective_susceptibility(sys, w)),
                          a, b, rel_tol * osc.omega_m)
    return float(x)


def effective_linewidth(sys: SystemParams):
    """Full width at half maximum of |chi_eff|^2 around the dressed resonance."""
    from scipy.optimize import brentq

    w0 = effective_resonance(sys, rel_tol=1e-12)
    peak = abs(effective_susceptibility(sys, w0)) ** 2

    def f(w):
        return abs(effective_susceptibility(sys, w)) ** 2 - peak / 2.0

    span = sys.oscillator.gamma_m
    while f(w0 + span) > 0:
        span *= 2.0
    hi = brentq(f, w0, w0 + span, xtol=1e-12 * w0, rtol=1e-15)
    span = sys.oscillator.gamma_m
    while f(w0 - span) > 0:
        span *= 2.0
    lo = brentq(f, w0 - span, w0, xtol=1e-12 * w0, rtol=1e-15)
    return hi - lo


# --- transduction and noise spectra -----------------------------------------

def transduction(sys: SystemParams, theta, omega):
    """Position-to-output-quadrature transfer f^theta(Omega) (1/m)."""
    cp, cm = _probe_chi(sys, omega)
    pre = -1j * sys.g / (np.sqrt(2.0) * sys.x_zpf) * np.sqrt(sys.cavity.kappa2)
    return pre * (cp * np.exp(1j * theta) - np.conj(cm) * np.exp(-1j * theta))


def _quadrature_weight(sys, theta, omega):
    # |chi_+ e^{i theta} - conj(chi_-) e^{-i theta}|^2; the difference form keeps
    # precision next to blind quadratures
    num, den = _correlation_parts(sys, theta, omega)
    return np.abs(den) ** 2


def imprecision_spectrum(sys: SystemParams, theta, omega):
    """Shot-noise floor referred to displacement (m^2 s).

    inf on blind quadratures and without coupling.
    """
    w = _quadrature_weight(sys, theta, omega)
    with np.errstate(divide="ignore"):
        scale = np.float64(sys.x_zpf ** 2) / (sys.g ** 2 * sys.eta * sys.kappa)
        return scale / w


def qba_force_spectrum(sys: SystemParams, omega):
    cp, cm = _probe_chi(sys, omega)
    return HBAR ** 2 / (2.0 * sys.x_zpf ** 2) * sys.g ** 2 * sys.kappa * (np.abs(cp) ** 2 + np.abs(cm) ** 2)


def thermal_force_spectrum(sys: SystemParams):
    osc = sys.oscillator
    return osc.mass * osc.gamma_m * HBAR * osc.omega_m * (2.0 * sys.bath.n_eff + 1.0)


def zero_point_force_spectrum(sys: SystemParams):
    osc = sys.oscillator
    return osc.mass * osc.gamma_m * HBAR * osc.omega_m


def _correlation_parts(sys, theta, omega):
    cp, cm = _probe_chi(sys, omega)
    num = cp * np.exp(1j * theta) + np.conj(cm) * np.exp(-1j * theta)
    den = cp * np.exp(1j * theta) - np.conj(cm) * np.exp(-1j * theta)
    return num, den


def correlation_spectrum(sys: SystemParams, theta, omega):
    """Imprecision-backaction cross spectrum S_xF (N m s, complex)."""
    num, den = _correlation_parts(sys, theta, omega)
    if np.any(den == 0):
        raise BlindQuadratureError("correlation undefined on a blind quadrature")
    return HBAR / 2j * num / den


def _components(sys, theta, omega):
    omega = np.asarray(omega, dtype=float)
    chi = effective_susceptibility(sys, omega)
    chi2 = np.abs(chi) ** 2
    imp = imprecision_spectrum(sys, theta, omega)
    qba = chi2 * qba_force_spectrum(sys, omega)
    th = chi2 * thermal_force_spectrum(sys) * np.ones_like(omega)
    num, den = _correlation_parts(sys, theta, omega)
    blind = den == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        sxf = np.where(blind, 0.0, HBAR / 2j * num / np.where(blind, 1.0, den))
    corr = 2.0 * np.real(np.conj(chi) * sxf)
    return chi, imp, qba, th, corr


def measured_displacement_spectrum(sys: SystemParams, theta, omega):
    _, imp, qba, th, corr = _components(sys, theta, omega)
    return imp + qba + th + corr


def detector_efficiency(sys: SystemParams):
    """Homodyne efficiency behind the cavity port.

    The total efficiency already contains the out-coupling kappa2/kappa, so
    the detector itself sees ``eta * kappa / kappa2``.
    """
    eta_d = sys.eta * sys.kappa / sys.cavity.kappa2
    if eta_d > 1.0 + 1e-12:
        raise ValueError(
            f"total efficiency {sys.eta:.4g} exceeds the cavity out-coupling "
            f"{sys.cavity.overcoupling:.4g}")
    return min(eta_d, 1.0)


def photocurrent_spectrum(sys: SystemParams, theta, omega):
    """Unitless homodyne photocurrent PSD; shot noise is 1/2."""
    gain = detector_efficiency(sys) * np.abs(transduction(sys, theta, omega)) ** 2
    return gain * measured_displacement_spectrum(sys, theta, omega)


def shot_normalized_spectrum(sys: SystemParams, theta, omega):
    _, imp, qba, th, corr = _components(sys, theta, omega)
    if np.any(~np.isfinite(imp)):
        raise BlindQuadratureError("shot-noise normalization undefined on a blind quadrature")
    return (imp + qba + th + corr) / imp


@dataclass
class NoiseSpectrum:
    """Symmetrized double-sided spectra on a common grid.

    ``components`` holds displacement-referred contributions in m^2 s:
    ``imp``, ``qba`` (|chi_eff|^2 S_FF^qba), ``th``, ``corr`` (the
    2 Re[chi_eff^* S_xF] cross term), ``total`` and optionally ``sql``.
    """

    omega: np.ndarray
    components: Dict[str, np.ndarray]
    theta: Optional[float] = None
    units: str = "m^2 s"
    convention: str = "double-sided symmetrized"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if self.omega.size > 1 and np.any(np.diff(self.omega) <= 0):
            raise ValueError("frequency grid must be strictly increasing")

    def __getitem__(self, key):
        return self.components[key]

    @property
    def frequency_hz(self):
        return self.omega / (2.0 * np.pi)

    @property
    def total(self):
        return self.components["total"]

    def single_sided(self):
        """Copy with every density doubled (one-sided convention)."""
        return NoiseSpectrum(self.omega, {k: 2.0 * v for k, v in self.components.items()},
                             self.theta, self.units, "single-sided symmetrized", dict(self.meta))


def noise_spectrum(sys: SystemParams, theta, omega, sql=True):
    """All contributions to the measured displacement spectrum at angle `theta`."""
    chi, imp, qba, th, corr = _components(sys, theta, omega)
    total = imp + qba + th + corr
    finite = np.isfinite(total)
    parts = imp[finite] + qba[finite] + th[finite] + corr[finite]
    assert np.allclose(total[finite], parts, rtol=1e-12, atol=0.0)
    comps = {"imp": imp, "qba": qba, "th": th, "corr": corr, "total": total}
    if sql:
        comps["sql"] = HBAR * np.abs(chi)
    return NoiseSpectrum(np.asarray(omega, dtype=float), comps, theta=theta)


# --- bad-cavity reference forms -----------------------------------------------

class BadCavityLimits(NamedTuple):
    imp: float
    qba: float
    corr: float


def bad_cavity_limits(sys: SystemParams, theta, omega=None):
    """Resonant (detuning 0), kappa >> Omega closed forms of imp, QBA force and S_xF.

    The forms are frequency independent; `omega` is accepted for symmetry
    with the exact functions.
    """
    xz2, g2, kappa = sys.x_zpf ** 2, sys.g ** 2, sys.kappa
    s = np.sin(theta)
    with np.errstate(divide="ignore"):
        imp = xz2 * kappa / (16.0 * g2 * sys.eta) / s ** 2
        corr = -HBAR / 2.0 / np.tan(theta)
    qba = HBAR ** 2 / (2.0 * xz2) * 8.0 * g2 / kappa
    return BadCavityLimits(imp, qba, corr)
