"""Parameter containers for the linearized optomechanical measurement.

All rates and frequencies are angular (rad/s). Conversion from Hz happens
only at the configuration boundary (see :mod:`optosql.config`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .constants import HBAR, K_B, TWO_PI


class ParameterError(ValueError):
    """Raised when a parameter set violates a physical invariant."""


def _require(cond, msg):
    if not cond:
        raise ParameterError(msg)


def bose_occupation(omega, temperature):
    """Mean Bose-Einstein occupation of a mode at angular frequency `omega`."""
    _require(temperature >= 0, "temperature must be non-negative")
    if temperature == 0:
        return 0.0
    return 1.0 / math.expm1(HBAR * omega / (K_B * temperature))


@dataclass(frozen=True)
class MechanicalOscillator:
    mass: float
    omega_m: float
    gamma_m: float

    def __post_init__(self):
        _require(self.mass > 0, "mass must be positive")
        _require(self.omega_m > 0, "omega_m must be positive")
        _require(self.gamma_m > 0, "gamma_m must be positive")

    @classmethod
    def from_quality(cls, mass, omega_m, q):
        return cls(mass=mass, omega_m=omega_m, gamma_m=omega_m / q)

    @property
    def x_zpf(self):
        return math.sqrt(HBAR / (2.0 * self.mass * self.omega_m))

    @property
    def quality(self):
        return self.omega_m / self.gamma_m


@dataclass(frozen=True)
class OpticalCavity:
    """Two-port cavity; port 2 faces the detector, `detuning` is the probe's."""

    kappa1: float
    kappa2: float
    detuning: float = 0.0

    def __post_init__(self):
        _require(self.kappa1 >= 0 and self.kappa2 >= 0, "port rates must be non-negative")
        _require(self.kappa1 + self.kappa2 > 0, "total linewidth must be positive")

    @classmethod
    def from_linewidth(cls, kappa, overcoupling=1.0, detuning=0.0):
        _require(0.0 <= overcoupling <= 1.0, "overcoupling fraction must lie in [0, 1]")
        kappa2 = overcoupling * kappa
        return cls(kappa1=kappa - kappa2, kappa2=kappa2, detuning=detuning)

    @property
    def kappa(self):
        return self.kappa1 + self.kappa2

    @property
    def overcoupling(self):
        return self.kappa2 / self.kappa


@dataclass(frozen=True)
class DriveTone:
    """A coherent drive populating a cavity mode.

    ``detuning`` and ``linewidth`` default to those of the probed cavity mode
    when left as ``None``; the auxiliary tone normally sets both.
    """

    g0: float
    n_cav: float
    role: str = "probe"
    detuning: Optional[float] = None
    linewidth: Optional[float] = None

    def __post_init__(self):
        _require(self.g0 > 0, "g0 must be positive")
        _require(self.n_cav >= 0, "n_cav must be non-negative")
        _require(self.role in ("probe", "auxiliary"), f"unknown tone role {self.role!r}")
        _require(self.linewidth is None or self.linewidth > 0, "tone linewidth must be positive")

    @classmethod
    def from_coupling(cls, g, g0, **kwargs):
        return cls(g0=g0, n_cav=(g / g0) ** 2, **kwargs)

    @property
    def g(self):
        return self.g0 * math.sqrt(self.n_cav)


@dataclass(frozen=True)
class ThermalBath:
    n_th: float
    n_aux: float = 0.0
    temperature: Optional[float] = None

    def __post_init__(self):
        _require(self.n_th >= 0, "n_th must be non-negative")
        _require(self.n_aux >= 0, "n_aux must be non-negative")

    @classmethod
    def from_temperature(cls, temperature, omega_m, n_aux=0.0):
        return cls(n_th=bose_occupation(omega_m, temperature), n_aux=n_aux,
                   temperature=temperature)

    @property
    def n_eff(self):
        return self.n_th + self.n_aux

    def decoherence_rate(self, gamma_m):
        return self.n_eff * gamma_m


@dataclass(frozen=True)
class Detection:
    """Homodyne angle (referenced to the intracavity field) and total efficiency.

    ``efficiency`` is the end-to-end detection efficiency, including the
    fraction kappa2/kappa of intracavity photons leaving through port 2.
    """

    theta: float = math.pi / 2
    efficiency: float = 1.0

    def __post_init__(self):
        _require(math.isfinite(self.theta), "theta must be finite")
        _require(0.0 < self.efficiency <= 1.0, "efficiency must lie in (0, 1]")
        object.__setattr__(self, "theta", normalize_angle(self.theta))


def normalize_angle(theta):
    """Map a homodyne angle onto its representative in [0, pi)."""
    t = math.fmod(theta, math.pi)
    if t < 0:
        t += math.pi
    if t >= math.pi:
        t = 0.0
    return t


@dataclass(frozen=True)
class SystemParams:
    oscillator: MechanicalOscillator
    cavity: OpticalCavity
    probe: DriveTone
    bath: ThermalBath
    detection: Detection = field(default_factory=Detection)
    auxiliary: Optional[DriveTone] = None

    def __post_init__(self):
        _require(self.probe.role == "probe", "probe tone must carry role 'probe'")
        if self.auxiliary is not None:
            _require(self.auxiliary.role == "auxiliary",
                     "auxiliary tone must carry role 'auxiliary'")

    # shorthands used throughout the model code
    @property
    def g(self):
        return self.probe.g

    @property
    def kappa(self):
        return self.cavity.kappa

    @property
    def detuning(self):
        return self.cavity.detuning if self.probe.detuning is None else self.probe.detuning

    @property
    def eta(self):
        return self.detection.efficiency

    @property
    def x_zpf(self):
        return self.oscillator.x_zpf

    def tones(self):
        """(g, kappa, detuning) for every tone coupled to the oscillator."""
        out = [(self.g, self.probe.linewidth or self.kappa, self.detuning)]
        aux = self.auxiliary
        if aux is not None:
            det = self.cavity.detuning if aux.detuning is None else aux.detuning
            out.append((aux.g, aux.linewidth or self.kappa, det))
        return out

    def with_coupling(self, g):
        """Copy with the probe photon number adjusted to give coupling `g`."""
        return replace(self, probe=replace(self.probe, n_cav=(g / self.probe.g0) ** 2))

    def with_theta(self, theta):
        return replace(self, detection=replace(self.detection, theta=theta))

    def with_efficiency(self, eta):
        return replace(self, detection=replace(self.detection, efficiency=eta))

    def with_detuning(self, detuning):
        return replace(self, cavity=replace(self.cavity, detuning=detuning),
                       probe=replace(self.probe, detuning=None))


# Operating point of the reference sub-SQL experiment. Neither the effective mass nor
# the probe detuning is quoted directly: EXP_MASS reproduces the quoted
# 11.2 aN/rtHz force sensitivity 8.2 kHz above resonance at theta = 4pi/5, and
# EXP_DETUNING_FRACTION (in units of kappa) reproduces the ~1.9 dB
# transduction loss between theta = pi/2 and 4pi/5 at the same frequency.
EXP_OMEGA_M = TWO_PI * 1.135e6
EXP_Q = 1.03e9
EXP_KAPPA = TWO_PI * 16.2e6
EXP_OVERCOUPLING = 0.95
EXP_G0 = TWO_PI * 120.7
EXP_ETA = 0.77
EXP_TEMPERATURE = 10.0
EXP_MASS = 1.63e-12
EXP_DETUNING_FRACTION = -0.12


def coupling_for_cooperativity(c_q, kappa, n_eff, gamma_m):
    """Probe coupling g giving quantum cooperativity `c_q`."""
    return math.sqrt(c_q * kappa * n_eff * gamma_m / 4.0)


def experiment_params(c_q=17.3, theta=math.pi / 2, detuning=None, mass=EXP_MASS,
                 n_aux=0.0, eta=EXP_ETA):
    if detuning is None:
        detuning = EXP_DETUNING_FRACTION * EXP_KAPPA
    osc = MechanicalOscillator.from_quality(mass, EXP_OMEGA_M, EXP_Q)
    cav = OpticalCavity.from_linewidth(EXP_KAPPA, EXP_OVERCOUPLING, detuning)
    bath = ThermalBath.from_temperature(EXP_TEMPERATURE, EXP_OMEGA_M, n_aux=n_aux)
    g = coupling_for_cooperativity(c_q, EXP_KAPPA, bath.n_eff, osc.gamma_m)
    probe = DriveTone.from_coupling(g, EXP_G0)
    return SystemParams(osc, cav, probe, bath, Detection(theta, eta))


def desk_scale(sys: SystemParams, quality=1e4):
    """Copy with a lower mechanical Q at fixed quantum cooperativity.

    Keeps omega_m, the cavity, the coupling and the detection; the bath
    occupancy is raised or lowered so that n_eff * gamma_m is unchanged.
    """
    osc = sys.oscillator
    gamma = osc.omega_m / quality
    n_eff = sys.bath.n_eff * osc.gamma_m / gamma
    return replace(sys, oscillator=MechanicalOscillator(osc.mass, osc.omega_m, gamma),
                   bath=ThermalBath(n_th=n_eff))


def desk_params(c_q=17.3, theta=math.pi / 2, q=1e4, eta=EXP_ETA, detuning=None, mass=EXP_MASS):
    """Rescaled copy of the experiment for time-domain simulation."""
    return desk_scale(experiment_params(c_q=c_q, theta=theta, detuning=detuning, mass=mass,
                                        eta=eta), q)
