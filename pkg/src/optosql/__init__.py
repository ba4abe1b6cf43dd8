"""Quantum-noise model, SQL analysis and calibration for homodyne optomechanical readout."""

__version__ = "0.1.0"

from .params import (  # noqa: E402
    Detection, DriveTone, MechanicalOscillator, OpticalCavity, ParameterError, SystemParams,
    ThermalBath, desk_params, desk_scale, experiment_params,
)
from .model import (  # noqa: E402
    BlindQuadratureError, NoiseSpectrum, UnstableError, effective_susceptibility,
    measured_displacement_spectrum, noise_spectrum, transduction,
)

__all__ = [
    "Detection", "DriveTone", "MechanicalOscillator", "OpticalCavity", "ParameterError",
    "SystemParams", "ThermalBath", "desk_params", "desk_scale", "experiment_params",
    "BlindQuadratureError", "NoiseSpectrum", "UnstableError", "effective_susceptibility",
    "measured_displacement_spectrum", "noise_spectrum", "transduction",
]
