"""Versioned YAML/JSON configuration.

External files use Hz, K, kg and rad; everything is converted to angular
units here and nowhere else.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import jsonschema
import numpy as np
import yaml

from .model import effective_resonance
from .params import (
    EXP_DETUNING_FRACTION, EXP_ETA, EXP_G0, EXP_KAPPA, EXP_MASS, EXP_OMEGA_M,
    EXP_OVERCOUPLING, EXP_Q, EXP_TEMPERATURE, Detection, DriveTone, MechanicalOscillator,
    OpticalCavity, ParameterError, SystemParams, ThermalBath, coupling_for_cooperativity,
)

SCHEMA_VERSION = 1
TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Invalid configuration: schema violation, bad units or unphysical values."""


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int_pos = {"type": "integer", "minimum": 1}

SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "system": _obj({
        "mass_kg": _pos,
        "f_m_hz": _pos,
        "quality": _pos,
        "gamma_m_hz": _pos,
        "kappa_hz": _pos,
        "overcoupling": {"type": "number", "minimum": 0, "maximum": 1},
        "detuning_hz": _num,
        "detuning_over_kappa": _num,
        "g0_hz": _pos,
        "g_hz": _nonneg,
        "n_cav": _nonneg,
        "cooperativity": _nonneg,
        "temperature_k": _nonneg,
        "n_th": _nonneg,
        "n_aux": _nonneg,
        "theta_rad": _num,
        "eta_det": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "auxiliary": _obj({"g_hz": _nonneg, "detuning_hz": _num, "kappa_hz": _pos},
                          required=("g_hz", "detuning_hz")),
    }),
    "grid": _obj({
        "center_hz": {"type": ["number", "null"]},
        "span_hz": _pos,
        "points": {"type": "integer", "minimum": 2},
        "spacing": {"enum": ["lin", "log"]},
        "min_offset_hz": _pos,
    }),
    "heatmap": _obj({"theta_min_rad": _num, "theta_max_rad": _num, "theta_points": _int_pos}),
    "optimize": _obj({"band_points": {"type": "integer", "minimum": 16}}),
    "simulate": _obj({
        "quality": _pos,
        "thetas_rad": {"type": "array", "items": _num, "minItems": 1},
        "segments": _int_pos,
        "segment_length": {"type": "integer", "minimum": 16},
        "steps_per_period": _pos,
        "band_hz": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
        "trace_steps": {"type": "integer", "minimum": 0},
    }),
    "calibrate": _obj({
        "record": {"type": ["object", "string"]},
        "spectrum": {"type": "string"},
        "cooling_series": {"type": "string"},
    }),
    "fit": _obj({
        "spectrum": {"type": "string"},
        "free": {"type": "array", "items": {"enum": ["g", "theta", "detuning", "eta"]},
                 "minItems": 1, "uniqueItems": True},
        "guess": _obj({"g_hz": _pos, "theta_rad": _num, "detuning_hz": _num,
                       "eta_det": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}}),
        "band_hz": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
        "weighted": {"type": "boolean"},
        "quality": _pos,
    }),
    "snr": _obj({
        "thetas_rad": {"type": "array", "items": _num, "minItems": 1},
        "force_psd_n2_per_hz": _pos,
        "floor": {"enum": ["added", "total"]},
    }),
}, required=("schema_version",))


DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "system": {
        "mass_kg": EXP_MASS,
        "f_m_hz": EXP_OMEGA_M / TWO_PI,
        "quality": EXP_Q,
        "kappa_hz": EXP_KAPPA / TWO_PI,
        "overcoupling": EXP_OVERCOUPLING,
        "detuning_over_kappa": EXP_DETUNING_FRACTION,
        "g0_hz": EXP_G0 / TWO_PI,
        "cooperativity": 17.3,
        "temperature_k": EXP_TEMPERATURE,
        "n_aux": 0.0,
        "theta_rad": math.pi / 2,
        "eta_det": EXP_ETA,
    },
    "grid": {"center_hz": None, "span_hz": 40e3, "points": 801, "spacing": "lin",
             "min_offset_hz": 10.0},
    "heatmap": {"theta_min_rad": 0.1 * math.pi, "theta_max_rad": 0.9 * math.pi,
                "theta_points": 81},
    "optimize": {"band_points": 2048},
    "simulate": {"quality": 1e4, "thetas_rad": [math.pi / 2, 0.16 * math.pi, 0.8 * math.pi],
                 "segments": 1000, "segment_length": 131072, "steps_per_period": 8 * math.pi,
                 "trace_steps": 0},
    "calibrate": {},
    "fit": {"free": ["g", "theta", "detuning"], "weighted": False},
    "snr": {"thetas_rad": [math.pi / 2, 0.8 * math.pi], "force_psd_n2_per_hz": 1e-36,
            "floor": "added"},
}

_EXCLUSIVE = [("quality", "gamma_m_hz"), ("detuning_hz", "detuning_over_kappa"),
              ("g_hz", "n_cav", "cooperativity"), ("temperature_k", "n_th")]


@dataclass
class GridSpec:
    center_hz: Optional[float]
    span_hz: float
    points: int
    spacing: str = "lin"
    min_offset_hz: float = 10.0

    def omega(self, sys: SystemParams):
        """Strictly increasing angular grid; centre defaults to the dressed resonance."""
        center = effective_resonance(sys) if self.center_hz is None else TWO_PI * self.center_hz
        half = 0.5 * TWO_PI * self.span_hz
        if half >= center:
            raise ConfigError("grid span reaches zero frequency")
        if self.spacing == "lin":
            return np.linspace(center - half, center + half, self.points)
        # log-symmetric in the offset from the centre
        n = self.points // 2
        lo = TWO_PI * self.min_offset_hz
        if lo >= half:
            raise ConfigError("min_offset_hz must be below half the span")
        off = np.logspace(math.log10(lo), math.log10(half), n)
        return np.concatenate([center - off[::-1], center + off])


@dataclass
class Config:
    version: int
    system: SystemParams
    grid: GridSpec
    blocks: Dict[str, Dict[str, Any]]
    source: Optional[Path] = None
    raw: Dict[str, Any] = field(default_factory=dict)

    def block(self, name):
        return self.blocks.get(name, {})

    def resolve_path(self, p):
        path = Path(p)
        if not path.is_absolute() and self.source is not None:
            path = self.source.parent / path
        return path


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _system_from(d):
    # user-specified alternatives override the defaults' choice
    try:
        f_m = d["f_m_hz"]
        omega_m = TWO_PI * f_m
        if "gamma_m_hz" in d:
            osc = MechanicalOscillator(d["mass_kg"], omega_m, TWO_PI * d["gamma_m_hz"])
        else:
            osc = MechanicalOscillator.from_quality(d["mass_kg"], omega_m, d["quality"])
        kappa = TWO_PI * d["kappa_hz"]
        det = (TWO_PI * d["detuning_hz"] if "detuning_hz" in d
               else d.get("detuning_over_kappa", 0.0) * kappa)
        cav = OpticalCavity.from_linewidth(kappa, d.get("overcoupling", 1.0), det)
        if "n_th" in d:
            bath = ThermalBath(n_th=d["n_th"], n_aux=d.get("n_aux", 0.0))
        else:
            bath = ThermalBath.from_temperature(d["temperature_k"], omega_m, d.get("n_aux", 0.0))
        g0 = TWO_PI * d["g0_hz"]
        if "n_cav" in d:
            probe = DriveTone(g0=g0, n_cav=d["n_cav"])
        elif "g_hz" in d:
            probe = DriveTone.from_coupling(TWO_PI * d["g_hz"], g0)
        else:
            g = coupling_for_cooperativity(d["cooperativity"], kappa, bath.n_eff, osc.gamma_m)
            probe = DriveTone.from_coupling(g, g0)
        aux = None
        if "auxiliary" in d:
            a = d["auxiliary"]
            aux = DriveTone.from_coupling(
                TWO_PI * a["g_hz"], g0, role="auxiliary", detuning=TWO_PI * a["detuning_hz"],
                linewidth=TWO_PI * a["kappa_hz"] if "kappa_hz" in a else None)
        det_cfg = Detection(d.get("theta_rad", math.pi / 2), d.get("eta_det", 1.0))
        return SystemParams(osc, cav, probe, bath, det_cfg, auxiliary=aux)
    except KeyError as exc:
        raise ConfigError(f"system block lacks {exc}") from None
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def _prune_alternatives(default_sys, user_sys):
    """Drop default keys that conflict with an alternative the user picked."""
    out = dict(default_sys)
    for group in _EXCLUSIVE:
        chosen = [k for k in group if k in user_sys]
        if len(chosen) > 1:
            raise ConfigError(f"system keys {chosen} are mutually exclusive")
        if chosen:
            for k in group:
                if k != chosen[0]:
                    out.pop(k, None)
    return out


def config_from_dict(data: Dict[str, Any], source=None):
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    defaults = copy.deepcopy(DEFAULTS)
    defaults["system"] = _prune_alternatives(defaults["system"], data.get("system", {}))
    merged = _merge(defaults, data)
    system = _system_from(merged["system"])
    grid = GridSpec(**merged["grid"])
    blocks = {k: merged[k] for k in ("heatmap", "optimize", "simulate", "calibrate", "fit", "snr")}
    h = blocks["heatmap"]
    if not h["theta_min_rad"] < h["theta_max_rad"]:
        raise ConfigError("heatmap theta range is empty")
    return Config(merged["schema_version"], system, grid, blocks, source, merged)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponents without a sign (1e5) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_yaml(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    return data


def load_config(path=None):
    """Read a YAML (or JSON) configuration; ``None`` yields the built-in defaults."""
    if path is None:
        return config_from_dict({"schema_version": SCHEMA_VERSION})
    data = load_yaml(path)
    if data is None:
        raise ConfigError(f"{path}: empty configuration")
    return config_from_dict(data, Path(path))


def default_config_text():
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
