"""Least-squares fits of calibrated spectra to the noise model.

Residuals are taken in log space: Welch estimates have multiplicative
scatter, so log residuals weigh the shot-noise wings and the resonance
peak alike.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import norm

from .model import UnstableError, effective_resonance, imprecision_spectrum, \
    measured_displacement_spectrum
from .params import SystemParams, normalize_angle

log = logging.getLogger(__name__)

FREE_PARAMETERS = ("g", "theta", "detuning", "eta")


class FitError(RuntimeError):
    """Raised for degenerate fit problems."""


@dataclass
class FitProblem:
    """Observed spectrum plus the baseline parameters it is fitted against.

    `guess` maps free parameter names to starting values; parameters not in
    `guess` are taken from `baseline` (theta from ``baseline.detection``).
    `sigma` is the per-point standard deviation of log S_obs; leave it as
    ``None`` to infer the scatter from the residuals.
    """

    omega: np.ndarray
    observed: np.ndarray
    baseline: SystemParams
    free: Tuple[str, ...] = ("g", "theta", "detuning")
    guess: Dict[str, float] = field(default_factory=dict)
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.observed = np.asarray(self.observed, dtype=float)
        self.free = tuple(self.free)
        if not self.free:
            raise FitError("no free parameters")
        bad = set(self.free) - set(FREE_PARAMETERS)
        if bad:
            raise FitError(f"unknown free parameters {sorted(bad)}")
        if len(set(self.free)) != len(self.free):
            raise FitError("duplicate free parameters")
        if self.omega.shape != self.observed.shape:
            raise FitError("grid and observed spectrum differ in shape")
        if self.omega.size < 10 * len(self.free):
            raise FitError("need at least ten grid points per free parameter")
        if np.any(~np.isfinite(self.observed)) or np.any(self.observed <= 0):
            raise FitError("observed spectrum must be finite and positive")

    def start(self):
        b = self.baseline
        base = {"g": b.g, "theta": b.detection.theta, "detuning": b.detuning, "eta": b.eta}
        base.update(self.guess)
        return base

    def system(self, values):
        s = self.baseline
        if "g" in values:
            s = s.with_coupling(values["g"])
        if "detuning" in values:
            s = s.with_detuning(values["detuning"])
        if "eta" in values:
            s = s.with_efficiency(values["eta"])
        return s

    def model(self, values):
        vals = {**self.start(), **values}
        return measured_displacement_spectrum(self.system(vals), vals["theta"], self.omega)


@dataclass
class FitResult:
    names: Tuple[str, ...]
    values: Dict[str, float]
    stderr: Dict[str, float]
    covariance: np.ndarray
    chi2_red: float
    cost: float
    iterations: int
    gradient_norm: float
    converged: bool
    message: str
    at_bound: Tuple[str, ...] = ()
    flags: Tuple[str, ...] = ()
    residuals: Optional[np.ndarray] = None

    def correlation(self, a, b):
        i, j = self.names.index(a), self.names.index(b)
        c = self.covariance
        return float(c[i, j] / math.sqrt(c[i, i] * c[j, j]))

    def report(self):
        """Plain-data summary suitable for YAML/JSON output."""
        return {
            "estimates": {k: float(v) for k, v in self.values.items()},
            "stderr": {k: float(v) for k, v in self.stderr.items()},
            "covariance": self.covariance.tolist(),
            "parameter_order": list(self.names),
            "chi2_red": float(self.chi2_red),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "converged": bool(self.converged),
            "at_bound": list(self.at_bound),
            "flags": list(self.flags),
        }


# Internal coordinates: g and detuning are scaled so all steps are O(1).
def _codec(problem):
    start = problem.start()
    kappa = problem.baseline.kappa
    g_ref = start["g"]

    scale = {"g": g_ref, "theta": 1.0, "detuning": kappa, "eta": 1.0}
    lower = {"g": 1e-12, "theta": -np.inf, "detuning": -1.0 + 1e-9, "eta": 1e-9}
    upper = {"g": np.inf, "theta": np.inf, "detuning": 1.0 - 1e-9, "eta": 1.0}
    names = problem.free
    x0 = np.array([start[n] / scale[n] for n in names])
    lo = np.array([lower[n] for n in names])
    hi = np.array([upper[n] for n in names])
    s = np.array([scale[n] for n in names])
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise FitError("initial guess outside bounds")

    def decode(x):
        return {n: float(v) for n, v in zip(names, x * s)}

    return x0, lo, hi, s, decode


def fit_spectrum(problem: FitProblem, max_nfev=2000):
    """Fit the free parameters by minimizing the squared log residuals.

    theta is fitted without bounds (the model is pi-periodic in it) and the
    representative in [0, pi) is reported.
    """
    x0, lo, hi, scale, decode = _codec(problem)
    log_obs = np.log(problem.observed)
    w = 1.0 if problem.sigma is None else 1.0 / np.asarray(problem.sigma, dtype=float)
    penalty = 1e3 * np.ones_like(log_obs)

    def resid(x):
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                m = problem.model(decode(x))
        except UnstableError:
            return penalty
        r = (np.log(m) - log_obs) * w
        return np.where(np.isfinite(r), r, 1e3)

    sol = least_squares(resid, x0, jac="3-point", diff_step=1e-6, bounds=(lo, hi),
                        method="trf", ftol=1e-10, xtol=1e-12, gtol=1e-8, max_nfev=max_nfev,
                        x_scale=1.0)
    n, p = log_obs.size, x0.size
    dof = max(n - p, 1)
    chi2 = float(np.sum(sol.fun ** 2))
    chi2_red = chi2 / dof
    jtj = sol.jac.T @ sol.jac
    if np.linalg.matrix_rank(jtj) < p:
        raise FitError("singular normal equations: the free parameters are degenerate")
    cov_x = np.linalg.inv(jtj)
    if problem.sigma is None:
        cov_x = cov_x * chi2_red
    cov = cov_x * np.outer(scale, scale)
    cov = 0.5 * (cov + cov.T)

    values = decode(sol.x)
    if "theta" in values:
        values["theta"] = normalize_angle(values["theta"])
    err = dict(zip(problem.free, np.sqrt(np.clip(np.diag(cov), 0.0, None))))
    at_bound = tuple(nm for nm, a in zip(problem.free, sol.active_mask) if a != 0)
    flags = []
    if sol.status <= 0:
        flags.append("not_converged")
    if at_bound:
        flags.append("at_bound")
    grad = float(np.linalg.norm(sol.grad / scale))
    if not sol.success:
        log.warning("fit did not converge: %s", sol.message)
    return FitResult(names=problem.free, values=values, stderr=err, covariance=cov,
                     chi2_red=chi2_red, cost=0.5 * chi2, iterations=int(sol.nfev),
                     gradient_norm=grad, converged=bool(sol.success), message=str(sol.message),
                     at_bound=at_bound, flags=tuple(flags), residuals=sol.fun.copy())


def fit_detection_efficiency(shot_levels: Sequence[Tuple[float, float]], sys: SystemParams,
                             omega=None):
    """Detection efficiency from calibrated shot-noise levels at several angles.

    `shot_levels` holds (theta, S_imp) pairs; the imprecision scales as
    1/eta at fixed angle, so in log space the fit has a closed form.
    `omega` is the analysis frequency (default omega_m).
    """
    data = np.asarray(shot_levels, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise FitError("shot levels must be (theta, level) pairs")
    thetas = np.mod(data[:, 0], np.pi)
    distinct = np.unique(np.round(thetas, 9))
    if distinct.size < 5 or np.ptp(distinct) < np.pi / 4:
        raise FitError("need at least 5 distinct angles spanning pi/4")
    if np.any(data[:, 1] <= 0):
        raise FitError("shot levels must be positive")
    w = sys.oscillator.omega_m if omega is None else omega
    unit = imprecision_spectrum(sys.with_efficiency(1.0), thetas, w)
    if not np.all(np.isfinite(unit)):
        raise FitError("a blind quadrature is among the angles")
    d = np.log(unit) - np.log(data[:, 1])
    n = d.size
    log_eta = float(d.mean())
    eta = math.exp(log_eta)
    res = d - log_eta
    s2 = float(np.sum(res ** 2) / max(n - 1, 1))
    var = eta ** 2 * s2 / n
    flags = ()
    at_bound = ()
    if eta > 1.0:
        flags = ("capped_at_unity",)
        at_bound = ("eta",)
        eta = 1.0
    return FitResult(names=("eta",), values={"eta": eta}, stderr={"eta": math.sqrt(var)},
                     covariance=np.array([[var]]), chi2_red=s2, cost=0.5 * float(np.sum(res ** 2)),
                     iterations=1, gradient_norm=0.0, converged=True, message="closed form",
                     at_bound=at_bound, flags=flags, residuals=res)


@dataclass
class ResidualReport:
    omega: np.ndarray
    standardized: np.ndarray
    runs: int
    expected_runs: float
    runs_z: float
    runs_p: float
    low_side_mean: float
    high_side_mean: float
    flags: Tuple[str, ...]


def runs_test(values):
    """Wald-Wolfowitz runs test on the signs of `values` (zeros dropped).

    Returns (runs, expected, z, two-sided p).
    """
    s = np.sign(np.asarray(values, dtype=float))
    s = s[s != 0]
    n_pos, n_neg = int(np.sum(s > 0)), int(np.sum(s < 0))
    n = n_pos + n_neg
    if n_pos == 0 or n_neg == 0:
        return 1, 1.0, -np.inf, 0.0
    runs = 1 + int(np.sum(s[1:] != s[:-1]))
    mu = 1.0 + 2.0 * n_pos * n_neg / n
    var = (mu - 1.0) * (mu - 2.0) / (n - 1.0)
    z = (runs - mu) / math.sqrt(var)
    return runs, mu, z, float(2.0 * norm.sf(abs(z)))


def residual_diagnostics(problem: FitProblem, result: FitResult, alpha=0.05, side_sigma=4.0):
    """Standardized residuals, runs test and one-sided excess flags.

    ``structured_residuals`` is raised when the runs test rejects
    independence at level `alpha`; ``low_side_excess``/``high_side_excess``
    when the mean residual below/above the dressed resonance exceeds
    `side_sigma` standard errors.
    """
    model = problem.model(result.values)
    r = np.log(problem.observed) - np.log(model)
    if problem.sigma is not None:
        z = r / np.asarray(problem.sigma, dtype=float)
    else:
        sd = float(np.std(r, ddof=len(result.names)))
        z = r / sd if sd > 0 else np.zeros_like(r)
    runs, mu, rz, p = runs_test(z)
    w0 = effective_resonance(problem.system({**problem.start(), **result.values}))
    low, high = problem.omega < w0, problem.omega > w0

    def side(mask):
        if mask.sum() < 2:
            return 0.0, 0.0
        return float(z[mask].mean()), float(z[mask].mean() * math.sqrt(mask.sum()))

    low_mean, low_t = side(low)
    high_mean, high_t = side(high)
    flags = []
    if p < alpha:
        flags.append("structured_residuals")
    if low_t > side_sigma:
        flags.append("low_side_excess")
    if high_t > side_sigma:
        flags.append("high_side_excess")
    return ResidualReport(problem.omega, z, runs, mu, rz, p, low_mean, high_mean, tuple(flags))
