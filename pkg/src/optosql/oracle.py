"""Time-domain Langevin simulation of the homodyne measurement.

The linear quantum Langevin equations are integrated exactly: over each step
the state is propagated with the matrix exponential of the drift and receives
a Gaussian increment whose covariance is the finite-time Lyapunov integral
(Van Loan's construction). Because the system is linear, symmetrized output
spectra only depend on symmetrized input intensities, so classical white
noise of intensity 1/2 per vacuum quadrature reproduces them.

The simulated photocurrent is the output quadrature averaged over each step
(boxcar sampling), which keeps the white shot noise well defined at any step
size. Analytic comparisons account for that boxcar and for the Welch window.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.signal

from .constants import HBAR
from .model import (
    UnstableError,
    detector_efficiency,
    photocurrent_spectrum,
    transduction,
)
from .params import SystemParams

log = logging.getLogger(__name__)

CHANNELS = ("X_in1", "Y_in1", "X_in2", "Y_in2", "F_th")


@dataclass(frozen=True)
class StateSpace:
    """Linear dynamics d(X, Y, x, p)/dt = A s + B xi with white inputs xi.

    ``intensities`` are the symmetrized (double-sided) intensities of the
    five input channels in :data:`CHANNELS` order. ``scale`` converts the
    zero-point-normalized simulation state back to physical units.
    """

    A: np.ndarray
    B: np.ndarray
    intensities: np.ndarray
    scale: np.ndarray
    kappa2: float
    sys: SystemParams

    @property
    def A_scaled(self):
        return self.A * self.scale[None, :] / self.scale[:, None]

    @property
    def B_scaled(self):
        return self.B / self.scale[:, None]

    @property
    def diffusion_scaled(self):
        b = self.B_scaled
        return b @ np.diag(self.intensities) @ b.T

    def eigenvalues(self):
        return np.linalg.eigvals(self.A_scaled)


def build_state_space(sys: SystemParams):
    if sys.auxiliary is not None and sys.auxiliary.g > 0:
        raise ValueError("the time-domain oracle models the probe tone only")
    osc, cav = sys.oscillator, sys.cavity
    m, xz = osc.mass, osc.x_zpf
    kappa, det, g = cav.kappa, sys.detuning, sys.g
    a = np.zeros((4, 4))
    a[0, 0] = a[1, 1] = -kappa / 2.0
    a[0, 1] = -det
    a[1, 0] = det
    a[1, 2] = 2.0 * g / (math.sqrt(2.0) * xz)
    a[2, 3] = 1.0 / m
    a[3, 2] = -m * osc.omega_m ** 2
    a[3, 3] = -osc.gamma_m
    a[3, 0] = 2.0 * g * HBAR / (math.sqrt(2.0) * xz)

    b = np.zeros((4, 5))
    b[0, 0] = b[1, 1] = math.sqrt(cav.kappa1)
    b[0, 2] = b[1, 3] = math.sqrt(cav.kappa2)
    b[3, 4] = math.sqrt(osc.gamma_m)

    intens = np.array([0.5, 0.5, 0.5, 0.5,
                       2.0 * m * HBAR * osc.omega_m * (sys.bath.n_eff + 0.5)])
    scale = np.array([1.0, 1.0, xz, m * osc.omega_m * xz])
    ss = StateSpace(a, b, intens, scale, cav.kappa2, sys)
    ev = ss.eigenvalues()
    worst = ev[np.argmax(ev.real)]
    if worst.real >= 0:
        raise UnstableError(f"drift matrix has eigenvalue {worst:.6g} 1/s with non-negative real part")
    return ss


def stationary_covariance(ss: StateSpace):
    """Stationary covariance of the scaled state from the continuous Lyapunov equation."""
    p = sla.solve_continuous_lyapunov(ss.A_scaled, -ss.diffusion_scaled)
    return 0.5 * (p + p.T)


def _psd_sqrt(cov):
    d = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    d_safe = np.where(d > 0, d, 1.0)
    corr = cov / np.outer(d_safe, d_safe)
    w, v = np.linalg.eigh(0.5 * (corr + corr.T))
    return d_safe[:, None] * (v * np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True)
class Discretization:
    """Exact one-step map of the state augmented with integrated outputs.

    ``phi_state`` advances the 4-dim state; ``phi_out`` maps the state at
    the start of a step onto the four step integrals
    (int sqrt(k2) X, int sqrt(k2) Y, int X_in2, int Y_in2). ``noise_factor``
    is a square root of the joint 8x8 increment covariance.
    """

    dt: float
    phi_state: np.ndarray
    phi_out: np.ndarray
    noise_factor: np.ndarray


def discretize(ss: StateSpace, dt):
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = 8
    a = np.zeros((n, n))
    a[:4, :4] = ss.A_scaled
    rk2 = math.sqrt(ss.kappa2)
    a[4, 0] = a[5, 1] = rk2
    b = np.zeros((n, 5))
    b[:4] = ss.B_scaled
    b[6, 2] = b[7, 3] = 1.0
    q = b @ np.diag(ss.intensities) @ b.T
    # Van Loan: expm([[-A, Q], [0, A^T]] dt)
    m = np.zeros((2 * n, 2 * n))
    m[:n, :n] = -a
    m[:n, n:] = q
    m[n:, n:] = a.T
    e = sla.expm(m * dt)
    phi = e[n:, n:].T
    qd = phi @ e[:n, n:]
    qd = 0.5 * (qd + qd.T)
    return Discretization(dt, phi[:4, :4].copy(), phi[4:, :4].copy(), _psd_sqrt(qd))


@dataclass
class TimeTrace:
    """Simulated record; arrays carry a leading realization axis.

    ``state`` holds (X, Y, x, p) in physical units at the start of each
    step, ``cavity_out`` the step integrals of sqrt(kappa2) (X, Y) and
    ``port2_in`` the step integrals of the port-2 input noise (X_in2, Y_in2).
    """

    dt: float
    seed: Optional[int]
    state: Optional[np.ndarray]
    cavity_out: np.ndarray
    port2_in: np.ndarray
    photocurrent: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.cavity_out.shape[1]

    @property
    def n_realizations(self):
        return self.cavity_out.shape[0]

    @property
    def time(self):
        return self.dt * np.arange(self.n_steps)


def integrate(ss: StateSpace, duration, dt, seed=None, n_realizations=1, initial="stationary",
              record_state=True, block=2048):
    """Integrate `n_realizations` independent trajectories for `duration` seconds.

    ``initial`` is ``"stationary"`` (draw from the stationary distribution),
    ``"zero"`` or an explicit physical state vector (X, Y, x, p).
    """
    n_steps = int(round(duration / dt))
    if n_steps < 1:
        raise ValueError("duration shorter than one step")
    slowest = -np.max(ss.eigenvalues().real)
    if duration * slowest < 10.0:
        warnings.warn(f"duration covers only {duration * slowest:.3g} decay times of the slowest mode",
                      RuntimeWarning, stacklevel=2)
    disc = discretize(ss, dt)
    rng = np.random.default_rng(seed)
    r = n_realizations
    if isinstance(initial, str) and initial == "stationary":
        s = rng.standard_normal((r, 4)) @ _psd_sqrt(stationary_covariance(ss)).T
    elif isinstance(initial, str) and initial == "zero":
        s = np.zeros((r, 4))
    else:
        s = np.broadcast_to(np.asarray(initial, dtype=float) / ss.scale, (r, 4)).copy()

    states = np.empty((r, n_steps, 4)) if record_state else None
    out = np.empty((r, n_steps, 4))
    pst, pout, lf = disc.phi_state.T, disc.phi_out.T, disc.noise_factor.T
    for k0 in range(0, n_steps, block):
        k1 = min(k0 + block, n_steps)
        w = rng.standard_normal((k1 - k0, r, 8)) @ lf
        for j in range(k1 - k0):
            if record_state:
                states[:, k0 + j] = s
            out[:, k0 + j] = s @ pout + w[j, :, 4:]
            s = s @ pst + w[j, :, :4]
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("non-finite state during integration")
    if record_state:
        states *= ss.scale
    return TimeTrace(dt=dt, seed=seed, state=states, cavity_out=out[..., :2],
                     port2_in=out[..., 2:], meta={"final_state": s * ss.scale})


def synthesize_photocurrent(trace: TimeTrace, sys: SystemParams, theta, seed=None):
    """Step-averaged homodyne photocurrent, shot-noise PSD 1/2.

    The quadrature rotation runs opposite to the (X, Y) rotation sense of
    the equations of motion so that `theta` matches the analytic
    transduction and correlation formulas.
    """
    if trace.port2_in is None or trace.cavity_out is None:
        raise ValueError("trace does not retain the port-2 input increments")
    eta_d = detector_efficiency(sys)
    dt = trace.dt
    x_out = trace.cavity_out[..., 0] - trace.port2_in[..., 0]
    y_out = trace.cavity_out[..., 1] - trace.port2_in[..., 1]
    quad = (-math.cos(theta) * x_out + math.sin(theta) * y_out) / dt
    if seed is None and trace.seed is not None:
        seed = (trace.seed, 1)
    rng = np.random.default_rng(seed)
    vac = rng.standard_normal(quad.shape) * math.sqrt(0.5 / dt)
    return math.sqrt(eta_d) * quad + math.sqrt(1.0 - eta_d) * vac


@dataclass
class PsdEstimate:
    omega: np.ndarray
    psd: np.ndarray
    segments: int
    window: str
    nperseg: int
    dt: float

    @property
    def rel_uncertainty(self):
        return 1.0 / math.sqrt(self.segments)

    @property
    def stderr(self):
        return self.psd * self.rel_uncertainty


def welch_psd(channel, dt, segment_length, overlap=0.5, window="hann"):
    """Double-sided Welch estimate in rad/s (white noise of intensity s gives s).

    `channel` may be 2-D, in which case rows are independent realizations
    and their periodograms are averaged together.
    """
    x = np.atleast_2d(np.asarray(channel, dtype=float))
    if not 0.0 <= overlap <= 0.9:
        raise ValueError("overlap must lie in [0, 0.9]")
    if segment_length > x.shape[-1]:
        raise ValueError("series shorter than one segment")
    noverlap = int(round(overlap * segment_length))
    freqs, p = scipy.signal.welch(x, fs=1.0 / dt, window=window, nperseg=segment_length,
                                  noverlap=noverlap, detrend=False, return_onesided=False,
                                  scaling="density", axis=-1)
    step = segment_length - noverlap
    per_row = (x.shape[-1] - noverlap) // step
    order = np.argsort(freqs)
    return PsdEstimate(omega=2.0 * np.pi * freqs[order], psd=p.mean(axis=0)[order],
                       segments=per_row * x.shape[0], window=window,
                       nperseg=segment_length, dt=dt)


def _window_kernel(window, nperseg, pad, half_width):
    w = scipy.signal.get_window(window, nperseg)
    spec = np.abs(np.fft.fft(w, nperseg * pad)) ** 2
    spec /= spec.sum()
    offsets = np.arange(-half_width * pad, half_width * pad + 1)
    return offsets / pad, spec[offsets % (nperseg * pad)]


def expected_photocurrent_psd(sys: SystemParams, theta, omega, dt, nperseg, window="hann",
                              pad=8, half_width=32, n_alias=3):
    """Mean of the Welch estimate of the simulated photocurrent.

    The analytic photocurrent spectrum is multiplied by the boxcar response,
    folded over `n_alias` images on each side and smoothed with the window's
    spectral kernel (truncated at `half_width` bins).
    """
    omega = np.asarray(omega, dtype=float)
    bins, kern = _window_kernel(window, nperseg, pad, half_width)
    d_omega = 2.0 * np.pi / (nperseg * dt)
    w = omega[:, None] + bins[None, :] * d_omega
    period = 2.0 * np.pi / dt
    excess = np.zeros_like(w)
    for k in range(-n_alias, n_alias + 1):
        wk = w + k * period
        box = np.sinc(wk * dt / (2.0 * np.pi)) ** 2
        excess += (photocurrent_spectrum(sys, theta, wk) - 0.5) * box
    return 0.5 + excess @ kern


@dataclass
class ComparisonReport:
    omega: np.ndarray
    measured: np.ndarray
    expected: np.ndarray
    band_edges: np.ndarray
    band_deviation: np.ndarray
    rms: float
    expected_rms: float
    meta: dict = field(default_factory=dict)

    def passed(self, tol=0.05):
        return self.rms <= tol


def compare_to_analytic(psd: PsdEstimate, sys: SystemParams, theta, band=None, bins_per_band=8):
    """Band-averaged relative deviation of a simulated photocurrent PSD from the model.

    Both spectra are referred to displacement through eta_det |f^theta|^2
    (the detector gain cancels in the ratio). `band` is an (lo, hi) range of
    angular frequencies; by default +-5 % around omega_m.
    """
    if band is None:
        w_m = sys.oscillator.omega_m
        band = (0.95 * w_m, 1.05 * w_m)
    sel = (psd.omega >= band[0]) & (psd.omega <= band[1])
    omega = psd.omega[sel]
    gain = detector_efficiency(sys) * np.abs(transduction(sys, theta, omega)) ** 2
    if np.any(gain == 0):
        from .model import BlindQuadratureError
        raise BlindQuadratureError("blind quadrature inside the comparison band")
    measured = psd.psd[sel] / gain
    expected = expected_photocurrent_psd(sys, theta, omega, psd.dt, psd.nperseg, psd.window) / gain
    n_bands = max(len(omega) // bins_per_band, 1)
    groups = np.array_split(np.arange(len(omega)), n_bands)
    dev = np.array([measured[g].mean() / expected[g].mean() - 1.0 for g in groups])
    edges = np.array([[omega[g[0]], omega[g[-1]]] for g in groups])
    rms = float(np.sqrt(np.mean(dev ** 2)))
    # Hann-windowed bins are correlated with their neighbours; ~1.5 bins per independent value
    expected_rms = psd.rel_uncertainty / math.sqrt(bins_per_band / 1.5)
    return ComparisonReport(omega, measured, expected, edges, dev, rms, expected_rms,
                            meta={"theta": theta, "segments": psd.segments})


def simulate_photocurrent_psd(sys: SystemParams, thetas, n_segments, nperseg, dt, seed=0,
                              batch=64):
    """Welch PSDs of the photocurrent at several angles from one set of trajectories.

    Each segment is an independent realization started from the stationary
    state, so no overlap is needed. Returns ``{theta: PsdEstimate}``.
    """
    ss = build_state_space(sys)
    sums = {th: None for th in thetas}
    omega = None
    done = 0
    root = np.random.SeedSequence(seed)
    for i, child in enumerate(root.spawn((n_segments + batch - 1) // batch)):
        r = min(batch, n_segments - done)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            trace = integrate(ss, nperseg * dt, dt, seed=child, n_realizations=r,
                              record_state=False)
        for j, th in enumerate(thetas):
            cur = synthesize_photocurrent(trace, sys, th, seed=child.spawn(j + 1)[-1])
            est = welch_psd(cur, dt, nperseg, overlap=0.0)
            omega = est.omega
            acc = est.psd * r
            sums[th] = acc if sums[th] is None else sums[th] + acc
        done += r
        log.debug("simulated %d/%d segments", done, n_segments)
    return {th: PsdEstimate(omega, sums[th] / done, done, "hann", nperseg, dt) for th in thetas}
