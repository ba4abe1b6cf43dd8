import math

import numpy as np
import pytest

from optosql.params import (
    Detection, DriveTone, MechanicalOscillator, OpticalCavity, SystemParams, ThermalBath,
    desk_params, experiment_params,
)


@pytest.fixture
def exp():
    return experiment_params()


@pytest.fixture
def desk():
    return desk_params()


def make_system(kappa_over_omega=1e3, g_over_omega=1e-3, detuning=0.0, eta=0.77,
                theta=math.pi / 2, n_th=10.0, q=1e6, mass=1e-12, omega_m=1e6, overcoupling=1.0):
    osc = MechanicalOscillator.from_quality(mass, omega_m, q)
    cav = OpticalCavity.from_linewidth(kappa_over_omega * omega_m, overcoupling, detuning)
    probe = DriveTone.from_coupling(g_over_omega * omega_m, 1.0)
    return SystemParams(osc, cav, probe, ThermalBath(n_th=n_th), Detection(theta, eta))


@pytest.fixture
def bad_cavity():
    return make_system()


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.abs(b))


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])


@pytest.fixture
def acceptance_log(request):
    store = request.config.__dict__.setdefault("_acceptance_lines", [])

    def log(number, ok, detail, elapsed, limit):
        status = "PASS" if ok else "FAIL"
        slow = "" if elapsed <= limit else f" (over {limit:g} s budget)"
        line = f"criterion {number:>2}: {status}  {detail}  [{elapsed:.2f} s{slow}]"
        store.append((number, line))
        print(line)

    return log
