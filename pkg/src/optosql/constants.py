"""Physical constants (CODATA 2018, SI)."""

HBAR = 1.05457181765e-34  # J s
K_B = 1.38064900000e-23  # J / K

TWO_PI = 6.28318530717958647692
