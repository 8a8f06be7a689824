import numpy as np
import pytest

from coldfilter import NoiseConfig, OscillatorParams, SimGrid


@pytest.fixture
def desk_params():
    """Dimensionless oscillator used by most statistical checks."""
    return OscillatorParams(mass=1.0, gamma=0.02, omega_m=1.0)


@pytest.fixture
def narrow_params():
    """Slow-damping oscillator matching the acceptance scaling."""
    return OscillatorParams(mass=1.0, gamma=1e-3, omega_m=1.0)


def grid(n, dt=0.1):
    return SimGrid(dt=dt, n_samples=n)


def thermal_cfg(psd=2.0, **kw):
    return NoiseConfig(thermal_force_psd=psd, **kw)


def rel_l2(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
