"""Linear-oscillator physics: susceptibility, noise synthesis, open-loop simulation.

Conventions used throughout the package:

* All API frequencies are angular (rad/s).  Scenario files may carry Hz
  values; those are multiplied by 2*pi at parse time.
* A configured white-noise level ``S`` (N^2/Hz for forces, m^2/Hz for the
  measurement imprecision) yields per-sample variance ``S / (2 dt)``.  The
  matching two-sided density over angular frequency is ``S / 2``, with
  ``var = (1/2pi) * integral S(w) dw`` over the sampled band.
* Time stepping uses the exact propagator of the damped oscillator with
  zero-order-hold forcing, so the discrete response is exact for piecewise
  constant forces at any step size allowed by the resolution guard.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as _signal

from . import _loops
from .errors import ConfigError, GridMismatchError

__all__ = [
    "OscillatorParams",
    "SimGrid",
    "NoiseConfig",
    "NoiseRealization",
    "StateTrajectory",
    "MeasurementRecord",
    "Spectrum",
    "susceptibility",
    "modified_susceptibility",
    "susceptibility_sq_integral",
    "white_force_displacement_variance",
    "propagator",
    "check_resolution",
    "generate_noise",
    "simulate_open_loop",
    "psd_welch",
]


@dataclass(frozen=True)
class OscillatorParams:
    """Mass, angular damping rate and angular resonance frequency."""

    mass: float
    gamma: float
    omega_m: float

    def __post_init__(self):
        if not (self.mass > 0 and self.gamma > 0 and self.omega_m > 0):
            raise ConfigError(
                "oscillator parameters must be positive, got "
                f"mass={self.mass}, gamma={self.gamma}, omega_m={self.omega_m}"
            )

    @property
    def is_underdamped(self) -> bool:
        """True in the standard regime gamma < 2*omega_m (not enforced)."""
        return self.gamma < 2.0 * self.omega_m

    @classmethod
    def from_hz(cls, mass: float, f_m_hz: float, gamma_hz: float) -> "OscillatorParams":
        """Build from frequencies quoted in Hz (multiplied by 2*pi)."""
        return cls(mass=mass, gamma=2.0 * math.pi * gamma_hz, omega_m=2.0 * math.pi * f_m_hz)


@dataclass(frozen=True)
class SimGrid:
    """Uniform sampling grid."""

    dt: float
    n_samples: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")

    @property
    def duration(self) -> float:
        return self.dt * self.n_samples

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.dt


def check_resolution(params: OscillatorParams, grid: SimGrid) -> None:
    """Reject omega_m*dt > 0.5; warn above the recommended 0.1."""
    x = params.omega_m * grid.dt
    if x > 0.5:
        raise ConfigError(
            f"omega_m*dt = {x:.3g} exceeds the resolution guard 0.5; reduce dt"
        )
    if x > 0.1:
        warnings.warn(
            f"omega_m*dt = {x:.3g} above the recommended 0.1; "
            "discretization bias grows quadratically with the step",
            stacklevel=2,
        )


@dataclass(frozen=True)
class NoiseConfig:
    """White-noise levels and signal-band settings for one scenario.

    ``signal_band`` is an optional ``(center, halfwidth)`` pair in rad/s; when
    present the signal force is white noise shaped by a 2nd-order Butterworth
    bandpass with unit gain in the passband, so ``signal_force_psd`` is the
    in-band plateau level.  ``noise_law`` selects Gaussian or Student-t
    ("heavy_tailed") sampling; t variates are rescaled to unit variance so the
    configured levels keep their meaning.
    """

    thermal_force_psd: float = 0.0
    measurement_noise_psd: float = 0.0
    backaction_force_psd: float = 0.0
    backaction_measurement_correlation: float = 0.0
    signal_force_psd: float = 0.0
    signal_band: tuple[float, float] | None = None
    static_force: float = 0.0
    noise_law: str = "gaussian"
    tail_df: float = 6.0

    def __post_init__(self):
        for name in ("thermal_force_psd", "measurement_noise_psd",
                     "backaction_force_psd", "signal_force_psd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if abs(self.backaction_measurement_correlation) > 1:
            raise ConfigError(
                "backaction_measurement_correlation must lie in [-1, 1], got "
                f"{self.backaction_measurement_correlation}"
            )
        if self.signal_band is not None:
            center, halfwidth = self.signal_band
            if not halfwidth > 0:
                raise ConfigError(f"signal_band halfwidth must be > 0, got {halfwidth}")
            if not center > halfwidth:
                raise ConfigError("signal_band must not extend to or below zero frequency")
        if self.noise_law not in ("gaussian", "heavy_tailed"):
            raise ConfigError(f"unknown noise_law {self.noise_law!r}")
        if self.noise_law == "heavy_tailed" and not self.tail_df > 2:
            raise ConfigError(f"tail_df must exceed 2 for finite variance, got {self.tail_df}")


@dataclass(frozen=True)
class NoiseRealization:
    """Pre-drawn noise arrays shared between paired runs.

    Regenerating with the same (NoiseConfig, SimGrid, seed) reproduces the
    arrays bit for bit; each component is drawn from its own child stream of
    the seed, so toggling one level never perturbs the other components.
    """

    thermal: np.ndarray
    backaction: np.ndarray
    signal: np.ndarray
    measurement: np.ndarray
    grid: SimGrid
    seed: int
    static_force: float = 0.0

    def __post_init__(self):
        n = self.grid.n_samples
        for name in ("thermal", "backaction", "signal", "measurement"):
            if len(getattr(self, name)) != n:
                raise GridMismatchError(f"{name} array length != grid.n_samples")

    def total_force(self) -> np.ndarray:
        """Summed stochastic force plus the static term."""
        out = self.thermal + self.backaction + self.signal
        if self.static_force != 0.0:
            out = out + self.static_force
        return out


@dataclass(frozen=True)
class StateTrajectory:
    x: np.ndarray
    v: np.ndarray
    grid: SimGrid


@dataclass(frozen=True)
class MeasurementRecord:
    """Uniformly sampled measured displacement with provenance."""

    samples: np.ndarray
    grid: SimGrid
    seed: int
    scenario_id: str = ""

    def __post_init__(self):
        if len(self.samples) != self.grid.n_samples:
            raise GridMismatchError("samples length != grid.n_samples")


@dataclass(frozen=True)
class Spectrum:
    freqs: np.ndarray
    psd: np.ndarray
    sides: str = "one_sided"

    def __post_init__(self):
        if len(self.freqs) != len(self.psd):
            raise ConfigError("freqs and psd lengths differ")
        if np.any(np.diff(self.freqs) <= 0):
            raise ConfigError("freqs must be strictly increasing")


def susceptibility(omega, params: OscillatorParams):
    """Intrinsic mechanical response x(w)/F(w).

    chi(w) = 1 / (m * (omega_m^2 - w^2 + i*gamma*w)); finite for every real
    w when gamma > 0.  Accepts scalars or arrays.
    """
    w = np.asarray(omega, dtype=float)
    denom = params.mass * (params.omega_m**2 - w**2 + 1j * params.gamma * w)
    out = 1.0 / denom
    return out if out.ndim else complex(out)


def modified_susceptibility(omega, params: OscillatorParams, g_f: float):
    """Closed-loop response under velocity feedback: gamma -> gamma*(1+g_f)."""
    eff = OscillatorParams(params.mass, params.gamma * (1.0 + g_f), params.omega_m)
    return susceptibility(omega, eff)


def susceptibility_sq_integral(params: OscillatorParams, g_f: float = 0.0) -> float:
    """Closed form for integral_0^inf |chi'(w)|^2 dw = pi / (2 m^2 gamma' omega_m^2)."""
    gamma_eff = params.gamma * (1.0 + g_f)
    return math.pi / (2.0 * params.mass**2 * gamma_eff * params.omega_m**2)


def white_force_displacement_variance(params: OscillatorParams, force_psd: float) -> float:
    """Steady-state Var[x] under a white force of configured level S.

    The sampled process has two-sided density S/2, so Var[x] =
    (S/2) * (1/2pi) * integral |chi|^2 dw = S / (4 m^2 gamma omega_m^2).
    """
    return force_psd / (4.0 * params.mass**2 * params.gamma * params.omega_m**2)


def propagator(params: OscillatorParams, dt: float):
    """Exact one-step transition ((a00,a01,a10,a11), (b0,b1)) for ZOH forcing."""
    mu = 0.5 * params.gamma
    disc = params.omega_m**2 - mu * mu
    if disc > 0.0:
        wd = math.sqrt(disc)
        c = math.cos(wd * dt)
        s = math.sin(wd * dt) / wd
    elif disc < 0.0:
        wd = math.sqrt(-disc)
        c = math.cosh(wd * dt)
        s = math.sinh(wd * dt) / wd
    else:
        c = 1.0
        s = dt
    e = math.exp(-mu * dt)
    a00 = e * (c + mu * s)
    a01 = e * s
    a10 = -e * params.omega_m**2 * s
    a11 = e * (c - mu * s)
    b0 = (1.0 - a11 - params.gamma * a01) / (params.mass * params.omega_m**2)
    b1 = a01 / params.mass
    return (a00, a01, a10, a11), (b0, b1)


def _unit_noise(rng: np.random.Generator, n: int, law: str, df: float) -> np.ndarray:
    if law == "gaussian":
        return rng.standard_normal(n)
    # unit-variance Student-t
    return rng.standard_t(df, n) * math.sqrt((df - 2.0) / df)


def generate_noise(config: NoiseConfig, grid: SimGrid, seed: int) -> NoiseRealization:
    """Materialize thermal/backaction/measurement/signal arrays for one seed.

    Per-sample standard deviation of a white component is sqrt(S / (2 dt)).
    Backaction and measurement share a latent variate so their sample
    correlation matches the configured coefficient.  Deterministic per seed.
    """
    n, dt = grid.n_samples, grid.dt
    law, df = config.noise_law, config.tail_df
    rho = config.backaction_measurement_correlation

    def child(k: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))

    zeros = np.zeros(n)

    if config.thermal_force_psd > 0:
        thermal = _unit_noise(child(0), n, law, df) * math.sqrt(config.thermal_force_psd / (2 * dt))
    else:
        thermal = zeros

    need_shared = config.backaction_force_psd > 0 or (
        config.measurement_noise_psd > 0 and rho != 0.0
    )
    z_shared = _unit_noise(child(1), n, law, df) if need_shared else zeros
    backaction = (
        math.sqrt(config.backaction_force_psd / (2 * dt)) * z_shared
        if config.backaction_force_psd > 0
        else zeros
    )
    if config.measurement_noise_psd > 0:
        s_meas = math.sqrt(config.measurement_noise_psd / (2 * dt))
        if abs(rho) < 1.0:
            z_own = _unit_noise(child(2), n, law, df)
            measurement = s_meas * (rho * z_shared + math.sqrt(1.0 - rho * rho) * z_own)
        else:
            measurement = s_meas * (rho * z_shared)
    else:
        measurement = zeros

    if config.signal_force_psd > 0:
        sig = _unit_noise(child(3), n, law, df) * math.sqrt(config.signal_force_psd / (2 * dt))
        if config.signal_band is not None:
            center, halfwidth = config.signal_band
            fs = 1.0 / dt
            lo = (center - halfwidth) / (2 * math.pi)
            hi = (center + halfwidth) / (2 * math.pi)
            if hi >= fs / 2:
                raise ConfigError("signal_band extends beyond the Nyquist frequency")
            sos = _signal.butter(1, [lo, hi], btype="bandpass", fs=fs, output="sos")
            sig = _signal.sosfilt(sos, sig)
        signal_arr = sig
    else:
        signal_arr = zeros

    return NoiseRealization(
        thermal=thermal,
        backaction=backaction,
        signal=signal_arr,
        measurement=measurement,
        grid=grid,
        seed=int(seed),
        static_force=config.static_force,
    )


def simulate_open_loop(
    params: OscillatorParams,
    noise: NoiseRealization,
    grid: SimGrid,
    initial_state: tuple[float, float] = (0.0, 0.0),
) -> tuple[StateTrajectory, MeasurementRecord]:
    """Integrate the damped oscillator with ZOH forcing and no feedback.

    Exact linear propagator per step; the measurement record is the sampled
    displacement plus the measurement-noise array.  Deterministic given inputs.
    """
    if noise.grid != grid:
        raise GridMismatchError("noise realization was generated on a different grid")
    check_resolution(params, grid)
    (a00, a01, a10, a11), (b0, b1) = propagator(params, grid.dt)
    force = np.ascontiguousarray(noise.total_force(), dtype=np.float64)
    meas = np.ascontiguousarray(noise.measurement, dtype=np.float64)
    n = grid.n_samples
    x = np.empty(n)
    v = np.empty(n)
    xt = np.empty(n)
    fact = np.empty(n)
    coef = np.zeros(n)
    _loops.closed_loop_velocity_gain(
        a00, a01, a10, a11, b0, b1, coef, 0, force, meas,
        float(initial_state[0]), float(initial_state[1]), math.inf, x, v, fact, xt,
    )
    record = MeasurementRecord(samples=xt, grid=grid, seed=noise.seed, scenario_id="open_loop")
    return StateTrajectory(x=x, v=v, grid=grid), record


def psd_welch(
    record: MeasurementRecord,
    segment_len: int,
    overlap: float = 0.5,
    sides: str = "one_sided",
) -> Spectrum:
    """Hann-windowed averaged periodogram of a record.

    Returns density against angular frequency in the package convention:
    variance = (1/2pi) * integral psd(w) dw (two_sided), or the positive-
    frequency fold of the same (one_sided).  No detrending is applied.
    """
    n = record.grid.n_samples
    if not (0 < segment_len <= n):
        raise ConfigError(f"segment_len must be in [1, n_samples], got {segment_len}")
    if not (0.0 <= overlap < 1.0):
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    if sides not in ("one_sided", "two_sided"):
        raise ConfigError(f"sides must be one_sided or two_sided, got {sides!r}")
    fs = 1.0 / record.grid.dt
    f, p = _signal.welch(
        record.samples,
        fs=fs,
        window="hann",
        nperseg=segment_len,
        noverlap=int(round(overlap * segment_len)),
        detrend=False,
        return_onesided=(sides == "one_sided"),
        scaling="density",
    )
    if sides == "two_sided":
        f = np.fft.fftshift(f)
        p = np.fft.fftshift(p)
    return Spectrum(freqs=2.0 * math.pi * f, psd=np.maximum(p, 0.0), sides=sides)
