"""Causal linear feedback kernels and closed-loop time-domain simulation.

Cold damping applies F_act(t) = -m*gamma*g_f * d(x_meas)/dt, realized in
discrete time with the backward difference (x_k - x_{k-1})/dt and zero
prehistory.  The same discrete derivative is mirrored by the equivalent
filter, which makes the feedback/filter record equivalence exact in the
implemented arithmetic rather than only in the continuum limit.  The loop is
ideal: no feedback noise, zero latency within the step, ZOH over the next
step; an integer-step delay knob is available for robustness studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import _loops
from .errors import ConfigError, GridMismatchError, InstabilityError
from .oscillator import (
    MeasurementRecord,
    NoiseRealization,
    OscillatorParams,
    SimGrid,
    StateTrajectory,
    check_resolution,
    propagator,
    white_force_displacement_variance,
)

__all__ = [
    "ColdDampingKernel",
    "StationaryTapsKernel",
    "GainScheduleKernel",
    "TwoTimeKernel",
    "FeedbackKernel",
    "ClosedLoopResult",
    "cold_damping_kernel",
    "stationary_taps_kernel",
    "nonstationary_schedule",
    "two_time_kernel",
    "kernel_dc_gain",
    "simulate_closed_loop",
]


@dataclass(frozen=True)
class ColdDampingKernel:
    """Velocity-proportional feedback with unitless gain g_f."""

    g_f: float
    params: OscillatorParams
    delay_steps: int = 0

    def coefficient(self, dt: float) -> float:
        """Scale applied to the backward difference: -m*gamma*g_f/dt."""
        return -self.params.mass * self.params.gamma * self.g_f / dt


@dataclass(frozen=True)
class StationaryTapsKernel:
    """F_act[k] = sum_j taps[j] * x_meas[k-j]; taps carry N/m."""

    taps: np.ndarray
    dt: float


@dataclass(frozen=True)
class GainScheduleKernel:
    """Cold damping with a per-sample gain schedule g_f(t)."""

    gains: np.ndarray
    params: OscillatorParams
    delay_steps: int = 0

    def coefficients(self, dt: float) -> np.ndarray:
        return -self.params.mass * self.params.gamma * self.gains / dt


@dataclass(frozen=True)
class TwoTimeKernel:
    """General causal kernel: F_act[k] = sum_{l<=k} matrix[k, l] * x_meas[l]."""

    matrix: np.ndarray
    dt: float


FeedbackKernel = Union[ColdDampingKernel, StationaryTapsKernel, GainScheduleKernel, TwoTimeKernel]


@dataclass(frozen=True)
class ClosedLoopResult:
    trajectory: StateTrajectory
    record: MeasurementRecord
    actuation: np.ndarray
    mean_shift: float


def cold_damping_kernel(g_f: float, params: OscillatorParams,
                        delay_steps: int = 0) -> ColdDampingKernel:
    """Velocity feedback; requires g_f > -1 (effective linewidth gamma*(1+g_f) > 0)."""
    if not g_f > -1.0:
        raise ConfigError(f"cold damping requires g_f > -1 for stability, got {g_f}")
    if delay_steps < 0:
        raise ConfigError("delay_steps must be >= 0")
    return ColdDampingKernel(g_f=float(g_f), params=params, delay_steps=int(delay_steps))


def stationary_taps_kernel(taps: np.ndarray, dt: float) -> StationaryTapsKernel:
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if taps.ndim != 1 or taps.size == 0:
        raise ConfigError("taps must be a non-empty 1-d array")
    if not dt > 0:
        raise ConfigError("dt must be positive")
    return StationaryTapsKernel(taps=taps, dt=float(dt))


def nonstationary_schedule(g_of_t: np.ndarray, params: OscillatorParams,
                           grid: SimGrid, delay_steps: int = 0) -> GainScheduleKernel:
    """Per-sample gain schedule; reduces to cold damping when constant."""
    gains = np.ascontiguousarray(g_of_t, dtype=np.float64)
    if gains.shape != (grid.n_samples,):
        raise GridMismatchError(
            f"schedule length {gains.shape} does not match n_samples={grid.n_samples}"
        )
    if not np.all(gains > -1.0):
        raise ConfigError("every scheduled gain must exceed -1")
    if delay_steps < 0:
        raise ConfigError("delay_steps must be >= 0")
    return GainScheduleKernel(gains=gains, params=params, delay_steps=int(delay_steps))


def two_time_kernel(matrix: np.ndarray, dt: float) -> TwoTimeKernel:
    """General non-stationary kernel; entries above the diagonal must be zero."""
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError("two-time kernel must be a square matrix")
    if np.any(np.triu(m, k=1) != 0.0):
        raise ConfigError("two-time kernel is acausal: nonzero entries at tau > t")
    return TwoTimeKernel(matrix=m, dt=float(dt))


def kernel_dc_gain(kernel: FeedbackKernel) -> float:
    """Zero-frequency force-per-displacement gain of the kernel.

    Derivative-type kernels have zero DC gain; for a two-time kernel the last
    row sum is used as the late-time stationary equivalent.
    """
    if isinstance(kernel, (ColdDampingKernel, GainScheduleKernel)):
        return 0.0
    if isinstance(kernel, StationaryTapsKernel):
        return float(np.sum(kernel.taps))
    return float(np.sum(kernel.matrix[-1]) * 1.0)


def _divergence_bound(params, noise, initial_state):
    # Blow-up detector scale: resonant response of the summed white force,
    # plus static and initial-condition scales.  Exact value is uncritical.
    dt = noise.grid.dt
    var_f = float(np.var(noise.thermal) + np.var(noise.backaction) + np.var(noise.signal))
    psd_equiv = 2.0 * dt * var_f
    ref = math.sqrt(white_force_displacement_variance(params, psd_equiv))
    ref = max(
        ref,
        float(np.std(noise.measurement)),
        abs(noise.static_force) / (params.mass * params.omega_m**2),
        abs(initial_state[0]),
        abs(initial_state[1]) / params.omega_m,
    )
    return math.inf if ref == 0.0 else 1e6 * ref


def simulate_closed_loop(
    params: OscillatorParams,
    noise: NoiseRealization,
    kernel: FeedbackKernel,
    grid: SimGrid,
    initial_state: tuple[float, float] = (0.0, 0.0),
    divergence_bound: float | None = None,
) -> ClosedLoopResult:
    """Per-step feedback loop on the measured record.

    At step k the actuation is computed from measured samples up to and
    including k (strictly non-anticipating) and held over the step to k+1.
    Reusing the NoiseRealization of an open-loop run yields the paired
    closed-loop run.  Raises InstabilityError if |x| exceeds the divergence
    bound (default 1e6 times the expected thermal RMS).
    """
    if noise.grid != grid:
        raise GridMismatchError("noise realization was generated on a different grid")
    check_resolution(params, grid)
    n, dt = grid.n_samples, grid.dt
    (a00, a01, a10, a11), (b0, b1) = propagator(params, dt)
    force = _loops.as_f64(noise.total_force())
    meas = _loops.as_f64(noise.measurement)
    bound = _divergence_bound(params, noise, initial_state) if divergence_bound is None \
        else float(divergence_bound)
    x = np.empty(n)
    v = np.empty(n)
    xt = np.empty(n)
    fact = np.empty(n)
    x0, v0 = float(initial_state[0]), float(initial_state[1])

    if isinstance(kernel, ColdDampingKernel):
        coef = np.full(n, kernel.coefficient(dt))
        bad = _loops.closed_loop_velocity_gain(
            a00, a01, a10, a11, b0, b1, coef, kernel.delay_steps,
            force, meas, x0, v0, bound, x, v, fact, xt)
    elif isinstance(kernel, GainScheduleKernel):
        coef = _loops.as_f64(kernel.coefficients(dt))
        if coef.shape[0] != n:
            raise GridMismatchError("gain schedule length does not match the grid")
        bad = _loops.closed_loop_velocity_gain(
            a00, a01, a10, a11, b0, b1, coef, kernel.delay_steps,
            force, meas, x0, v0, bound, x, v, fact, xt)
    elif isinstance(kernel, StationaryTapsKernel):
        bad = _loops.closed_loop_taps(
            a00, a01, a10, a11, b0, b1, _loops.as_f64(kernel.taps),
            force, meas, x0, v0, bound, x, v, fact, xt)
    elif isinstance(kernel, TwoTimeKernel):
        if kernel.matrix.shape[0] != n:
            raise GridMismatchError("two-time kernel size does not match the grid")
        bad = _loops.closed_loop_two_time(
            a00, a01, a10, a11, b0, b1, _loops.as_f64(kernel.matrix),
            force, meas, x0, v0, bound, x, v, fact, xt)
    else:
        raise TypeError(f"unsupported kernel type {type(kernel).__name__}")

    if bad >= 0:
        raise InstabilityError(
            f"closed loop diverged at step {bad} (|x| > {bound:.3e}); the discrete "
            f"loop is unstable at this gain for omega_m*dt = {params.omega_m * dt:.3g}",
            step=int(bad), bound=float(bound),
        )

    g0 = kernel_dc_gain(kernel)
    chi0 = 1.0 / (params.mass * params.omega_m**2)
    denom = 1.0 - chi0 * g0
    if denom == 0.0:
        raise InstabilityError("kernel DC gain cancels the spring constant", step=0,
                               bound=bound)
    mean_shift = noise.static_force * chi0 * (1.0 / denom - 1.0)

    record = MeasurementRecord(samples=xt, grid=grid, seed=noise.seed,
                               scenario_id="closed_loop")
    return ClosedLoopResult(
        trajectory=StateTrajectory(x=x, v=v, grid=grid),
        record=record,
        actuation=fact,
        mean_shift=float(mean_shift),
    )
