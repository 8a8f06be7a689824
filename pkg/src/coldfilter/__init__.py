"""coldfilter: feedback-cooled oscillator simulation and the causal filter
that reproduces any linear feedback protocol's measurement record from the
feedback-free record, with the estimation chain for incoherent force sensing.
"""

from ._version import __version__
from .errors import ConfigError, GridMismatchError, InstabilityError
from .oscillator import (
    OscillatorParams,
    SimGrid,
    NoiseConfig,
    NoiseRealization,
    StateTrajectory,
    MeasurementRecord,
    Spectrum,
    susceptibility,
    modified_susceptibility,
    susceptibility_sq_integral,
    white_force_displacement_variance,
    generate_noise,
    simulate_open_loop,
    psd_welch,
)
from .feedback import (
    ColdDampingKernel,
    StationaryTapsKernel,
    GainScheduleKernel,
    TwoTimeKernel,
    ClosedLoopResult,
    cold_damping_kernel,
    stationary_taps_kernel,
    nonstationary_schedule,
    two_time_kernel,
    simulate_closed_loop,
)
from .equivfilter import (
    FilterSpec,
    KernelMatrix,
    EquivalenceReport,
    stationary_filter,
    invert_filter,
    apply_filter,
    apply_filter_fft,
    chi_impulse_response,
    discretize_kernels,
    fredholm_solve,
    verify_equivalence,
)
from .estimation import (
    QuadratureRecord,
    EnergyEstimate,
    SensitivityCurve,
    ResolveResult,
    demodulate,
    energy_estimate,
    ensemble_stats,
    chi_prime_sq_integral,
    force_sensitivity,
    sensitivity_curve_vs_tau,
    fit_scaling_exponent,
    resolve_time,
)
from .scenarios import (
    ScenarioConfig,
    ScheduleSpec,
    EstimationSettings,
    RunManifest,
    parse_config,
    canonical_json,
    scenario_hash,
    run_scenario,
    calibrate_signal_psd,
    squash_threshold_gain,
    gain_sweep_stats,
    resolve_sweep,
    emit_figure_data,
)

__all__ = [name for name in dir() if not name.startswith("_")]
