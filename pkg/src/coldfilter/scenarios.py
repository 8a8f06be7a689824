"""Scenario configuration, end-to-end pipelines and figure-data bundles.

Scenario files are declarative JSON with explicit unit suffixes: frequencies
may be given as ``*_rad_s`` or ``*_hz`` (Hz values are multiplied by 2*pi at
parse time).  Serialization is canonical (rad/s keys, sorted), so
``serialize(parse(text))`` is a stable form of the same scenario and its
SHA-256 together with the seed and code version identifies a run.

All ensemble work derives per-trial seeds from the master seed by counter
derivation, aggregates by trial index, and is therefore independent of the
thread count; identical config plus seed reproduces every output file byte
for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as _signal

from ._version import __version__
from .equivfilter import (
    _chi_polys,
    apply_filter,
    discretize_kernels,
    fredholm_solve,
    stationary_filter,
    verify_equivalence,
)
from .errors import ConfigError
from .estimation import (
    EnergyEstimate,
    QuadratureRecord,
    default_decimation,
    demodulate,
    energy_estimate,
    resolve_time,
    sensitivity_curve_vs_tau,
    trial_seeds,
)
from .feedback import cold_damping_kernel, nonstationary_schedule, simulate_closed_loop
from .oscillator import (
    MeasurementRecord,
    NoiseConfig,
    OscillatorParams,
    SimGrid,
    generate_noise,
    psd_welch,
    simulate_open_loop,
    susceptibility,
)
from .recordio import write_csv, write_record

__all__ = [
    "ScheduleSpec",
    "EstimationSettings",
    "ScenarioConfig",
    "RunManifest",
    "parse_config",
    "canonical_json",
    "scenario_hash",
    "run_scenario",
    "compare_records",
    "calibrate_signal_psd",
    "squash_threshold_gain",
    "gain_sweep_stats",
    "resolve_sweep",
    "emit_figure_data",
    "FIGURE_IDS",
    "OUTPUT_DIR_ENV",
]

OUTPUT_DIR_ENV = "COLDFILTER_OUT"
FIGURE_IDS = ("fig2a", "fig2b", "fig2c", "fig3a", "fig3b")

_MODES = ("open_loop", "feedback", "filter", "fredholm")


@dataclass(frozen=True)
class ScheduleSpec:
    """Gain schedule description: constant, step at t_start, or linear ramp."""

    kind: str
    g_start: float = 0.0
    g_end: float = 0.0
    t_start: float = 0.0
    t_end: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "step", "ramp"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "ramp" and self.t_end is not None and self.t_end <= self.t_start:
            raise ConfigError("ramp requires t_end > t_start")

    def gains(self, grid: SimGrid) -> np.ndarray:
        t = grid.times()
        if self.kind == "constant":
            return np.full(grid.n_samples, self.g_start)
        if self.kind == "step":
            return np.where(t < self.t_start, self.g_start, self.g_end)
        t_end = grid.duration if self.t_end is None else self.t_end
        return np.interp(t, [self.t_start, t_end], [self.g_start, self.g_end])


@dataclass(frozen=True)
class EstimationSettings:
    omega_ref: float | None = None
    lowpass_cutoff: float | None = None
    decimation: int | None = None
    settle_time: float | None = None
    tau_list: tuple[float, ...] = ()
    n_trials: int = 2


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    oscillator: OscillatorParams
    grid: SimGrid
    noise: NoiseConfig
    mode: str = "open_loop"
    gain: float = 0.0
    schedule: ScheduleSpec | None = None
    burn_in_time: float = 0.0
    estimation: EstimationSettings | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.mode == "fredholm" and self.schedule is None:
            raise ConfigError("mode=fredholm requires a schedule")
        if self.burn_in_time < 0:
            raise ConfigError("burn_in_time must be >= 0")

    @property
    def burn_samples(self) -> int:
        return int(round(self.burn_in_time / self.grid.dt))


# ----------------------------------------------------------------------------
# config parsing / serialization

def _freq_from(d: dict, base: str, context: str) -> float:
    rad_key, hz_key = f"{base}_rad_s", f"{base}_hz"
    has_rad, has_hz = rad_key in d, hz_key in d
    if has_rad == has_hz:
        raise ConfigError(f"{context}: give exactly one of {rad_key} or {hz_key}")
    return float(d[rad_key]) if has_rad else 2.0 * math.pi * float(d[hz_key])


def _check_keys(d: dict, allowed: set[str], context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown fields {sorted(unknown)}")


def _parse_oscillator(d: dict) -> OscillatorParams:
    _check_keys(d, {"mass", "omega_m_rad_s", "omega_m_hz", "gamma_rad_s", "gamma_hz"},
                "oscillator")
    if "mass" not in d:
        raise ConfigError("oscillator: mass is required")
    return OscillatorParams(
        mass=float(d["mass"]),
        omega_m=_freq_from(d, "omega_m", "oscillator"),
        gamma=_freq_from(d, "gamma", "oscillator"),
    )


def _parse_noise(d: dict) -> NoiseConfig:
    allowed = {"thermal_force_psd", "measurement_noise_psd", "backaction_force_psd",
               "backaction_measurement_correlation", "signal_force_psd",
               "signal_band_rad_s", "signal_band_hz", "static_force",
               "noise_law", "tail_df"}
    _check_keys(d, allowed, "noise")
    band = None
    if d.get("signal_band_rad_s") is not None:
        c, h = d["signal_band_rad_s"]
        band = (float(c), float(h))
    elif d.get("signal_band_hz") is not None:
        c, h = d["signal_band_hz"]
        band = (2.0 * math.pi * float(c), 2.0 * math.pi * float(h))
    return NoiseConfig(
        thermal_force_psd=float(d.get("thermal_force_psd", 0.0)),
        measurement_noise_psd=float(d.get("measurement_noise_psd", 0.0)),
        backaction_force_psd=float(d.get("backaction_force_psd", 0.0)),
        backaction_measurement_correlation=float(
            d.get("backaction_measurement_correlation", 0.0)),
        signal_force_psd=float(d.get("signal_force_psd", 0.0)),
        signal_band=band,
        static_force=float(d.get("static_force", 0.0)),
        noise_law=str(d.get("noise_law", "gaussian")),
        tail_df=float(d.get("tail_df", 6.0)),
    )


def _parse_schedule(d: dict | None) -> ScheduleSpec | None:
    if d is None:
        return None
    _check_keys(d, {"kind", "g_start", "g_end", "t_start", "t_end"}, "schedule")
    return ScheduleSpec(
        kind=str(d["kind"]),
        g_start=float(d.get("g_start", 0.0)),
        g_end=float(d.get("g_end", 0.0)),
        t_start=float(d.get("t_start", 0.0)),
        t_end=None if d.get("t_end") is None else float(d["t_end"]),
    )


def _parse_estimation(d: dict | None) -> EstimationSettings | None:
    if d is None:
        return None
    allowed = {"omega_ref_rad_s", "omega_ref_hz", "lowpass_cutoff_rad_s",
               "lowpass_cutoff_hz", "decimation", "settle_time", "tau_list", "n_trials"}
    _check_keys(d, allowed, "estimation")

    def opt_freq(base):
        if f"{base}_rad_s" in d or f"{base}_hz" in d:
            return _freq_from(d, base, "estimation")
        return None

    return EstimationSettings(
        omega_ref=opt_freq("omega_ref"),
        lowpass_cutoff=opt_freq("lowpass_cutoff"),
        decimation=None if d.get("decimation") is None else int(d["decimation"]),
        settle_time=None if d.get("settle_time") is None else float(d["settle_time"]),
        tau_list=tuple(float(t) for t in d.get("tau_list", ())),
        n_trials=int(d.get("n_trials", 2)),
    )


def parse_config(source: str | dict) -> ScenarioConfig:
    """Parse a scenario from JSON text or an already-decoded dict."""
    d = json.loads(source) if isinstance(source, str) else dict(source)
    allowed = {"scenario_id", "oscillator", "grid", "noise", "mode", "gain",
               "schedule", "burn_in_time", "estimation", "seed"}
    _check_keys(d, allowed, "scenario")
    for req in ("oscillator", "grid", "noise"):
        if req not in d:
            raise ConfigError(f"scenario: missing required section {req!r}")
    gd = d["grid"]
    _check_keys(gd, {"dt", "n_samples"}, "grid")
    return ScenarioConfig(
        scenario_id=str(d.get("scenario_id", "scenario")),
        oscillator=_parse_oscillator(d["oscillator"]),
        grid=SimGrid(dt=float(gd["dt"]), n_samples=int(gd["n_samples"])),
        noise=_parse_noise(d["noise"]),
        mode=str(d.get("mode", "open_loop")),
        gain=float(d.get("gain", 0.0)),
        schedule=_parse_schedule(d.get("schedule")),
        burn_in_time=float(d.get("burn_in_time", 0.0)),
        estimation=_parse_estimation(d.get("estimation")),
        seed=int(d.get("seed", 0)),
    )


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Canonical dict form (rad/s keys, all defaults explicit)."""
    osc = {"mass": cfg.oscillator.mass,
           "omega_m_rad_s": cfg.oscillator.omega_m,
           "gamma_rad_s": cfg.oscillator.gamma}
    nz = cfg.noise
    noise = {
        "thermal_force_psd": nz.thermal_force_psd,
        "measurement_noise_psd": nz.measurement_noise_psd,
        "backaction_force_psd": nz.backaction_force_psd,
        "backaction_measurement_correlation": nz.backaction_measurement_correlation,
        "signal_force_psd": nz.signal_force_psd,
        "signal_band_rad_s": None if nz.signal_band is None else list(nz.signal_band),
        "static_force": nz.static_force,
        "noise_law": nz.noise_law,
        "tail_df": nz.tail_df,
    }
    sched = None
    if cfg.schedule is not None:
        sched = {"kind": cfg.schedule.kind, "g_start": cfg.schedule.g_start,
                 "g_end": cfg.schedule.g_end, "t_start": cfg.schedule.t_start,
                 "t_end": cfg.schedule.t_end}
    est = None
    if cfg.estimation is not None:
        e = cfg.estimation
        est = {"omega_ref_rad_s": e.omega_ref, "lowpass_cutoff_rad_s": e.lowpass_cutoff,
               "decimation": e.decimation, "settle_time": e.settle_time,
               "tau_list": list(e.tau_list), "n_trials": e.n_trials}
    return {
        "scenario_id": cfg.scenario_id,
        "oscillator": osc,
        "grid": {"dt": cfg.grid.dt, "n_samples": cfg.grid.n_samples},
        "noise": noise,
        "mode": cfg.mode,
        "gain": cfg.gain,
        "schedule": sched,
        "burn_in_time": cfg.burn_in_time,
        "estimation": est,
        "seed": cfg.seed,
    }


def canonical_json(cfg: ScenarioConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def scenario_hash(cfg: ScenarioConfig, seed: int | None = None) -> str:
    seed = cfg.seed if seed is None else seed
    text = f"{canonical_json(cfg)}|seed={seed}|version={__version__}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    scenario_hash: str
    seed: int
    code_version: str
    created_utc: str
    outputs: tuple[str, ...]
    config: dict
    extras: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        payload = {
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "code_version": self.code_version,
            "created_utc": self.created_utc,
            "outputs": list(self.outputs),
            "config": self.config,
            "extras": self.extras,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _manifest(cfg: ScenarioConfig, outputs: Sequence[str], extras: dict | None = None,
              ) -> RunManifest:
    return RunManifest(
        scenario_hash=scenario_hash(cfg),
        seed=cfg.seed,
        code_version=__version__,
        created_utc=_time.strftime("%Y-%m-%dT%H:%M:%SZ", _time.gmtime()),
        outputs=tuple(outputs),
        config=config_to_dict(cfg),
        extras=extras or {},
    )


# ----------------------------------------------------------------------------
# single-scenario pipelines

def _build_kernel(cfg: ScenarioConfig):
    if cfg.schedule is not None:
        return nonstationary_schedule(cfg.schedule.gains(cfg.grid), cfg.oscillator,
                                      cfg.grid)
    return cold_damping_kernel(cfg.gain, cfg.oscillator)


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path) -> RunManifest:
    """Execute the configured mode and write record files plus a manifest.

    Identical config and seed produce byte-identical outputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    noise = generate_noise(cfg.noise, cfg.grid, cfg.seed)
    outputs: list[str] = []
    extras: dict = {}

    def save(name: str, record: MeasurementRecord) -> None:
        path = out / name
        write_record(path, record)
        outputs.append(str(path))

    if cfg.mode == "open_loop":
        _, rec0 = simulate_open_loop(cfg.oscillator, noise, cfg.grid)
        rec0 = replace(rec0, scenario_id=cfg.scenario_id)
        save("record.cfrec", rec0)
    elif cfg.mode == "feedback":
        kernel = _build_kernel(cfg)
        res = simulate_closed_loop(cfg.oscillator, noise, kernel, cfg.grid)
        save("record.cfrec", replace(res.record, scenario_id=cfg.scenario_id))
        extras["mean_shift"] = res.mean_shift
    elif cfg.mode == "filter":
        if cfg.schedule is not None:
            raise ConfigError("mode=filter is stationary; use mode=fredholm for schedules")
        _, rec0 = simulate_open_loop(cfg.oscillator, noise, cfg.grid)
        filt = stationary_filter(cfg.oscillator, cold_damping_kernel(cfg.gain,
                                                                     cfg.oscillator))
        rec = apply_filter(rec0, filt)
        save("record0.cfrec", replace(rec0, scenario_id=cfg.scenario_id + ":open"))
        save("record.cfrec", replace(rec, scenario_id=cfg.scenario_id))
    elif cfg.mode == "fredholm":
        _, rec0 = simulate_open_loop(cfg.oscillator, noise, cfg.grid)
        kernel = _build_kernel(cfg)
        kmat = discretize_kernels(None, kernel, cfg.oscillator, cfg.grid)
        rec = fredholm_solve(kmat, rec0)
        save("record0.cfrec", replace(rec0, scenario_id=cfg.scenario_id + ":open"))
        save("record.cfrec", replace(rec, scenario_id=cfg.scenario_id))

    manifest = _manifest(cfg, outputs, extras)
    manifest.write(out / "manifest.json")
    return manifest


def compare_records(record_a: MeasurementRecord, record_b: MeasurementRecord,
                    psd_segment_len: int | None = None):
    """verify_equivalence wrapper with an automatic PSD segment choice."""
    if psd_segment_len is None:
        psd_segment_len = max(16, record_a.grid.n_samples // 8)
    return verify_equivalence(record_a, record_b, psd_segment_len=psd_segment_len)


# ----------------------------------------------------------------------------
# analytic scenario helpers

def calibrate_signal_psd(params: OscillatorParams, dt: float, thermal_psd: float,
                         band: tuple[float, float], fraction: float) -> float:
    """In-band signal level putting the signal energy at ``fraction`` of thermal.

    Uses the exact discrete responses: the oscillator impulse response and the
    2nd-order Butterworth bandpass shaping the signal force.
    """
    if not 0 < fraction:
        raise ConfigError("fraction must be positive")
    num, den = _chi_polys(params, dt)
    worn = 1 << 21
    w, h_chi = _signal.freqz(num, den, worN=worn)
    center, halfwidth = band
    fs = 1.0 / dt
    sos = _signal.butter(1, [(center - halfwidth) / (2 * math.pi),
                             (center + halfwidth) / (2 * math.pi)],
                         btype="bandpass", fs=fs, output="sos")
    _, h_bp = _signal.sosfreqz(sos, worN=worn)
    chi2 = np.abs(h_chi) ** 2
    mean_chi = float(np.mean(chi2))
    mean_sig = float(np.mean(chi2 * np.abs(h_bp) ** 2))
    return fraction * thermal_psd * mean_chi / mean_sig


def squash_threshold_gain(params: OscillatorParams, thermal_psd: float,
                          measurement_psd: float) -> float:
    """Gain above which the in-loop PSD at resonance drops below the noise floor.

    The peak of the measured in-loop spectrum is (S_peak + S_floor)/(1+g)^2;
    it crosses the flat floor at g = sqrt(1 + S_peak/S_floor) - 1.
    """
    if measurement_psd <= 0:
        return math.inf
    chi_peak = abs(susceptibility(params.omega_m, params))
    snr_peak = thermal_psd * chi_peak**2 / measurement_psd
    return math.sqrt(1.0 + snr_peak) - 1.0


# ----------------------------------------------------------------------------
# ensemble sweeps

def _demod_plan(cfg: ScenarioConfig, g_max: float):
    params, dt = cfg.oscillator, cfg.grid.dt
    est = cfg.estimation or EstimationSettings()
    omega_ref = est.omega_ref if est.omega_ref is not None else params.omega_m
    cutoff = est.lowpass_cutoff
    if cutoff is None:
        cutoff = min(10.0 * params.gamma * (1.0 + g_max), 0.25 * params.omega_m)
    decimation = est.decimation if est.decimation is not None else \
        default_decimation(cutoff, dt)
    settle = est.settle_time if est.settle_time is not None else 10.0 / cutoff
    settle_dec = int(math.ceil(settle / (dt * decimation)))
    return omega_ref, cutoff, decimation, settle_dec


def _trimmed_record(rec: MeasurementRecord, burn: int) -> MeasurementRecord:
    if burn == 0:
        return rec
    grid = SimGrid(dt=rec.grid.dt, n_samples=rec.grid.n_samples - burn)
    return MeasurementRecord(samples=rec.samples[burn:], grid=grid, seed=rec.seed,
                             scenario_id=rec.scenario_id)


def gain_sweep_stats(cfg: ScenarioConfig, gains: Sequence[float],
                     modes: Sequence[str], tau_list: Sequence[float],
                     n_trials: int, master_seed: int, threads: int = 1,
                     ) -> dict[tuple[str, float], list[EnergyEstimate]]:
    """Ensemble energy statistics for each (mode, gain) on shared noise.

    Within a trial every mode and gain consumes the same NoiseRealization, so
    feedback and filtering are paired sample for sample; the open-loop
    simulation is shared across all filter gains.
    """
    for mode in modes:
        if mode not in ("open_loop", "feedback", "filter"):
            raise ConfigError(f"sweep mode must be open_loop/feedback/filter, got {mode}")
    params, grid, burn = cfg.oscillator, cfg.grid, cfg.burn_samples
    g_max = max(gains) if len(gains) else 0.0
    omega_ref, cutoff, decimation, settle_dec = _demod_plan(cfg, g_max)
    kernels = {g: cold_damping_kernel(g, params) for g in gains}
    filters = {g: stationary_filter(params, kernels[g]) for g in gains}
    seeds = trial_seeds(master_seed, n_trials)
    cells = [(m, g) for m in modes for g in gains]
    energies = np.empty((n_trials, len(cells), len(tau_list)))

    def demod_quad(rec: MeasurementRecord) -> QuadratureRecord:
        quad = demodulate(_trimmed_record(rec, burn), omega_ref, cutoff, decimation)
        return quad.trimmed(settle_dec)

    def one(idx: int) -> None:
        seed = int(seeds[idx])
        noise = generate_noise(cfg.noise, grid, seed)
        rec0 = None
        if any(m in ("open_loop", "filter") for m in modes):
            _, rec0 = simulate_open_loop(params, noise, grid)
        for c, (mode, g) in enumerate(cells):
            if mode == "open_loop":
                rec = rec0
            elif mode == "filter":
                rec = apply_filter(rec0, filters[g])
            else:
                rec = simulate_closed_loop(params, noise, kernels[g], grid).record
            quad = demod_quad(rec)
            for j, tau in enumerate(tau_list):
                energies[idx, c, j] = energy_estimate(quad, tau)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(n_trials)))
    else:
        for idx in range(n_trials):
            one(idx)

    out: dict[tuple[str, float], list[EnergyEstimate]] = {}
    for c, cell in enumerate(cells):
        means = energies[:, c, :].mean(axis=0)
        sigmas = energies[:, c, :].std(axis=0)
        out[cell] = [EnergyEstimate(tau=float(t), mean=float(m), sigma=float(s),
                                    n_trials=n_trials)
                     for t, m, s in zip(tau_list, means, sigmas)]
    return out


def resolve_sweep(cfg: ScenarioConfig, gains: Sequence[float],
                  tau_list: Sequence[float], n_trials: int, master_seed: int,
                  threads: int = 1):
    """tau_resolve per gain for the configured incoherent signal.

    Runs the thermal-only and thermal-plus-signal scenarios with identical
    trial seeds; the component-wise noise streams keep the thermal and
    measurement arrays shared between the two, mirroring a paired experiment.
    """
    if cfg.noise.signal_force_psd <= 0:
        raise ConfigError("resolve_sweep requires a configured signal force")
    cfg_thermal = replace(cfg, noise=replace(cfg.noise, signal_force_psd=0.0))
    thermal = gain_sweep_stats(cfg_thermal, gains, ["filter"], tau_list, n_trials,
                               master_seed, threads)
    with_sig = gain_sweep_stats(cfg, gains, ["filter"], tau_list, n_trials,
                                master_seed, threads)
    results = [resolve_time(thermal[("filter", g)], with_sig[("filter", g)], g)
               for g in gains]
    return results, thermal, with_sig


# ----------------------------------------------------------------------------
# figure bundles

def _desk_oscillator(gamma: float) -> OscillatorParams:
    return OscillatorParams(mass=1.0, gamma=gamma, omega_m=1.0)


def _merge(base: dict, overrides: dict | None) -> dict:
    if not overrides:
        return dict(base)
    out = dict(base)
    for key, val in overrides.items():
        if key not in base:
            raise ConfigError(f"figure override: unknown field {key!r}")
        out[key] = val
    return out


# Desk-scale defaults reproducing the published plots in scaled units
# (omega_m = 1).  Every knob can be overridden from the CLI.
FIGURE_DEFAULTS: dict[str, dict] = {
    "fig2a": {
        "gamma": 1e-3, "dt": 0.1, "n_samples": 1 << 21, "segment_len": 1 << 18,
        "thermal_force_psd": 2.0, "measurement_noise_psd": 5000.0,
        "gains": [2.0, 8.0, 34.0, 72.0, 150.0], "inset_gain": 1.0, "seed": 20260809,
    },
    "fig2b": {
        "gamma": 1e-3, "dt": 0.1, "n_samples": (1 << 20) + 100_000,
        "burn_in_time": 10_000.0, "thermal_force_psd": 2.0,
        "measurement_noise_psd": 20.0, "gains": [0.0, 1.0, 2.4, 5.0, 10.0],
        "feedback_gains": [1.0, 2.4, 5.0, 10.0], "n_trials": 200,
        "tau_over_gamma": [3.0, 5.0, 8.0, 13.0, 20.0, 30.0, 40.0, 53.0, 70.0, 93.0],
        "seed": 20260809,
    },
    "fig2c": {
        "gamma": 1e-3, "dt": 0.1, "n_samples": 405_000, "burn_in_time": 10_000.0,
        "thermal_force_psd": 2.0, "measurement_noise_psd": 5000.0,
        "lowpass_cutoff": 0.12, "tau_over_gamma": 30.0, "n_trials": 160,
        "gains": [0.0, 1.0, 2.0, 4.0, 6.0, 9.0, 13.0, 19.0, 27.0, 38.0, 54.0, 76.0],
        "seed": 20260809,
    },
    "fig3a": {
        "gamma": 2e-3, "dt": 0.1, "n_samples": 2_551_000, "burn_in_time": 5000.0,
        "thermal_force_psd": 2.0, "measurement_noise_psd": 1250.0,
        "signal_fraction": 0.07, "signal_halfwidth_over_gamma": 10.0,
        "lowpass_cutoff": 0.15, "n_trials": 40, "tau_points": 16,
        "tau_over_gamma_min": 5.0, "tau_over_gamma_max": 500.0, "seed": 20260809,
    },
    "fig3b": {
        "gamma": 2e-3, "dt": 0.1, "n_samples": 2_551_000, "burn_in_time": 5000.0,
        "thermal_force_psd": 2.0, "measurement_noise_psd": 1250.0,
        "signal_fraction": 0.07, "signal_halfwidth_over_gamma": 10.0,
        "lowpass_cutoff": 0.15, "n_trials": 40, "tau_points": 16,
        "tau_over_gamma_min": 5.0, "tau_over_gamma_max": 500.0,
        "gains": [0.0, 2.0, 5.0, 10.0, 19.0, 38.0, 76.0], "seed": 20260809,
    },
}


def _fig2a_rows(p: dict, seed: int):
    params = _desk_oscillator(p["gamma"])
    grid = SimGrid(dt=p["dt"], n_samples=p["n_samples"])
    noise_cfg = NoiseConfig(thermal_force_psd=p["thermal_force_psd"],
                            measurement_noise_psd=p["measurement_noise_psd"])
    noise = generate_noise(noise_cfg, grid, seed)
    _, rec0 = simulate_open_loop(params, noise, grid)
    seg = p["segment_len"]

    rows = []
    spec0 = psd_welch(rec0, seg)
    rows.extend((w, s, 0.0, "open_loop") for w, s in zip(spec0.freqs, spec0.psd))
    for g in p["gains"]:
        filt = stationary_filter(params, cold_damping_kernel(g, params))
        spec = psd_welch(apply_filter(rec0, filt), seg)
        rows.extend((w, s, g, "filter") for w, s in zip(spec.freqs, spec.psd))

    g_in = p["inset_gain"]
    kern = cold_damping_kernel(g_in, params)
    rec_fb = simulate_closed_loop(params, noise, kern, grid).record
    rec_fl = apply_filter(rec0, stationary_filter(params, kern))
    report = verify_equivalence(rec_fb, rec_fl, psd_segment_len=seg)
    inset = [(w, pf, pf * (1.0 + d), d)
             for w, pf, d in zip(report.psd_spectrum.freqs, report.psd_spectrum.psd,
                                 report.psd_fractional_diff)]
    return rows, inset, report


def _fig2b_rows(p: dict, seed: int, threads: int):
    gamma = p["gamma"]
    params = _desk_oscillator(gamma)
    cfg = ScenarioConfig(
        scenario_id="fig2b", oscillator=params,
        grid=SimGrid(dt=p["dt"], n_samples=p["n_samples"]),
        noise=NoiseConfig(thermal_force_psd=p["thermal_force_psd"],
                          measurement_noise_psd=p["measurement_noise_psd"]),
        burn_in_time=p["burn_in_time"], seed=seed,
    )
    tau_list = [t / gamma for t in p["tau_over_gamma"]]
    stats = gain_sweep_stats(cfg, p["gains"], ["filter"], tau_list,
                             p["n_trials"], seed, threads)
    fb_gains = [g for g in p["feedback_gains"] if g in p["gains"]]
    if fb_gains:
        stats.update(gain_sweep_stats(cfg, fb_gains, ["feedback"], tau_list,
                                      p["n_trials"], seed, threads))
    rows = []
    for (mode, g), est_list in sorted(stats.items()):
        curve = sensitivity_curve_vs_tau(est_list, params, g)
        rows.extend((t, d, g, mode) for t, d in zip(curve.abscissa, curve.delta_f))
    return rows


def _fig2c_rows(p: dict, seed: int, threads: int):
    gamma = p["gamma"]
    params = _desk_oscillator(gamma)
    est = EstimationSettings(lowpass_cutoff=p["lowpass_cutoff"])
    cfg = ScenarioConfig(
        scenario_id="fig2c", oscillator=params,
        grid=SimGrid(dt=p["dt"], n_samples=p["n_samples"]),
        noise=NoiseConfig(thermal_force_psd=p["thermal_force_psd"],
                          measurement_noise_psd=p["measurement_noise_psd"]),
        burn_in_time=p["burn_in_time"], estimation=est, seed=seed,
    )
    tau = p["tau_over_gamma"] / gamma if isinstance(p["tau_over_gamma"], float) \
        else p["tau_over_gamma"][0] / gamma
    stats = gain_sweep_stats(cfg, p["gains"], ["filter"], [tau],
                             p["n_trials"], seed, threads)
    from .estimation import force_sensitivity
    rows = [(g, force_sensitivity(stats[("filter", g)][0], params, g), tau)
            for g in p["gains"]]
    return rows


def _fig3_config(p: dict, seed: int) -> ScenarioConfig:
    gamma = p["gamma"]
    params = _desk_oscillator(gamma)
    band = (params.omega_m, p["signal_halfwidth_over_gamma"] * gamma)
    sig_psd = calibrate_signal_psd(params, p["dt"], p["thermal_force_psd"], band,
                                   p["signal_fraction"])
    return ScenarioConfig(
        scenario_id="fig3", oscillator=params,
        grid=SimGrid(dt=p["dt"], n_samples=p["n_samples"]),
        noise=NoiseConfig(thermal_force_psd=p["thermal_force_psd"],
                          measurement_noise_psd=p["measurement_noise_psd"],
                          signal_force_psd=sig_psd, signal_band=band),
        burn_in_time=p["burn_in_time"],
        estimation=EstimationSettings(lowpass_cutoff=p["lowpass_cutoff"]),
        seed=seed,
    )


def _fig3_tau_list(p: dict) -> list[float]:
    gamma = p["gamma"]
    lo, hi = p["tau_over_gamma_min"] / gamma, p["tau_over_gamma_max"] / gamma
    return list(np.geomspace(lo, hi, p["tau_points"]))


def _fig3a_rows(p: dict, seed: int, threads: int):
    cfg = _fig3_config(p, seed)
    tau_list = _fig3_tau_list(p)
    _, thermal, with_sig = resolve_sweep(cfg, [0.0], tau_list, p["n_trials"],
                                         seed, threads)
    t_stats = thermal[("filter", 0.0)]
    s_stats = with_sig[("filter", 0.0)]
    norm = t_stats[-1].mean
    rows = []
    for st in t_stats:
        rows.append((st.tau, "thermal", st.mean, st.sigma, st.mean / norm))
    for st in s_stats:
        rows.append((st.tau, "signal", st.mean, st.sigma, st.mean / norm))
    return rows


def _fig3b_rows(p: dict, seed: int, threads: int):
    cfg = _fig3_config(p, seed)
    tau_list = _fig3_tau_list(p)
    results, _, _ = resolve_sweep(cfg, p["gains"], tau_list, p["n_trials"],
                                  seed, threads)
    return [(r.gain, r.tau_resolve, r.resolved) for r in results]


def emit_figure_data(which: str, out_dir: str | Path, seed: int | None = None,
                     n_trials: int | None = None, threads: int = 1,
                     overrides: dict | None = None) -> RunManifest:
    """Run one figure bundle and write its tidy CSV file(s)."""
    if which not in FIGURE_IDS:
        raise ConfigError(f"unknown figure id {which!r}; choose from {FIGURE_IDS}")
    p = _merge(FIGURE_DEFAULTS[which], overrides)
    if seed is not None:
        p["seed"] = int(seed)
    if n_trials is not None and "n_trials" in p:
        p["n_trials"] = int(n_trials)
    seed_val = int(p["seed"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    if which == "fig2a":
        rows, inset, report = _fig2a_rows(p, seed_val)
        main = out / "fig2a.csv"
        write_csv(main, ["omega_rad_s", "psd", "gain", "mode"], rows)
        ins = out / "fig2a_inset.csv"
        write_csv(ins, ["omega_rad_s", "psd_feedback", "psd_filtered",
                        "fractional_difference"], inset)
        outputs = [str(main), str(ins)]
        extras = {"inset_relative_l2_error": report.relative_l2_error}
    elif which == "fig2b":
        rows = _fig2b_rows(p, seed_val, threads)
        main = out / "fig2b.csv"
        write_csv(main, ["tau_s", "delta_f", "gain", "mode"], rows)
        outputs = [str(main)]
        extras = {}
    elif which == "fig2c":
        rows = _fig2c_rows(p, seed_val, threads)
        main = out / "fig2c.csv"
        write_csv(main, ["gain", "delta_f", "tau_s"], rows)
        outputs = [str(main)]
        extras = {"squash_threshold_gain": squash_threshold_gain(
            _desk_oscillator(p["gamma"]), p["thermal_force_psd"],
            p["measurement_noise_psd"])}
    elif which == "fig3a":
        rows = _fig3a_rows(p, seed_val, threads)
        main = out / "fig3a.csv"
        write_csv(main, ["tau_s", "scenario", "mean_energy", "sigma_energy",
                         "normalized_mean"], rows)
        outputs = [str(main)]
        extras = {}
    else:
        rows = _fig3b_rows(p, seed_val, threads)
        main = out / "fig3b.csv"
        write_csv(main, ["gain", "tau_resolve_s", "resolved"], rows)
        outputs = [str(main)]
        extras = {"squash_threshold_gain": squash_threshold_gain(
            _desk_oscillator(p["gamma"]), p["thermal_force_psd"],
            p["measurement_noise_psd"])}

    pseudo = ScenarioConfig(
        scenario_id=which,
        oscillator=_desk_oscillator(p["gamma"]),
        grid=SimGrid(dt=p["dt"], n_samples=p["n_samples"]),
        noise=NoiseConfig(thermal_force_psd=p["thermal_force_psd"],
                          measurement_noise_psd=p["measurement_noise_psd"]),
        seed=seed_val,
    )
    manifest = RunManifest(
        scenario_hash=hashlib.sha256(
            (json.dumps(p, sort_keys=True) + f"|v={__version__}").encode()).hexdigest(),
        seed=seed_val,
        code_version=__version__,
        created_utc=_time.strftime("%Y-%m-%dT%H:%M:%SZ", _time.gmtime()),
        outputs=tuple(outputs),
        config={"figure": which, "parameters": p,
                "scenario": config_to_dict(pseudo)},
        extras=extras,
    )
    manifest.write(out / f"{which}_manifest.json")
    return manifest
