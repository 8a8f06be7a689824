import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from coldfilter import (
    ConfigError,
    KernelMatrix,
    MeasurementRecord,
    NoiseConfig,
    OscillatorParams,
    SimGrid,
    apply_filter,
    apply_filter_fft,
    chi_impulse_response,
    cold_damping_kernel,
    discretize_kernels,
    fredholm_solve,
    generate_noise,
    invert_filter,
    nonstationary_schedule,
    simulate_closed_loop,
    simulate_open_loop,
    stationary_filter,
    stationary_taps_kernel,
    two_time_kernel,
    verify_equivalence,
)

from conftest import grid, rel_l2, thermal_cfg

RICH_NOISES = {
    "gaussian": NoiseConfig(thermal_force_psd=2.0, measurement_noise_psd=20.0),
    "heavy_tailed": NoiseConfig(thermal_force_psd=2.0, measurement_noise_psd=20.0,
                                noise_law="heavy_tailed", tail_df=4.0),
    "correlated": NoiseConfig(thermal_force_psd=2.0, measurement_noise_psd=20.0,
                              backaction_force_psd=0.8,
                              backaction_measurement_correlation=0.7),
}


# --- stationary filter --------------------------------------------------------

def test_identity_filter_bitwise(narrow_params):
    g = grid(1 << 14)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=1)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    filt = stationary_filter(narrow_params, cold_damping_kernel(0.0, narrow_params))
    out = apply_filter(rec0, filt)
    assert np.array_equal(out.samples, rec0.samples)


def test_freq_response_trivials(narrow_params):
    filt0 = stationary_filter(narrow_params, cold_damping_kernel(0.0, narrow_params))
    w = np.linspace(0.1, 3.0, 50)
    assert np.allclose(filt0.freq_response(w), 1.0)
    filt1 = stationary_filter(narrow_params, cold_damping_kernel(1.0, narrow_params))
    # on resonance h = gamma/gamma' = 1/2
    assert filt1.freq_response(narrow_params.omega_m) == pytest.approx(0.5 + 0.0j)


def test_stationary_filter_rejects_nonstationary(narrow_params):
    g = grid(64)
    sched = nonstationary_schedule(np.zeros(64), narrow_params, g)
    with pytest.raises(ConfigError):
        stationary_filter(narrow_params, sched)


@pytest.mark.parametrize("law", sorted(RICH_NOISES))
@pytest.mark.parametrize("g_f", [0.5, 1.0, 2.0, 8.0, 34.0, 72.0, 150.0])
def test_central_equivalence_paired(narrow_params, g_f, law):
    # the core claim: filtering the feedback-free record reproduces the
    # closed-loop record sample for sample, for any noise statistics
    g = grid(1 << 18)
    noise = generate_noise(RICH_NOISES[law], g, seed=hash((law, g_f)) % (1 << 31))
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    kern = cold_damping_kernel(g_f, narrow_params)
    res = simulate_closed_loop(narrow_params, noise, kern, g)
    rec_f = apply_filter(rec0, stationary_filter(narrow_params, kern))
    rep = verify_equivalence(res.record, rec_f)
    assert rep.relative_l2_error <= 1e-8


def test_truncated_input_causality(narrow_params):
    g = grid(4096)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=2)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    filt = stationary_filter(narrow_params, cold_damping_kernel(3.0, narrow_params))
    full = apply_filter(rec0, filt)
    k = 1500
    clipped = np.array(rec0.samples)
    clipped[k:] = 123.0
    rec_clip = MeasurementRecord(samples=clipped, grid=g, seed=rec0.seed)
    out = apply_filter(rec_clip, filt)
    assert np.array_equal(out.samples[:k], full.samples[:k])


def test_taps_kernel_equivalence(desk_params):
    g = grid(1 << 15)
    rng = np.random.default_rng(3)
    taps = 0.01 * rng.standard_normal(6)
    kern = stationary_taps_kernel(taps, g.dt)
    noise = generate_noise(thermal_cfg(1.0, measurement_noise_psd=1.0), g, seed=4)
    _, rec0 = simulate_open_loop(desk_params, noise, g)
    res = simulate_closed_loop(desk_params, noise, kern, g)
    rec_f = apply_filter(rec0, stationary_filter(desk_params, kern))
    assert rel_l2(rec_f.samples, res.record.samples) <= 1e-8


def test_delayed_kernel_equivalence(narrow_params):
    g = grid(1 << 16)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=5)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    kern = cold_damping_kernel(6.0, narrow_params, delay_steps=3)
    res = simulate_closed_loop(narrow_params, noise, kern, g)
    rec_f = apply_filter(rec0, stationary_filter(narrow_params, kern))
    assert rel_l2(rec_f.samples, res.record.samples) <= 1e-8


def test_inverse_filter_roundtrip(narrow_params):
    g = grid(1 << 17)
    noise = generate_noise(RICH_NOISES["correlated"], g, seed=6)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    for g_f in (1.0, 34.0):
        filt = stationary_filter(narrow_params, cold_damping_kernel(g_f, narrow_params))
        fwd = apply_filter(rec0, filt)
        back = apply_filter(fwd, invert_filter(filt))
        assert rel_l2(back.samples, rec0.samples) <= 1e-8


def test_fft_crosscheck_interior(narrow_params):
    g = grid(1 << 17)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=7)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    filt = stationary_filter(narrow_params, cold_damping_kernel(8.0, narrow_params))
    a = apply_filter(rec0, filt)
    b = apply_filter_fft(rec0, filt)
    n = g.n_samples
    sl = slice(n // 10, (9 * n) // 10)
    assert rel_l2(b.samples[sl], a.samples[sl]) <= 1e-3


# --- kernel discretization ----------------------------------------------------

def test_discretize_zero_kernel(narrow_params):
    g = grid(128)
    km = discretize_kernels(np.zeros((128, 128)), None, narrow_params, g)
    assert km.h_act is None
    assert np.all(km.h_m == 0.0)


def test_discretize_stationary_is_toeplitz(desk_params):
    # oracle: independent expm-based impulse response and direct convolution
    n = 160
    g = grid(n)
    taps = np.array([0.04, -0.01, 0.02])
    km = discretize_kernels(None, stationary_taps_kernel(taps, g.dt), desk_params, g)
    h = km.h_act
    km.validate_causality()
    # Toeplitz structure
    for d in range(1, 5):
        diag = np.diagonal(h, -d)
        assert np.all(diag == diag[0])
    a_mat = np.array([[0.0, 1.0],
                      [-desk_params.omega_m**2, -desk_params.gamma]])
    ad = scipy.linalg.expm(a_mat * g.dt)
    bd = np.linalg.solve(a_mat, (ad - np.eye(2))) @ np.array([0.0, 1.0 / desk_params.mass])
    chi_d = np.zeros(n)
    state = bd
    for j in range(1, n):
        chi_d[j] = state[0]
        state = ad @ state
    expected = np.convolve(chi_d, taps)[:n]
    assert np.allclose(h[:, 0], expected, rtol=0, atol=1e-13)


def test_chi_impulse_response_matches_expm(desk_params):
    n = 200
    h = chi_impulse_response(desk_params, 0.1, n)
    a_mat = np.array([[0.0, 1.0],
                      [-desk_params.omega_m**2, -desk_params.gamma]])
    ad = scipy.linalg.expm(a_mat * 0.1)
    bd = np.linalg.solve(a_mat, (ad - np.eye(2))) @ np.array([0.0, 1.0 / desk_params.mass])
    ref = np.zeros(n)
    state = bd
    for j in range(1, n):
        ref[j] = state[0]
        state = ad @ state
    assert np.allclose(h, ref, rtol=0, atol=1e-13)


def test_discretize_rejects_acausal(narrow_params):
    g = grid(64)
    bad = np.zeros((64, 64))
    bad[3, 9] = 1.0
    with pytest.raises(ConfigError):
        discretize_kernels(None, bad, narrow_params, g)


def test_constant_schedule_fredholm_equals_stationary(narrow_params):
    g = grid(1 << 12)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=8)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    sched = nonstationary_schedule(np.full(g.n_samples, 3.0), narrow_params, g)
    km = discretize_kernels(None, sched, narrow_params, g)
    out_fred = fredholm_solve(km, rec0)
    out_stat = apply_filter(rec0, stationary_filter(
        narrow_params, cold_damping_kernel(3.0, narrow_params)))
    assert rel_l2(out_fred.samples, out_stat.samples) <= 1e-10


# --- Fredholm solve -----------------------------------------------------------

def _random_strict_lower(n, rng, scale):
    m = rng.standard_normal((n, n)) * scale
    return np.tril(m, k=-1)


def test_fredholm_identity_when_kernels_vanish(narrow_params):
    g = grid(512)
    noise = generate_noise(thermal_cfg(2.0), g, seed=9)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    km = KernelMatrix(h_m=None, h_act=None, grid=g)
    out = fredholm_solve(km, rec0)
    assert np.array_equal(out.samples, rec0.samples)


def test_fredholm_hm_only_is_identity_map(narrow_params):
    # [I - H_m]^(-1) [I - H_m] x = x
    n = 512
    g = grid(n)
    rng = np.random.default_rng(10)
    h_m = _random_strict_lower(n, rng, 0.3 / n)
    noise = generate_noise(thermal_cfg(2.0), g, seed=11)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    km = KernelMatrix(h_m=h_m, h_act=None, grid=g)
    out = fredholm_solve(km, rec0)
    assert rel_l2(out.samples, rec0.samples) <= 1e-12


@pytest.mark.parametrize("n", [256, 512])
def test_fredholm_matches_dense_solver(n):
    # oracle: dense LU solve of the full system
    rng = np.random.default_rng(n)
    h_m = _random_strict_lower(n, rng, 1.0 / n)
    h_act = _random_strict_lower(n, rng, 1.0 / n)
    g = grid(n)
    x0 = rng.standard_normal(n)
    rec0 = MeasurementRecord(samples=x0, grid=g, seed=0)
    km = KernelMatrix(h_m=h_m, h_act=h_act, grid=g)
    ours = fredholm_solve(km, rec0, block=64)
    a_full = np.eye(n) - (h_m + h_act)
    rhs = (np.eye(n) - h_m) @ x0
    ref = np.linalg.solve(a_full, rhs)
    assert np.max(np.abs(ours.samples - ref)) <= 1e-10


def test_fredholm_rejects_nonzero_diagonal():
    n = 64
    g = grid(n)
    h = np.tril(np.ones((n, n)) * 0.01, k=0)  # nonzero diagonal
    rec0 = MeasurementRecord(samples=np.ones(n), grid=g, seed=0)
    with pytest.raises(np.linalg.LinAlgError):
        fredholm_solve(KernelMatrix(h_m=None, h_act=h, grid=g), rec0)


@pytest.mark.parametrize("kind", ["step", "ramp"])
def test_fredholm_matches_nonstationary_simulation(narrow_params, kind):
    g = grid(1 << 12)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=12)
    t = g.times()
    if kind == "step":
        gains = np.where(t < t[g.n_samples // 2], 0.0, 5.0)
    else:
        gains = np.linspace(0.0, 8.0, g.n_samples)
    sched = nonstationary_schedule(gains, narrow_params, g)
    res = simulate_closed_loop(narrow_params, noise, sched, g)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    km = discretize_kernels(None, sched, narrow_params, g)
    out = fredholm_solve(km, rec0)
    assert rel_l2(out.samples, res.record.samples) <= 1e-8


def test_fredholm_with_intrinsic_modification(desk_params):
    # physical check of the H_m path: with zero measurement noise a kernel on
    # the record is a kernel on the true position, so a run with g_m + g_act
    # versus a run with g_m alone must satisfy the two-kernel Fredholm relation
    g = grid(1 << 11)
    noise = generate_noise(thermal_cfg(1.0), g, seed=13)  # no measurement noise
    taps_m = np.array([0.02, -0.01])
    taps_act = np.array([-0.03, 0.015])
    kern_m = stationary_taps_kernel(taps_m, g.dt)
    kern_both = stationary_taps_kernel(taps_m + taps_act, g.dt)
    rec_with = simulate_closed_loop(desk_params, noise, kern_both, g).record
    rec_without = simulate_closed_loop(desk_params, noise, kern_m, g).record
    km = discretize_kernels(kern_m, stationary_taps_kernel(taps_act, g.dt),
                            desk_params, g)
    out = fredholm_solve(km, rec_without)
    assert rel_l2(out.samples, rec_with.samples) <= 1e-10


def test_fredholm_two_time_matrix_path(desk_params):
    # arbitrary causal two-time actuation kernel, simulation as oracle
    n = 256
    g = grid(n)
    rng = np.random.default_rng(14)
    gmat = np.tril(rng.standard_normal((n, n)) * 0.002)
    kern = two_time_kernel(gmat, g.dt)
    noise = generate_noise(thermal_cfg(1.0, measurement_noise_psd=0.5), g, seed=15)
    res = simulate_closed_loop(desk_params, noise, kern, g)
    _, rec0 = simulate_open_loop(desk_params, noise, g)
    km = discretize_kernels(None, kern, desk_params, g)
    out = fredholm_solve(km, rec0)
    assert rel_l2(out.samples, res.record.samples) <= 1e-10


# --- equivalence report -------------------------------------------------------

def test_verify_equivalence_identical_is_zero(narrow_params):
    g = grid(2048)
    noise = generate_noise(thermal_cfg(2.0), g, seed=16)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    rep = verify_equivalence(rec0, replace(rec0))
    assert rep.relative_l2_error == 0.0
    assert rep.max_abs_error == 0.0


def test_verify_equivalence_unpaired_seeds_fail(narrow_params):
    # the equivalence is per-realization: independently seeded runs differ
    g = grid(1 << 15)
    kern = cold_damping_kernel(1.0, narrow_params)
    noise_a = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=17)
    noise_b = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=18)
    res = simulate_closed_loop(narrow_params, noise_a, kern, g)
    _, rec0_b = simulate_open_loop(narrow_params, noise_b, g)
    rec_f = apply_filter(rec0_b, stationary_filter(narrow_params, kern))
    rep = verify_equivalence(res.record, rec_f)
    assert rep.relative_l2_error > 0.1


def test_verify_equivalence_psd_fraction(narrow_params):
    g = grid(1 << 16)
    noise = generate_noise(thermal_cfg(2.0, measurement_noise_psd=5.0), g, seed=19)
    _, rec0 = simulate_open_loop(narrow_params, noise, g)
    kern = cold_damping_kernel(1.0, narrow_params)
    res = simulate_closed_loop(narrow_params, noise, kern, g)
    rec_f = apply_filter(rec0, stationary_filter(narrow_params, kern))
    rep = verify_equivalence(res.record, rec_f, psd_segment_len=1 << 12)
    assert rep.psd_fractional_diff is not None
    assert np.max(np.abs(rep.psd_fractional_diff)) < 1e-6


def test_verify_equivalence_grid_mismatch(narrow_params):
    a = MeasurementRecord(samples=np.zeros(64), grid=grid(64), seed=0)
    b = MeasurementRecord(samples=np.zeros(128), grid=grid(128), seed=0)
    from coldfilter import GridMismatchError
    with pytest.raises(GridMismatchError):
        verify_equivalence(a, b)
