"""Dev scratch: verify the discrete feedback/filter equivalence precision."""
import time
import numpy as np

from coldfilter.oscillator import (
    OscillatorParams, SimGrid, NoiseConfig, generate_noise, simulate_open_loop,
    white_force_displacement_variance,
)
from coldfilter.feedback import cold_damping_kernel, nonstationary_schedule, simulate_closed_loop
from coldfilter.equivfilter import (
    stationary_filter, apply_filter, invert_filter, discretize_kernels,
    fredholm_solve, verify_equivalence, apply_filter_fft,
)

params = OscillatorParams(mass=1.0, gamma=1e-3, omega_m=1.0)
grid = SimGrid(dt=0.1, n_samples=2**20)
cfg = NoiseConfig(thermal_force_psd=2.0, measurement_noise_psd=20.0,
                  backaction_force_psd=0.5, backaction_measurement_correlation=0.6)

t0 = time.time()
noise = generate_noise(cfg, grid, seed=42)
print(f"noise gen: {time.time()-t0:.2f}s")

t0 = time.time()
traj0, rec0 = simulate_open_loop(params, noise, grid)
print(f"open loop (incl jit): {time.time()-t0:.2f}s")

print("thermal-ish var(x):", np.var(traj0.x[10**5:]),
      "predict:", white_force_displacement_variance(params, 2.5))

for g in (0.5, 1.0, 8.0, 150.0):
    t0 = time.time()
    kern = cold_damping_kernel(g, params)
    res = simulate_closed_loop(params, noise, kern, grid)
    t1 = time.time()
    filt = stationary_filter(params, kern)
    recf = apply_filter(rec0, filt)
    t2 = time.time()
    rep = verify_equivalence(res.record, recf)
    # inverse roundtrip
    back = apply_filter(recf, invert_filter(filt))
    inv_rel = np.linalg.norm(back.samples - rec0.samples) / np.linalg.norm(rec0.samples)
    print(f"g={g:>6}: rel_l2={rep.relative_l2_error:.3e} maxabs={rep.max_abs_error:.3e} "
          f"inv={inv_rel:.3e}  sim {t1-t0:.2f}s filt {t2-t1:.2f}s")

# delayed kernel
kern = cold_damping_kernel(5.0, params, delay_steps=3)
res = simulate_closed_loop(params, noise, kern, grid)
recf = apply_filter(rec0, stationary_filter(params, kern))
print("delay=3 rel:", verify_equivalence(res.record, recf).relative_l2_error)

# FFT crosscheck interior
filt = stationary_filter(params, cold_damping_kernel(8.0, params))
ra = apply_filter(rec0, filt)
rb = apply_filter_fft(rec0, filt)
n = grid.n_samples
sl = slice(n // 10, 9 * n // 10)
print("fft interior rel:", np.linalg.norm(rb.samples[sl] - ra.samples[sl]) / np.linalg.norm(ra.samples[sl]))

# nonstationary: ramp 0 -> 8 on a 2^14 grid
g2 = SimGrid(dt=0.1, n_samples=2**14)
n2 = generate_noise(cfg, g2, seed=7)
ramp = np.linspace(0.0, 8.0, g2.n_samples)
sched = nonstationary_schedule(ramp, params, g2)
t0 = time.time()
res2 = simulate_closed_loop(params, n2, sched, g2)
_, rec02 = simulate_open_loop(params, n2, g2)
km = discretize_kernels(None, sched, params, g2)
t1 = time.time()
sol = fredholm_solve(km, rec02)
t2 = time.time()
rep2 = verify_equivalence(res2.record, sol)
print(f"fredholm ramp rel={rep2.relative_l2_error:.3e}  build {t1-t0:.2f}s solve {t2-t1:.2f}s")

# constant schedule == stationary filter cross-path
const = nonstationary_schedule(np.full(g2.n_samples, 3.0), params, g2)
km2 = discretize_kernels(None, const, params, g2)
sol2 = fredholm_solve(km2, rec02)
recf2 = apply_filter(rec02, stationary_filter(params, cold_damping_kernel(3.0, params)))
print("const-schedule fredholm vs stationary:",
      np.linalg.norm(sol2.samples - recf2.samples) / np.linalg.norm(recf2.samples))
