"""Stationary structure of the single neuron.

Builds the transition kernel on a w-grid, finds the invariant post-jump
density by power iteration, cross-checks it against a long embedded chain,
lifts it to the (v, w) plane, and verifies the firing-rate identity
mu_inv(lambda) * E T1 = 1.
"""

import numpy as np

from mkv_neuro import State, build_partition, fig2_model
from mkv_neuro.io_utils import write_csv, grid_measure_rows, lift_rows
from mkv_neuro.pdmp import simulate_embedded_chain
from mkv_neuro.stationary import (build_kernel, choose_w_max, expected_t1,
                                  invariant_density, lift_to_plane,
                                  mean_jump_time)

model = fig2_model()
part = build_partition(model)

w_max = choose_w_max(model, part)
print(f"grid truncation from the pilot drift pass: w_max = {w_max:.2f}")

kernel = build_kernel(model, part, n_w=900, w_max=w_max)
print(f"kernel: {kernel.rows.shape[0]} rows, worst row defect "
      f"{np.abs(kernel.rows.sum(axis=1) + kernel.leak_low + kernel.leak_high - 1).max():.2e}")

mu = invariant_density(kernel)
e_t1 = expected_t1(model, kernel, mu)
print(f"invariant density: mean w = {mu.mean(mu.w):.4f}, "
      f"E T1 = {e_t1:.5f}, stationary rate = {1/e_t1:.4f}")

rec = simulate_embedded_chain(model, part, 6.0, 100_000, rng=(7, "demo", 0))
hist = np.histogram(rec.w[1000:], bins=kernel.edges)[0] / (rec.w.size - 1000)
print(f"L1 distance to a 1e5-step chain histogram: "
      f"{np.abs(hist - mu.masses).sum():.4f}")

print(f"mean jump time at w0 = 6: {mean_jump_time(model, part, 6.0):.5f}")

lift = lift_to_plane(model, part, mu, (-7.0, 8.0, 201, -10.0, 30.0, 261))
dv, dw = lift["cell"]
lam = np.asarray(model.lam(lift["v"]))[:, None]
identity = float((lift["density"] * lam).sum() * dv * dw) * lift["E_T1"]
print(f"firing-rate identity mu_inv(lambda) * E T1 = {identity:.4f}")

write_csv("out/density.csv", "w,p", grid_measure_rows(mu))
write_csv("out/lift.csv", "v,w,density", lift_rows(lift))
print("wrote out/density.csv, out/lift.csv")
