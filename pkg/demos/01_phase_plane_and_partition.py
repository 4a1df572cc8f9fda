"""Phase-plane tour: vector field, nullclines, separatrix, partition.

Builds the canonical model (F(v) = e^v - 5v - 2, v_r = 1, w_b = 2.5,
lambda(v) = e^{v+2}), constructs its partition, classifies a few states,
follows one trajectory through blow-up, and writes the separatrix polyline
and the trajectory to CSV.
"""

import numpy as np

from mkv_neuro import (RegionId, State, build_partition, classify,
                       classify_current_regime, equilibria, eval_field,
                       fig2_model, integrate, nullclines)
from mkv_neuro.io_utils import write_csv

model = fig2_model()
print("current regime:", classify_current_regime(model))
print("equilibria:", [round(v, 4) for v in equilibria(model)])

part = build_partition(model)
print(f"partition: w* = {part.w_star:.4f}, w23 = v34 = {part.w23:.4f}")

for s in [State(1.0, 8.0), State(0.0, 2.0), State(6.0, 2.0),
          State(-4.0, -4.0)]:
    dv, dw = eval_field(model, s)
    print(f"  state {tuple(round(x, 2) for x in s)} -> "
          f"{classify(model, part, s).value:10s} field=({dv:+.3f}, {dw:+.3f})")

print("nullcline roots at w = 2:", nullclines(model, 2.0))

trapped = integrate(model, part, State(1.0, 8.0), t_span=(0.0, 30.0))
print(f"trapped trajectory: {trapped.t.size} nodes, blow-up = "
      f"{trapped.blow_up}, events "
      f"{[(round(t, 4), r.value) for t, r in trapped.exit_events]}")

traj = integrate(model, part, State(5.0, 2.0), t_span=(0.0, 30.0))
print(f"explosive trajectory: blow-up at t = {traj.blow_up:.6f}, "
      f"final w = {traj.w[-1]:.4f} (finite at explosion)")

write_csv("out/separatrix.csv", "v,w", zip(part.sep_v, part.sep_w))
write_csv("out/trajectory.csv", "t,v,w,region",
          ((traj.t[i], traj.v[i], traj.w[i], traj.region[i].value)
           for i in range(traj.t.size)))
print("wrote out/separatrix.csv, out/trajectory.csv")
