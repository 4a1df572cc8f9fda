"""First-jump sampling three ways.

Draws spike times from one state with the production time-change sampler
and the thinning oracle, compares both against the survival function, and
emits the sampler diagnostic CSV.
"""

import numpy as np

from mkv_neuro import State, build_partition, fig2_model
from mkv_neuro.hazard import (sample_batch, sample_first_jump,
                              sample_first_jump_thinning, survival)
from mkv_neuro.io_utils import write_csv

model = fig2_model()
part = build_partition(model)
x = State(model.v_r, 6.0)

one = sample_first_jump(model, part, x, rng=(2024, "demo", 0))
print(f"one jump: T1 = {one.T1:.4f}, pre = {tuple(one.pre_state)}, "
      f"post = {tuple(one.post_state)}, E = {one.exp_draw:.4f}")

n = 20_000
batch = sample_batch(model, [x], n, seed=2024, tag="demo/batch")
print(f"{n} draws: mean T1 = {batch['T1'].mean():.4f}, "
      f"max pre-jump w = {batch['w_pre'].max():.3f}")

for q in (0.25, 0.5, 0.75):
    t_q = float(np.quantile(batch["T1"], 1.0 - q))
    s = survival(model, part, x, t=t_q)["S"]
    print(f"  empirical {1-q:.0%} quantile {t_q:.4f}: survival there "
          f"= {s:.3f} (target {q:.2f})")

fj, diag = sample_first_jump_thinning(model, part, x,
                                      rng=(2024, "demo/thin", 0))
print(f"thinning oracle: T1 = {fj.T1:.4f}, acceptance fraction "
      f"= {diag['acceptance_fraction']:.3f}")

write_csv("out/samples.csv", "sample_id,T1,v_pre,w_pre,exp_draw",
          ((i, batch["T1"][i], batch["v_pre"][i], batch["w_pre"][i],
            batch["exp_draw"][i]) for i in range(200)))
print("wrote out/samples.csv")
