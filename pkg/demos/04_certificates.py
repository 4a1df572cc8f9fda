"""Ergodicity certificates: Lyapunov drift, Doeblin minorization, empirical
total-variation decay, and the tail exponent of the invariant density."""

import json

import numpy as np

from mkv_neuro import build_partition, fig2_model
from mkv_neuro.io_utils import write_json
from mkv_neuro.stationary import (build_kernel, estimate_doeblin,
                                  invariant_density, tail_exponent, tv_decay,
                                  verify_lyapunov)

model = fig2_model()
part = build_partition(model)
kernel = build_kernel(model, part, n_w=700, w_max=part.w_star + 90.0)
mu = invariant_density(kernel)

lyap = verify_lyapunov(model, part, kernel, np.geomspace(1e-3, 1.0, 20))
print(f"Lyapunov: pass={lyap.verdict}, r={lyap.parameters['r']:.4f}, "
      f"gamma_L={lyap.parameters['gamma_L']:.4f}, "
      f"K_L={lyap.parameters['K_L']:.3f}")

doeb = estimate_doeblin(model, part, kernel, k_range=[1, 2, 3, 4, 6, 8])
print(f"Doeblin: pass={doeb.verdict}, k_D={doeb.parameters['k_D']}, "
      f"beta_D={doeb.parameters['beta_D']:.3e}")
for row in doeb.evidence["beta"]:
    print(f"   k={row['k']}: beta_global={row['beta_global']:.3e} "
          f"beta_restricted={row['beta_restricted']:.3e}")

tail = tail_exponent(mu)
print(f"tail exponent: slope={tail.parameters['slope']:.4f}, "
      f"R^2={tail.parameters['r_squared']:.4f}")

tv = tv_decay(model, part, (part.w_star + 0.5, part.w_star + 30.0),
              n_steps=20, n_paths=20_000, seed=99)
print(f"TV decay: pass={tv.verdict}, ratio={tv.parameters['ratio']:.4f}, "
      f"ci95={tuple(round(c, 4) for c in tv.parameters['ci95'])}")

write_json("out/certificates.json",
           [c.to_doc() for c in (lyap, doeb, tail, tv)])
print("wrote out/certificates.json")
