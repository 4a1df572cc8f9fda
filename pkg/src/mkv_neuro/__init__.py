"""Two-dimensional spiking-neuron PDMP toolkit.

Simulation of the single-neuron jump process, its N-particle delayed
network and the mean-field limit; computation and certification of the
stationary structure (transition kernel, invariant densities, Lyapunov and
Doeblin certificates, the self-consistent current kappa(J)).
"""

from .model import (
    AdEx,
    CustomF,
    ExpRate,
    ModelSpec,
    Quartic,
    State,
    TabulatedRate,
    classify_current_regime,
    equilibria,
    eval_field,
    fig2_model,
    nullclines,
    reset,
)
from .dynamics import (
    LeftDomain,
    NoSeparatrix,
    Partition,
    RegionId,
    ToleranceConfig,
    Trajectory,
    build_partition,
    build_separatrix,
    classify,
    hitting_times,
    integrate,
    w_increment_bound,
)

__version__ = "0.1.0"
