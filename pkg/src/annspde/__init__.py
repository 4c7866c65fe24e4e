"""Monte Carlo simulator and verification harness for a coupled annihilating
two-population stochastic heat equation with Holder-continuous noise
coefficient, its dominating single equations, scalar diffusion oracles, and
the exponential-duality check."""

from .lattice import (
    GridSpec,
    LatticeField,
    gaussian_kernel,
    heat_step,
    kernel_J,
    make_grid,
    mass,
)
from .noise import NoiseStream, derive_streams, noise_field
from .schedule import ImmigrationSchedule, make_schedule
from .spde import SpdeConfig, step_plain, step_signed, simulate_dominating, mild_residual
from .engine import Mode, TrackerOptions, TrackerState, beta_of, bar_delta_of
from .dual import (
    ClusterState,
    DualSystemState,
    init_system,
    run_replicate,
    sample_conditioned,
    step_hard,
    step_soft,
    update_trackers,
)
from .scalar import (
    DiffusionSpec,
    extinction_tail_check,
    feller_extinction_prob,
    martingale_hit_prob,
    scale_hitting_prob,
    simulate_path,
)
from .duality import LogLaplaceProblem, duality_gap, solve_log_laplace
from .statistics import (
    EstimateReport,
    bernoulli_estimate,
    ks_statistic,
    moment_sup_estimate,
)

__version__ = "0.1.0"
