"""perturbwalk: random walks driven by kinetically constrained environments.

Exact finite-volume computation of perturbed stationary measures, walker
velocity and diffusivity with certified error bounds, together with a
coupled Monte Carlo simulator sharing one source of randomness between
the unperturbed and perturbed walkers.
"""

from .env_models import (
    EnvModel,
    JumpDrift,
    LatticeTorus,
    RateSpec,
    SpinConfig,
    beta_norm,
    canonical_displacements,
    decoupled_walk,
    driven_probe,
    env_transitions,
    interface_walk,
    jump_observable,
    moment_sum,
    rate_eval,
    window_offsets,
)
from .coupling_sim import (
    CoupledPath,
    CouplingLayout,
    EnvTrajectory,
    ReplicaStreams,
    build_layout,
    env_seen_by_walker,
    replica_streams,
    simulate_coupled,
    simulate_env,
)
from .errors import (
    AssumptionViolation,
    CheckFailure,
    ConfigError,
    GeometryError,
    InvalidRatesError,
    PerturbwalkError,
    StateCapError,
    UnsupportedModelError,
)
from .oracle import (
    BoundsReport,
    CheckRecord,
    DecayProfile,
    ExpansionReport,
    GapReport,
    GeneratorSet,
    LocalFunction,
    StateSpace,
    StationaryReport,
    VelocityReport,
    build_generators,
    decay_profile,
    density_expansion,
    diffusion_exact,
    diffusion_variational,
    dyson_bounds_check,
    l2_operator_norm,
    semigroup_bounds_check,
    spectral_gap,
    stationary_solve,
    velocity,
)
from .estimators import (
    MCReport,
    estimate_diffusion,
    estimate_occupation,
    estimate_velocity,
    estimate_velocity_mart,
    fclt_diagnostics,
    run_replicas,
)

__version__ = "0.1.0"
