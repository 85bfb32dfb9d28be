"""Cox processes driven by SDE intensities: simulation, amortized variational
inference, and MCMC/EM baselines."""

__version__ = "0.1.0"

from .sde import (
    EPS_POS, TimeGrid, BrownianPath, SdeSpec, Trajectory, AugmentedTrajectory,
    sample_brownian, euler_maruyama, simulate_posterior, simulate_augmented,
    cir_spec, linear_ramp_spec, SqrtDiffusion, ConstantDiffusion, make_diffusion,
)
from .events import (
    EventSequence, BinnedCounts, sample_cox, poisson_loglik, bin_counts,
    dispersion_curve,
)
from .nets import (
    Mlp, DriftNet, DeepSetsEncoder, AdamState, mlp_eval_with_grads,
    encoder_eval, adam_step,
)
from .model import IntensityModel
from .elbo import (
    ElboEstimate, TrainConfig, estimate_elbo, estimate_gradients,
    elbo_and_gradients, train,
)
