"""Score-distillation gradient estimators on analytic Gaussian-mixture priors."""

from .ddim import (FULL, ZERO, Residual, SigmaMode, cfg_combine, ddim_step, invariant_term, predict_x0,
                   residual_term, sample_chain, timestep_ladder)
from .distillation import (Estimator, GradientTerms, cfg_only_grad, isd_grad, nfsd_grad, recon_only_grad,
                           sds_grad, vsd_approx_grad)
from .mlp import MlpDenoiser, init_denoiser, load_denoiser, save_denoiser, train_denoiser
from .models import EpsilonModel
from .optimize import (AdamState, DivergenceError, Problem, RunTrace, adam_update, cosine_trace, distill,
                       grad_variance, mode_excess, restore_experiment)
from .prior import (ConditionalPrior, MixtureComponent, OracleModel, epsilon_oracle, log_density,
                    noised_log_density, sample_prior, single_gaussian, two_condition_2d)
from .renderer import PoseSet, make_poses, prior_from_scene, render, scene_library, vjp
from .schedule import (NoiseSchedule, NoisyState, TimestepPolicy, build_schedule, earlier_timestep,
                       forward_noise, lambda_weight, loss_weight, sample_timestep)

__version__ = "0.1.0"
