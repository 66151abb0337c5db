"""Optimal-transport denoisers for latent-variable models."""

from .errors import *  # noqa: F401,F403
from .measures import (DiscreteMeasure, TransportPlan, empirical_measure,
                       pushforward, second_moment)
from .ot import (OTConfig, barycentric_projection, c_transform_extend,
                 solve_monotone_1d, solve_ot, w2_squared)
from .likelihood import (GaussianLocation, GaussianPrior, GaussianScale, GenerativeSpec,
                         UniformScale, normal_exp_family, sample_joint, stream_rng)
from .posterior import (PosteriorMeanEstimator, posterior_mean_discrete,
                        posterior_mean_gaussian, tweedie_estimate)
from .npmle import NpmleConfig, NpmleResult, loglik, npmle_fit
from .denoiser import (DenoiserMap, build_ot_denoiser, gaussian_closed_form_denoiser,
                       interpolate_denoiser, latent_penalty_minimizer, quantile_denoiser_1d,
                       solve_latent_relaxation)
from .observable import (RelaxationInstance, gradient_E_tau, objective_E_tau,
                         solve_relaxation, tau_sweep_convergence)
from .risk import RiskReport, closed_form_risks, mc_risk, risk_curve

__version__ = "0.1.0"
