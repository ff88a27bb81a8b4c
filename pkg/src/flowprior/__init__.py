"""Normalizing-flow priors for denoising and compressed sensing."""

from .degrade import (DiagGauss, FlowNoise, ForwardOperator, IsoGauss, NoiseModel, apply_forward,
                      forward_vjp, gaussian_matrix, identity_op, linear_op, make_observation, radial_sigma,
                      scale_op, sign_op, sinusoidal_sigma)
from .flow import (CouplingLayer, FlowModel, checkpoint_load, checkpoint_save, flow_grad_logprob_x,
                   flow_grad_z, flow_log_prob, flow_param_grad, flow_sample)
from .numkit import AdamState, FormatError, InvalidArgument, NumericError, make_rng, psnr
from .solve import SolveConfig, SolveReport, solve
from .training import Dataset, TrainConfig, synth_dataset, train_flow

__version__ = "0.1.0"
