"""Diffusion inversion on analytic data models: schedules, exact predictors,
DDIM dynamics, fixed-point and IFE inversion, error statistics and harness."""

from .analysis import StatsConfig, StatsReport, estimation_error, histogram, run_error_stats, theory_variance
from .config import ExperimentConfig, config_from_dict, parse_config
from .dynamics import (Trajectory, data_prediction, ddim_denoise, ddim_denoise_step, dump_trajectory,
                       forward_marginal_sample, load_trajectory, noise_from_data)
from .errors import (AlphaBoundary, ConfigError, DivergenceError, EtaSingular, GridDegenerate, InvalidParams,
                     InvlabError, NoConvergence, NonFiniteLatent, ShapeMismatch, UnknownMethod)
from .harness import emit_csv, mse, psnr, run_bench, run_roundtrip, run_stats
from .inversion import (InversionMethod, PredictionError, extract_prev_error, fixed_point_invert_step,
                        ife_estimate, ife_invert, ife_invert_step, initial_estimate, invert,
                        naive_ddim_invert_step, oracle_fixed_point, parse_method)
from .models import (ErrorModel, GaussianMixtureModel, GaussianPredictor, GMMPredictor, NoisePredictor,
                     PerturbedPredictor, PointMassPredictor, exact_eps_gaussian, exact_eps_gmm, nfe)
from .schedule import (NoiseSchedule, StepCoefficients, TimestepGrid, alpha_bar, build_schedule, make_grid,
                       step_coefficients)

__version__ = "0.1.0"
