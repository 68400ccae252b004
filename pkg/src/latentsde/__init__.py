"""Latent SDE identification.

Simulate SDEs, embed them in high-dimensional observations, train an
Euler-Maruyama VAE on observation pairs and score recovery up to isometry.
"""
__version__ = "0.1.0"

from .errors import (DegenerateDataError, InvalidInputError, InversionError, LatentSdeError,  # noqa: E402
                     NotFoundError, TrainingDivergedError)
from .sde import CATALOG_NAMES, SdeSpec, Trajectory, catalog, simulate, uniform_times  # noqa: E402
from .lamperti import LampertiMap, build_map, check_reducible  # noqa: E402
from .datasets import AmbientMap, NoiseSpec, PairedDataset, generate, make_ambient_map  # noqa: E402
from .nn import AdamState, Mlp, adam_step, backward, forward, init_mlp  # noqa: E402
from .vae import (LossBreakdown, TrainConfig, VaeModel, build_model, encode, encode_mean,  # noqa: E402
                  generate_pairs, loss, train)
from .evaluation import (MetricsReport, crlb, diffusion_diag_report, evaluate_model,  # noqa: E402
                         latent_mse, linear_loglik, procrustes, select_linear_dimension)
from .config import ExperimentConfig  # noqa: E402
from .pipeline import dimsearch, run_experiment  # noqa: E402

__all__ = [
    "AdamState", "AmbientMap", "CATALOG_NAMES", "DegenerateDataError", "ExperimentConfig",
    "InvalidInputError", "InversionError", "LampertiMap", "LatentSdeError", "LossBreakdown",
    "MetricsReport", "Mlp", "NoiseSpec", "NotFoundError", "PairedDataset", "SdeSpec",
    "TrainConfig", "TrainingDivergedError", "Trajectory", "VaeModel", "adam_step", "backward",
    "build_map", "build_model", "catalog", "check_reducible", "crlb", "diffusion_diag_report",
    "dimsearch", "encode", "encode_mean", "evaluate_model", "forward", "generate",
    "generate_pairs", "init_mlp", "latent_mse", "linear_loglik", "loss", "make_ambient_map",
    "procrustes", "run_experiment", "select_linear_dimension", "simulate", "train",
    "uniform_times",
]
