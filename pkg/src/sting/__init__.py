"""Adversarial multivariate time-series imputation with attention and bidirectional GRUs."""

from sting.config import ExperimentConfig, load_config
from sting.data import RawSeries, TimeSeriesWindow, load_csv, make_windows
from sting.discriminator import Discriminator
from sting.generator import Generator
from sting.inference import impute, impute_windows, search_noise
from sting.kernels import BACKEND as KERNEL_BACKEND
from sting.synthetic import corrupt_mcar, gen_sinusoid_mix
from sting.training import fit, load_state, save_state

__version__ = "0.1.0"

__all__ = [
    "Discriminator",
    "ExperimentConfig",
    "Generator",
    "KERNEL_BACKEND",
    "RawSeries",
    "TimeSeriesWindow",
    "corrupt_mcar",
    "fit",
    "gen_sinusoid_mix",
    "impute",
    "impute_windows",
    "load_config",
    "load_csv",
    "load_state",
    "make_windows",
    "save_state",
    "search_noise",
]
