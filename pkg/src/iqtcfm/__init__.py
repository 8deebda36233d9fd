"""Conditional flow matching for low-field MRI image quality transfer."""

from .config import RunConfig, desk_config, tiny_config
from .core import DatasetManifest, PairedSample, load_volume, make_rng, save_volume
from .flow import cfm_loss, integrate, interpolate, sample_noise, target_velocity
from .metrics import psnr, ssim
from .network import VelocityUNet, count_params, init_params

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "desk_config",
    "tiny_config",
    "DatasetManifest",
    "PairedSample",
    "load_volume",
    "make_rng",
    "save_volume",
    "cfm_loss",
    "integrate",
    "interpolate",
    "sample_noise",
    "target_velocity",
    "psnr",
    "ssim",
    "VelocityUNet",
    "count_params",
    "init_params",
]
