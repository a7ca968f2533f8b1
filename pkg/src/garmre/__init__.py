"""Garment restoration from person images with a small latent diffusion model."""
from .config import CATEGORIES, ModelConfig, RunConfig, SampleConfig, ScheduleConfig, TrainConfig, load_config
from .diffusion import GuidanceConfig, make_schedule, ddim_sample
from .model import GarmentRestorer, restore

__all__ = ["CATEGORIES", "ModelConfig", "RunConfig", "SampleConfig", "ScheduleConfig", "TrainConfig",
           "load_config", "GuidanceConfig", "make_schedule", "ddim_sample", "GarmentRestorer", "restore"]
