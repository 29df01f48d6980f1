"""Discrete masked diffusion over occupied voxels of sparse multi-category 3D structures."""

from .backbone import BackboneConfig, Denoiser, build_model, denoise
from .diffusion import loss_autoregressive, loss_continuous, loss_discrete, sample, sample_autoregressive
from .schedule import LogLinearSchedule
from .train import Dataset, TrainConfig, load_model, train
from .voxels import OccupancyMap, Vocabulary, VoxelGrid, extract_sequence, reconstruct, voxelize

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "Dataset",
    "Denoiser",
    "LogLinearSchedule",
    "OccupancyMap",
    "TrainConfig",
    "Vocabulary",
    "VoxelGrid",
    "build_model",
    "denoise",
    "extract_sequence",
    "load_model",
    "loss_autoregressive",
    "loss_continuous",
    "loss_discrete",
    "reconstruct",
    "sample",
    "sample_autoregressive",
    "train",
    "voxelize",
]
