"""Trainable models: voxel autoencoder, token generator, upsampler, classifiers."""

from .base import StoreModelMixin
from .generator import (DecodeState, PromptEmbedding, VoxelTokenGenerator,
                        apply_mask, mask_schedule, perturb_prompt,
                        radial_temperature, sample_mask_ratio,
                        temperature_field)
from .smoother import GridSmoother, smoother_loss
from .upsampler import (PatchSet, PointPatchTeacher, PointUpsampler,
                        fold_seeds, patchify, upsampler_loss)
from .vqgan import TokenGrid, VoxelVQGAN, vqgan_losses

__all__ = [
    "DecodeState",
    "GridSmoother",
    "PatchSet",
    "PointPatchTeacher",
    "PointUpsampler",
    "PromptEmbedding",
    "StoreModelMixin",
    "TokenGrid",
    "VoxelTokenGenerator",
    "VoxelVQGAN",
    "apply_mask",
    "fold_seeds",
    "mask_schedule",
    "patchify",
    "perturb_prompt",
    "radial_temperature",
    "sample_mask_ratio",
    "smoother_loss",
    "temperature_field",
    "upsampler_loss",
    "vqgan_losses",
]
