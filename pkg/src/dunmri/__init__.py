"""Compressed-sensing MRI: CP-PPA, its deep unfolded network and self-supervised training."""

from dunmri.cppa import CPPAConfig, solve
from dunmri.metrics import psnr, ssim
from dunmri.network import ModelConfig, init_params, model_forward
from dunmri.physics import KSpaceData, SamplingMask, make_mask, make_phantom
from dunmri.ssl import LossWeights, PartitionSpec, reconstruct, train

__all__ = ["CPPAConfig", "KSpaceData", "LossWeights", "ModelConfig", "PartitionSpec", "SamplingMask",
           "init_params", "make_mask", "make_phantom", "model_forward", "psnr", "reconstruct", "solve",
           "ssim", "train"]
