"""Differentiable texture refinement at toy scale.

A small convolutional stack with hand-written backward passes (im2col + GEMM),
the two image losses, an Adam trainer, a finite-difference gradient checker,
and a deterministic pull-push texture completion used when no trained weights
are available.
"""

from .complete import complete_texture
from .gradcheck import grad_check
from .losses import loss_ren, loss_sr, masked_l1_mean
from .nets import SRNet, TexFeatNet, texfeat_forward, srnet_forward
from .ops import Param
from .train import Adam, TrainConfig, train
from .weights_io import load_weights, load_weights_into, save_weights

__all__ = [
    "Adam",
    "Param",
    "SRNet",
    "TexFeatNet",
    "TrainConfig",
    "complete_texture",
    "grad_check",
    "load_weights",
    "load_weights_into",
    "loss_ren",
    "loss_sr",
    "masked_l1_mean",
    "save_weights",
    "srnet_forward",
    "texfeat_forward",
    "train",
]
