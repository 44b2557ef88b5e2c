from .layers import batchnorm, conv2d, downsample_to
from .loss import permutation_invariant_loss
from .model import EstimatorModel, forward, load_checkpoint, save_checkpoint
from .train import TrainingConfig, TrainingResult, estimate_powers, train

__all__ = [
    "EstimatorModel",
    "TrainingConfig",
    "TrainingResult",
    "batchnorm",
    "conv2d",
    "downsample_to",
    "estimate_powers",
    "forward",
    "load_checkpoint",
    "permutation_invariant_loss",
    "save_checkpoint",
    "train",
]
