"""F2Net: center-guided appearance diffusion and dynamic fusion for video object segmentation."""

from .tensor import Tensor, backward, set_default_dtype
from .model import F2Net, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, train
from .data import GenConfig, SequenceSample, gen_synthetic
from .metrics import boundary_accuracy, region_similarity

__all__ = [
    "F2Net", "GenConfig", "ModelConfig", "SequenceSample", "Tensor", "TrainConfig", "backward",
    "boundary_accuracy", "gen_synthetic", "load_checkpoint", "region_similarity", "save_checkpoint",
    "set_default_dtype", "train",
]
__version__ = "0.1.0"
