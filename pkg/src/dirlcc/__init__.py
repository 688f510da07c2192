"""Change captioning with decorrelated pair representations and a
cross-modal contrastive regulariser, on a small numpy autodiff engine."""

from .config import TrainConfig, preset
from .model import CaptionModel
from .scenes import generate_dataset, generate_pair
from .train import load_checkpoint, save_checkpoint

__all__ = [
    "CaptionModel",
    "TrainConfig",
    "generate_dataset",
    "generate_pair",
    "load_checkpoint",
    "preset",
    "save_checkpoint",
]
__version__ = "0.1.0"
