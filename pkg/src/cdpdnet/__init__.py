"""Text-prompt-driven universal 3D segmentation for partially labeled multi-dataset training."""

from .model import CDPDNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .partial_labels import TaskRegistry, TaskSpec, load_registry, reference_registry, presence_mask, to_multihot

__version__ = "0.1.0"
