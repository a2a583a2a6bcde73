"""Hallucinated multi-head attention and compact FFN blocks on a small numpy tensor core."""
from .vit_model import PRESETS, ModelConfig, build_model, merge_model

__version__ = "0.1.0"
