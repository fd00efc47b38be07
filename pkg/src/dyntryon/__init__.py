"""Desk-scale video try-on denoiser with garment feature fusion and limb-aware sparse attention."""

from .tokenizer import ConfigError, ModelConfig

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "__version__"]
