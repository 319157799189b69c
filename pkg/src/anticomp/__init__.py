"""Compression-robust face forgery detection with relation matching and
video-level contrastive learning."""

from anticomp.core import CompressionLevel, FrameImage, Label, normalize, seeded_rng

__version__ = "0.1.0"

__all__ = ["CompressionLevel", "FrameImage", "Label", "normalize", "seeded_rng", "__version__"]
