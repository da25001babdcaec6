"""Self-supervised Lagrangian motion magnification."""
from .core import AlphaMap, FlowField, Frame, FramePair, VideoClip
from .flow import builtin_variational, estimate, external_adapter
from .generator import GeneratorConfig, build_generator, load_checkpoint, magnify_video, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AlphaMap",
    "FlowField",
    "Frame",
    "FramePair",
    "GeneratorConfig",
    "VideoClip",
    "build_generator",
    "builtin_variational",
    "estimate",
    "external_adapter",
    "load_checkpoint",
    "magnify_video",
    "save_checkpoint",
]
