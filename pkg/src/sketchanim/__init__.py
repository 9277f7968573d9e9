"""Multi-instance sketch video colorization at desk scale."""

from .latent_codec import LatentVideo, PixelVideo, decode, encode, encode_image
from .canvas import (
    CanvasSpec,
    InstanceImage,
    InstanceSet,
    Placement,
    build_condition_stream,
    compose,
    fuse_conditions,
)
from .backbone import Denoiser, ModelConfig, NoiseSchedule, build_conditions, sample
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CanvasSpec",
    "Denoiser",
    "InstanceImage",
    "InstanceSet",
    "LatentVideo",
    "ModelConfig",
    "NoiseSchedule",
    "PixelVideo",
    "Placement",
    "TrainConfig",
    "build_condition_stream",
    "build_conditions",
    "compose",
    "decode",
    "encode",
    "encode_image",
    "fuse_conditions",
    "sample",
    "train",
]
