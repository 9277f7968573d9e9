"""Deterministic video codec between pixel space and latent space.

A space-to-depth rearrangement stands in for a learned video VAE: it is
exactly invertible, linear, and keeps every latent-space property testable
bit-for-bit. A learned codec can be slotted behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCALE_FACTOR = 4


@dataclass(frozen=True)
class PixelVideo:
    """A clip of T frames, each H x W x 3, values in [0, 1]."""

    frames: np.ndarray
    frame_rate: float = 8.0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must have shape (T, H, W, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("need at least one frame")
        if not np.isfinite(f).all():
            raise ValueError("frames contain non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError(
                f"pixel values must lie in [0, 1], got range [{f.min()}, {f.max()}]"
            )
        object.__setattr__(self, "frames", f)

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class LatentVideo:
    """Codec-space clip: (T', H', W', D) with H' = H/f, W' = W/f, D = 3*f**2."""

    data: np.ndarray
    scale_factor: int = DEFAULT_SCALE_FACTOR
    temporal_factor: int = 1  # no temporal compression at desk scale
    frame_rate: float = 8.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 4:
            raise ValueError(f"latent data must have 4 axes, got shape {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("latent contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[-1]


def _check_divisible(name, value, factor):
    if value % factor != 0:
        raise ValueError(f"{name} {value} is not divisible by scale factor {factor}")


def encode(video: PixelVideo, factor: int = DEFAULT_SCALE_FACTOR) -> LatentVideo:
    """Rearrange (T, H, W, 3) -> (T, H/f, W/f, 3*f*f).

    Channel layout: out[t, i, j, c*f*f + di*f + dj] = in[t, i*f+di, j*f+dj, c].
    """
    t, h, w, _ = video.frames.shape
    _check_divisible("height", h, factor)
    _check_divisible("width", w, factor)
    x = video.frames.reshape(t, h // factor, factor, w // factor, factor, 3)
    x = x.transpose(0, 1, 3, 5, 2, 4)  # (t, i, j, c, di, dj)
    data = x.reshape(t, h // factor, w // factor, 3 * factor * factor)
    return LatentVideo(data=data, scale_factor=factor, frame_rate=video.frame_rate)


def decode(latent: LatentVideo) -> PixelVideo:
    """Exact inverse of :func:`encode`."""
    f = latent.scale_factor
    t, hh, ww, d = latent.data.shape
    if d % (f * f) != 0:
        raise ValueError(f"channel count {d} is not divisible by f*f = {f * f}")
    c = d // (f * f)
    x = latent.data.reshape(t, hh, ww, c, f, f)
    x = x.transpose(0, 1, 4, 2, 5, 3)  # (t, i, di, j, dj, c)
    frames = x.reshape(t, hh * f, ww * f, c)
    return PixelVideo(frames=frames, frame_rate=latent.frame_rate)


def encode_image(image: np.ndarray, factor: int = DEFAULT_SCALE_FACTOR) -> LatentVideo:
    """Encode one H x W x 3 image as a single-frame latent."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {image.shape}")
    return encode(PixelVideo(frames=image[None]), factor=factor)
