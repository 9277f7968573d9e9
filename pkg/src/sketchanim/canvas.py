"""Reference canvas composition and condition-stream assembly.

Users place instance images onto a blank canvas; the composite becomes
frame 0 of a condition stream whose remaining frames carry the background
reference (or stay blank). The stream is encoded and channel-concatenated
with the sketch and noise latents.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .latent_codec import DEFAULT_SCALE_FACTOR, LatentVideo, PixelVideo, encode


@dataclass(frozen=True)
class InstanceImage:
    """A cropped reference instance: RGB content plus an optional binary mask.

    Without an explicit mask the non-black pixels of the crop are opaque.
    """

    image: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"instance image must be (h, w, 3), got {img.shape}")
        object.__setattr__(self, "image", img)
        if self.mask is not None:
            m = np.asarray(self.mask).astype(bool)
            if m.shape != img.shape[:2]:
                raise ValueError(
                    f"mask shape {m.shape} does not match image {img.shape[:2]}"
                )
            object.__setattr__(self, "mask", m)

    def alpha(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return (self.image > 0).any(axis=-1)


class InstanceSet:
    """Ordered collection of reference instances keyed by identifier."""

    def __init__(self, items: dict[str, InstanceImage] | None = None):
        self._items: dict[str, InstanceImage] = dict(items or {})

    def add(self, instance_id: str, instance: InstanceImage):
        self._items[instance_id] = instance

    def __getitem__(self, instance_id: str) -> InstanceImage:
        return self._items[instance_id]

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._items

    def __len__(self) -> int:
        return len(self._items)

    @property
    def ids(self) -> list[str]:
        return list(self._items)

    def images(self) -> list[InstanceImage]:
        return list(self._items.values())


@dataclass(frozen=True)
class Placement:
    """One instance placed on the canvas. (x, y) is the top-left corner in
    canvas pixels; higher z_order paints later."""

    instance_id: str
    x: int
    y: int
    scale: float = 1.0
    z_order: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass
class CanvasSpec:
    """User-facing composition: canvas size, placements, optional background."""

    width: int
    height: int
    placements: list[Placement] = field(default_factory=list)
    background: np.ndarray | None = None

    def __post_init__(self):
        if self.background is not None:
            bg = np.asarray(self.background)
            if bg.shape != (self.height, self.width, 3):
                raise ValueError(
                    f"background shape {bg.shape} does not match canvas "
                    f"({self.height}, {self.width}, 3)"
                )
            self.background = bg

    def validate_divisible(self, factor: int = DEFAULT_SCALE_FACTOR):
        if self.width % factor != 0:
            raise ValueError(f"canvas width {self.width} not divisible by {factor}")
        if self.height % factor != 0:
            raise ValueError(f"canvas height {self.height} not divisible by {factor}")


def scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    # floor(x + 0.5) rather than round(): keeps behavior identical across
    # languages (banker's rounding differs between Python and JS previews).
    return max(1, int(np.floor(h * scale + 0.5))), max(1, int(np.floor(w * scale + 0.5)))


def _nearest_indices(src_len: int, dst_len: int) -> np.ndarray:
    # center-sampled nearest neighbor
    idx = np.floor((np.arange(dst_len) + 0.5) * src_len / dst_len).astype(int)
    return np.minimum(idx, src_len - 1)


def _resample(instance: InstanceImage, scale: float, method: str):
    img, mask = instance.image, instance.alpha()
    h, w = img.shape[:2]
    sh, sw = scaled_size(h, w, scale)
    if method == "nearest":
        ri = _nearest_indices(h, sh)
        ci = _nearest_indices(w, sw)
        return img[ri][:, ci], mask[ri][:, ci]
    if method == "bilinear":
        ys = (np.arange(sh) + 0.5) * h / sh - 0.5
        xs = (np.arange(sw) + 0.5) * w / sw - 0.5
        y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
        x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = np.clip(ys - y0, 0, 1)[:, None, None]
        wx = np.clip(xs - x0, 0, 1)[None, :, None]
        out = (
            img[y0][:, x0] * (1 - wy) * (1 - wx)
            + img[y0][:, x1] * (1 - wy) * wx
            + img[y1][:, x0] * wy * (1 - wx)
            + img[y1][:, x1] * wy * wx
        )
        # masks stay hard-edged even under bilinear content resampling
        ri = _nearest_indices(h, sh)
        ci = _nearest_indices(w, sw)
        return out, mask[ri][:, ci]
    raise ValueError(f"unknown resample method {method!r}")


def compose(spec: CanvasSpec, instances: InstanceSet, resample: str = "nearest") -> np.ndarray:
    """Paint placements onto a blank canvas in ascending z_order.

    Later placements occlude earlier ones (painter's algorithm). Ties in
    z_order are broken by (instance_id, x, y, scale) so the result does not
    depend on list order.
    """
    for i, p in enumerate(spec.placements):
        if p.instance_id not in instances:
            raise ValueError(f"placements[{i}]: unknown instance id {p.instance_id!r}")
    canvas = np.zeros((spec.height, spec.width, 3), dtype=np.float64)
    ordered = sorted(
        spec.placements, key=lambda p: (p.z_order, p.instance_id, p.x, p.y, p.scale)
    )
    for p in ordered:
        img, mask = _resample(instances[p.instance_id], p.scale, resample)
        sh, sw = img.shape[:2]
        top, left = p.y, p.x
        r0, r1 = max(0, top), min(spec.height, top + sh)
        c0, c1 = max(0, left), min(spec.width, left + sw)
        if r0 >= r1 or c0 >= c1:
            warnings.warn(
                f"placement of {p.instance_id!r} at ({p.x}, {p.y}) lies outside "
                "the canvas after clipping; skipped"
            )
            continue
        sub_img = img[r0 - top : r1 - top, c0 - left : c1 - left]
        sub_mask = mask[r0 - top : r1 - top, c0 - left : c1 - left]
        if not sub_mask.any():
            continue
        region = canvas[r0:r1, c0:c1]
        region[sub_mask] = sub_img[sub_mask]
    return canvas


def build_condition_stream(spec: CanvasSpec, instances: InstanceSet, frames: int) -> PixelVideo:
    """Frame 0 carries the composite canvas; frames 1..T-1 carry the
    background reference if present, otherwise stay blank."""
    if frames < 1:
        raise ValueError(f"frame count must be >= 1, got {frames}")
    composite = compose(spec, instances)
    stream = np.zeros((frames, spec.height, spec.width, 3), dtype=np.float64)
    stream[0] = composite
    if spec.background is not None and frames > 1:
        stream[1:] = spec.background
    return PixelVideo(frames=stream)


@dataclass(frozen=True)
class ConditionLatents:
    """Temporally aligned canvas and sketch latents ready for fusion."""

    canvas_stream: LatentVideo
    sketch_stream: LatentVideo

    def __post_init__(self):
        cs, ss = self.canvas_stream.shape, self.sketch_stream.shape
        if cs[:3] != ss[:3]:
            raise ValueError(
                f"canvas {cs[:3]} and sketch {ss[:3]} streams are not aligned"
            )

    @property
    def joint_channels(self) -> int:
        return self.canvas_stream.channels + self.sketch_stream.channels


_AXIS_NAMES = ("frames", "height", "width")


def fuse_conditions(noise: LatentVideo, sketch: LatentVideo, canvas: LatentVideo) -> LatentVideo:
    """Channel-concatenate [noise || sketch || canvas]; values untouched."""
    for name, a, b, c in zip(_AXIS_NAMES, noise.shape, sketch.shape, canvas.shape):
        if not (a == b == c):
            raise ValueError(
                f"streams disagree on {name}: noise={a}, sketch={b}, canvas={c}"
            )
    data = np.concatenate([noise.data, sketch.data, canvas.data], axis=-1)
    return LatentVideo(
        data=data, scale_factor=noise.scale_factor, frame_rate=noise.frame_rate
    )


def split_fused(fused: LatentVideo, channel_counts: tuple[int, int, int]):
    """Slice a fused latent back into its (noise, sketch, canvas) parts."""
    dn, ds, dc = channel_counts
    if dn + ds + dc != fused.channels:
        raise ValueError(
            f"channel counts {channel_counts} do not sum to {fused.channels}"
        )
    f = fused.data
    mk = lambda d: LatentVideo(d, fused.scale_factor, frame_rate=fused.frame_rate)
    return mk(f[..., :dn]), mk(f[..., dn : dn + ds]), mk(f[..., dn + ds :])


def spec_to_document(spec: CanvasSpec, background_path: str | None = None) -> dict:
    """Serialize a CanvasSpec to its wire/document form."""
    return {
        "width": spec.width,
        "height": spec.height,
        "background_path": background_path,
        "placements": [
            {
                "instance_id": p.instance_id,
                "x": p.x,
                "y": p.y,
                "scale": p.scale,
                "z_order": p.z_order,
            }
            for p in spec.placements
        ],
    }


def spec_from_document(doc: dict, load_image=None) -> CanvasSpec:
    """Parse the document form; `load_image(path)` resolves background_path."""
    try:
        width, height = int(doc["width"]), int(doc["height"])
        placements = [
            Placement(
                instance_id=str(e["instance_id"]),
                x=int(e["x"]),
                y=int(e["y"]),
                scale=float(e.get("scale", 1.0)),
                z_order=int(e.get("z_order", i)),
            )
            for i, e in enumerate(doc.get("placements", []))
        ]
    except KeyError as exc:
        raise ValueError(f"canvas document missing key {exc}") from exc
    background = None
    bg_path = doc.get("background_path")
    if bg_path:
        if load_image is None:
            raise ValueError("document has background_path but no image loader given")
        background = load_image(bg_path)
    return CanvasSpec(width=width, height=height, placements=placements, background=background)
