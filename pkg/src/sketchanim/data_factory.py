"""Procedural sprite-animation corpus.

Each sample is a short clip of colored sprites moving over a styled
background, together with everything a colorization trainer needs: per
frame sketches, tight instance crops with exact masks, the clean
background, a sampled reference frame, and a templated caption covering
location / appearance / motion / background. Where a production pipeline
would call external segmentation or editing tools, the renderer already
knows the ground truth, and stub interfaces mark the seams.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .canvas import InstanceImage, InstanceSet, Placement
from .latent_codec import PixelVideo

SHAPES = ("circle", "square", "triangle")
TRAJECTORIES = ("linear", "circular", "static")
BACKGROUND_STYLES = ("flat", "gradient", "checker")

# 8-bit palette values so rendered floats survive PNG round trips exactly
SPRITE_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (40, 90, 220),
    "yellow": (235, 220, 50),
    "magenta": (210, 50, 200),
    "cyan": (60, 210, 220),
    "orange": (240, 140, 30),
    "purple": (130, 50, 200),
}
BACKGROUND_COLORS = {
    "white": (245, 245, 245),
    "gray": (128, 128, 128),
    "blue": (25, 60, 160),
    "navy": (20, 30, 80),
    "teal": (20, 110, 110),
    "brown": (115, 75, 40),
    "pink": (250, 200, 215),
}

SKETCH_THRESHOLD = 0.2
MIN_CONTRAST = 0.25  # grayscale separation between sprite fill and background


def _gray(rgb) -> float:
    return float(sum(rgb) / (3 * 255.0))


def _to_unit(rgb) -> np.ndarray:
    return np.array(rgb, dtype=np.float64) / 255.0


@dataclass
class SpriteSpec:
    shape: str
    color: str
    size: int  # half-extent in pixels
    trajectory: str
    speed: float
    start_x: float
    start_y: float
    heading: float = 0.0  # radians; linear direction or circular phase
    orbit_radius: float = 0.0


@dataclass
class SceneScript:
    width: int
    height: int
    background_style: str
    background_color: str
    background_color2: str
    sprites: list[SpriteSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        sprites = [SpriteSpec(**s) for s in d["sprites"]]
        return cls(**{**d, "sprites": sprites})


def sprite_center(sprite: SpriteSpec, t: int) -> tuple[float, float]:
    """Analytic sprite center at frame t."""
    if sprite.trajectory == "static":
        return sprite.start_x, sprite.start_y
    if sprite.trajectory == "linear":
        return (
            sprite.start_x + sprite.speed * t * np.cos(sprite.heading),
            sprite.start_y + sprite.speed * t * np.sin(sprite.heading),
        )
    if sprite.trajectory == "circular":
        ang = sprite.heading + sprite.speed * t / max(sprite.orbit_radius, 1.0)
        return (
            sprite.start_x + sprite.orbit_radius * np.cos(ang),
            sprite.start_y + sprite.orbit_radius * np.sin(ang),
        )
    raise ValueError(f"unknown trajectory {sprite.trajectory!r}")


def sprite_mask(sprite: SpriteSpec, cx: float, cy: float, height: int, width: int) -> np.ndarray:
    """Exact boolean mask of the sprite at center (cx, cy), pixel centers
    sampled at (col + 0.5, row + 0.5)."""
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    s = sprite.size
    if sprite.shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= s**2
    if sprite.shape == "square":
        return (np.abs(xs - cx) <= s) & (np.abs(ys - cy) <= s)
    if sprite.shape == "triangle":
        # upright isoceles triangle: apex at cy - s, base at cy + s
        inside_y = (ys >= cy - s) & (ys <= cy + s)
        half_width = (ys - (cy - s)) / 2.0
        return inside_y & (np.abs(xs - cx) <= half_width)
    raise ValueError(f"unknown shape {sprite.shape!r}")


def render_background(script: SceneScript) -> np.ndarray:
    h, w = script.height, script.width
    c1 = _to_unit(BACKGROUND_COLORS[script.background_color])
    c2 = _to_unit(BACKGROUND_COLORS[script.background_color2])
    if script.background_style == "flat":
        bg = np.tile(c1, (h, w, 1))
    elif script.background_style == "gradient":
        # vertical blend, snapped to the 8-bit grid row by row
        alpha = np.arange(h, dtype=np.float64)[:, None] / max(h - 1, 1)
        rows = np.round((c1[None, :] * (1 - alpha) + c2[None, :] * alpha) * 255.0) / 255.0
        bg = np.repeat(rows[:, None, :], w, axis=1)
    elif script.background_style == "checker":
        cell = max(4, min(h, w) // 4)
        yy, xx = np.meshgrid(np.arange(h) // cell, np.arange(w) // cell, indexing="ij")
        parity = ((yy + xx) % 2).astype(bool)
        bg = np.where(parity[..., None], c2, c1)
    else:
        raise ValueError(f"unknown background style {script.background_style!r}")
    return bg


def _onscreen_fraction(sprite: SpriteSpec, cx: float, cy: float, h: int, w: int) -> float:
    pad = int(np.ceil(sprite.size)) + 2
    full = sprite_mask(sprite, cx + pad, cy + pad, h + 2 * pad, w + 2 * pad)
    total = full.sum()
    if total == 0:
        return 0.0
    visible = sprite_mask(sprite, cx, cy, h, w).sum()
    return visible / total


def _scene_contrast_ok(script: SceneScript) -> bool:
    bg_grays = [_gray(BACKGROUND_COLORS[script.background_color])]
    if script.background_style != "flat":
        bg_grays.append(_gray(BACKGROUND_COLORS[script.background_color2]))
    for s in script.sprites:
        g = _gray(SPRITE_COLORS[s.color])
        if any(abs(g - bg) < MIN_CONTRAST for bg in bg_grays):
            return False
    return True


def generate_scene(
    seed: int,
    width: int = 32,
    height: int = 32,
    frames: int = 16,
    min_sprites: int = 1,
    max_sprites: int = 4,
    min_size: int | None = None,
    max_size: int | None = None,
) -> SceneScript:
    """Deterministic scene script; constraints enforced by rejection.

    Every sprite keeps at least half of its pixels on canvas in every frame
    and contrasts with the background by at least MIN_CONTRAST in gray.
    Sprite size is the half-extent in pixels.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    min_size = min_size if min_size is not None else 3
    max_size = max_size if max_size is not None else max(4, min(width, height) // 5)
    for _ in range(200):
        n = int(rng.integers(min_sprites, max_sprites + 1))
        style = BACKGROUND_STYLES[rng.integers(len(BACKGROUND_STYLES))]
        bg_names = list(BACKGROUND_COLORS)
        bg1 = bg_names[rng.integers(len(bg_names))]
        bg2 = bg_names[rng.integers(len(bg_names))]
        color_names = list(SPRITE_COLORS)
        rng.shuffle(color_names)
        sprites = []
        ok = True
        for i in range(n):
            sprite = _draw_sprite(rng, color_names[i], width, height, frames,
                                  min_size, max_size)
            if sprite is None:
                ok = False
                break
            sprites.append(sprite)
        script = SceneScript(width, height, style, bg1, bg2, sprites)
        if ok and _scene_contrast_ok(script):
            return script
    raise RuntimeError(f"could not generate a valid scene for seed {seed}")


def _draw_sprite(rng, color, width, height, frames, min_size=3, max_size=6):
    for _ in range(50):
        shape = SHAPES[rng.integers(len(SHAPES))]
        size = int(rng.integers(min_size, max_size + 1))
        trajectory = TRAJECTORIES[rng.integers(len(TRAJECTORIES))]
        speed = float(rng.uniform(0.5, 1.5)) if trajectory != "static" else 0.0
        sprite = SpriteSpec(
            shape=shape,
            color=color,
            size=size,
            trajectory=trajectory,
            speed=speed,
            start_x=float(rng.uniform(size, width - size)),
            start_y=float(rng.uniform(size, height - size)),
            heading=float(rng.uniform(0, 2 * np.pi)),
            orbit_radius=float(rng.uniform(2.0, 5.0)),
        )
        if all(
            _onscreen_fraction(sprite, *sprite_center(sprite, t), height, width) >= 0.5
            for t in range(frames)
        ):
            return sprite
    return None


def _snap8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class SampleRecord:
    """One training example with every conditioning stream it implies."""

    frames: PixelVideo
    sketches: PixelVideo
    instances: InstanceSet
    background: np.ndarray
    reference_frame: np.ndarray
    caption: str
    script: SceneScript
    reference_index: int
    reference_placements: list[Placement]
    sample_id: str = ""


def render_clip(script: SceneScript, frames: int = 16, reference_rng_seed: int | None = None) -> SampleRecord:
    """Render a script to a full sample record.

    Instance crops come from each sprite's isolated render at its
    reference-frame pose, so pasting the crops back over the clean
    background in sprite order reproduces the reference frame exactly.
    """
    h, w = script.height, script.width
    background = _snap8(render_background(script))
    clip = np.empty((frames, h, w, 3), dtype=np.float64)
    masks = np.zeros((frames, len(script.sprites), h, w), dtype=bool)
    for t in range(frames):
        frame = background.copy()
        for i, sprite in enumerate(script.sprites):
            cx, cy = sprite_center(sprite, t)
            m = sprite_mask(sprite, cx, cy, h, w)
            frame[m] = _to_unit(SPRITE_COLORS[sprite.color])
            masks[t, i] = m
        clip[t] = _snap8(frame)

    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(reference_rng_seed or 0))
    )
    reference_index = int(rng.integers(frames))

    instances = InstanceSet()
    placements = []
    for i, sprite in enumerate(script.sprites):
        m = masks[reference_index, i]
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        r0, r1 = rows[0], rows[-1] + 1
        c0, c1 = cols[0], cols[-1] + 1
        crop_mask = m[r0:r1, c0:c1]
        crop = np.where(crop_mask[..., None], _to_unit(SPRITE_COLORS[sprite.color]), 0.0)
        inst_id = f"inst_{i}"
        instances.add(inst_id, InstanceImage(image=crop, mask=crop_mask))
        placements.append(Placement(instance_id=inst_id, x=int(c0), y=int(r0), z_order=i))

    record = SampleRecord(
        frames=PixelVideo(frames=clip),
        sketches=extract_sketch(PixelVideo(frames=clip)),
        instances=instances,
        background=background,
        reference_frame=clip[reference_index],
        caption="",
        script=script,
        reference_index=reference_index,
        reference_placements=placements,
    )
    record.caption = build_caption(script, record)
    return record


# gradient kernels: horizontal/vertical 3x3 differences (Sobel weights)
_KX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_KY = _KX.T


def _conv3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di : di + img.shape[0], dj : dj + img.shape[1]]
    return out


def extract_sketch(frames: PixelVideo) -> PixelVideo:
    """Thresholded gradient-magnitude edges, dark lines on white.

    Values are exactly {0, 1}; the single channel is replicated to 3.
    """
    out = np.empty_like(frames.frames)
    for t, frame in enumerate(frames.frames):
        gray = frame.mean(axis=-1)
        gx = _conv3(gray, _KX)
        gy = _conv3(gray, _KY)
        magnitude = np.sqrt(gx**2 + gy**2)
        edges = magnitude > SKETCH_THRESHOLD
        sketch = np.where(edges, 0.0, 1.0)
        out[t] = sketch[..., None]
    return PixelVideo(frames=out, frame_rate=frames.frame_rate)


_GRID_PHRASES = [
    ["upper left", "upper center", "upper right"],
    ["middle left", "center", "middle right"],
    ["lower left", "lower center", "lower right"],
]

_MOTION_PHRASES = {
    "static": "stays still",
    "linear": "moves in a straight line",
    "circular": "moves in a circle",
}

_BACKGROUND_PHRASES = {
    "flat": "a plain {color} background",
    "gradient": "a {color} gradient background",
    "checker": "a {color} checkered background",
}


def grid_phrase(cx: float, cy: float, width: int, height: int) -> str:
    col = min(2, int(3 * cx / width))
    row = min(2, int(3 * cy / height))
    return _GRID_PHRASES[row][col]


def build_caption(script: SceneScript, record: SampleRecord) -> str:
    """Template caption covering the four mandatory dimensions:
    Location / Appearance / Motion / Background."""
    names = [f"the {s.color} {s.shape}" for s in script.sprites]
    locations = []
    for i, sprite in enumerate(script.sprites):
        inst = record.instances[f"inst_{i}"]
        p = record.reference_placements[i]
        ys, xs = np.nonzero(inst.alpha())
        cy = p.y + ys.mean() + 0.5
        cx = p.x + xs.mean() + 0.5
        locations.append(
            f"{names[i]} is at the {grid_phrase(cx, cy, script.width, script.height)}"
        )
    appearances = [f"a {s.color} {s.shape}" for s in script.sprites]
    motions = [f"{names[i]} {_MOTION_PHRASES[s.trajectory]}" for i, s in enumerate(script.sprites)]
    background = _BACKGROUND_PHRASES[script.background_style].format(
        color=script.background_color
    )
    return (
        f"Location: {' and '.join(locations)}. "
        f"Appearance: {' and '.join(appearances)}. "
        f"Motion: {' and '.join(motions)}. "
        f"Background: {background}."
    )


_SEGMENT_BACKENDS = {}


def register_segment_backend(name: str, fn):
    _SEGMENT_BACKENDS[name] = fn


def _fixed_chunks(video: PixelVideo, chunk: int = 16) -> list[PixelVideo]:
    total = video.frames.shape[0]
    clips = []
    for start in range(0, total, chunk):
        clips.append(
            PixelVideo(frames=video.frames[start : start + chunk], frame_rate=video.frame_rate)
        )
    return clips


register_segment_backend("fixed", _fixed_chunks)


def segment_scene_stub(video: PixelVideo, backend: str = "fixed", **kwargs) -> list[PixelVideo]:
    """Scene segmentation seam: the bundled backend chunks at fixed length;
    external detectors register through the same interface."""
    if backend not in _SEGMENT_BACKENDS:
        raise ValueError(
            f"unknown segmentation backend {backend!r}; registered: {sorted(_SEGMENT_BACKENDS)}"
        )
    return _SEGMENT_BACKENDS[backend](video, **kwargs)


# ---------------------------------------------------------------------------
# corpus on-disk layout


def _save_png(path: Path, array: np.ndarray):
    arr = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _save_mask(path: Path, mask: np.ndarray):
    Image.fromarray((mask.astype(np.uint8)) * 255).save(path)


def _load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def generate_sample(seed: int, index: int, width=32, height=32, frames=16,
                    min_sprites=1, max_sprites=4, min_size=None, max_size=None) -> SampleRecord:
    """Sample `index` of the corpus seeded by `seed`; pure per (seed, index)."""
    scene_seed = int(
        np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0]
    )
    script = generate_scene(
        scene_seed, width=width, height=height, frames=frames,
        min_sprites=min_sprites, max_sprites=max_sprites,
        min_size=min_size, max_size=max_size,
    )
    record = render_clip(script, frames=frames, reference_rng_seed=scene_seed + 1)
    record.sample_id = f"sample_{index:06d}"
    return record


def write_corpus(
    out_dir,
    size: int,
    seed: int,
    width: int = 32,
    height: int = 32,
    frames: int = 16,
    min_sprites: int = 1,
    max_sprites: int = 4,
    min_size: int | None = None,
    max_size: int | None = None,
) -> Path:
    """Materialize a corpus; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for index in range(size):
        record = generate_sample(
            seed, index, width=width, height=height, frames=frames,
            min_sprites=min_sprites, max_sprites=max_sprites,
            min_size=min_size, max_size=max_size,
        )
        sample_dir = out / record.sample_id
        write_sample(sample_dir, record)
        rows.append(
            {
                "id": record.sample_id,
                "path": record.sample_id,
                "sprites": len(record.script.sprites),
                "caption": record.caption,
            }
        )
    manifest = {
        "seed": seed,
        "size": size,
        "width": width,
        "height": height,
        "frames": frames,
        "samples": rows,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def write_sample(sample_dir: Path, record: SampleRecord):
    sample_dir = Path(sample_dir)
    (sample_dir / "frames").mkdir(parents=True, exist_ok=True)
    (sample_dir / "sketches").mkdir(exist_ok=True)
    (sample_dir / "instances").mkdir(exist_ok=True)
    for t, frame in enumerate(record.frames.frames):
        _save_png(sample_dir / "frames" / f"{t:03d}.png", frame)
    for t, sk in enumerate(record.sketches.frames):
        _save_png(sample_dir / "sketches" / f"{t:03d}.png", sk)
    for i, inst_id in enumerate(record.instances.ids):
        inst = record.instances[inst_id]
        _save_png(sample_dir / "instances" / f"inst_{i}.png", inst.image)
        _save_mask(sample_dir / "instances" / f"inst_{i}.mask.png", inst.alpha())
    _save_png(sample_dir / "background.png", record.background)
    _save_png(sample_dir / "reference.png", record.reference_frame)
    (sample_dir / "caption.txt").write_text(record.caption)
    meta = {
        "sample_id": record.sample_id,
        "script": record.script.to_dict(),
        "reference_index": record.reference_index,
        "placements": [
            {
                "instance_id": p.instance_id,
                "x": p.x,
                "y": p.y,
                "scale": p.scale,
                "z_order": p.z_order,
            }
            for p in record.reference_placements
        ],
    }
    (sample_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def load_sample(sample_dir) -> SampleRecord:
    sample_dir = Path(sample_dir)
    meta = json.loads((sample_dir / "meta.json").read_text())
    frame_paths = sorted((sample_dir / "frames").glob("*.png"))
    frames = np.stack([_load_png(p) for p in frame_paths])
    sketch_paths = sorted((sample_dir / "sketches").glob("*.png"))
    sketches = np.stack([_load_png(p) for p in sketch_paths])
    instances = InstanceSet()
    i = 0
    while (sample_dir / "instances" / f"inst_{i}.png").exists():
        img = _load_png(sample_dir / "instances" / f"inst_{i}.png")
        mask = _load_mask(sample_dir / "instances" / f"inst_{i}.mask.png")
        instances.add(f"inst_{i}", InstanceImage(image=img, mask=mask))
        i += 1
    placements = [
        Placement(
            instance_id=p["instance_id"],
            x=p["x"],
            y=p["y"],
            scale=p["scale"],
            z_order=p["z_order"],
        )
        for p in meta["placements"]
    ]
    return SampleRecord(
        frames=PixelVideo(frames=frames),
        sketches=PixelVideo(frames=sketches),
        instances=instances,
        background=_load_png(sample_dir / "background.png"),
        reference_frame=_load_png(sample_dir / "reference.png"),
        caption=(sample_dir / "caption.txt").read_text(),
        script=SceneScript.from_dict(meta["script"]),
        reference_index=meta["reference_index"],
        reference_placements=placements,
        sample_id=meta["sample_id"],
    )


def read_manifest(corpus_dir) -> dict:
    manifest_path = Path(corpus_dir) / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    return json.loads(manifest_path.read_text())
