"""Training loop, checkpointing, ablation runs, and the toy-model
evaluation harness.

The loss is the masked noise-regression objective: only joint-token
positions carry targets; instance tokens never contribute. The background
condition weight is excluded from the optimizer, every other condition
weight is clamped non-negative after each step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .attention import TokenSequence, loss_mask
from .backbone import (
    ABLATIONS,
    Conditions,
    Denoiser,
    ModelConfig,
    build_conditions,
    flatten_latent_tokens,
    prepare_instance_latent,
    sample,
    save_checkpoint,
)
from .canvas import CanvasSpec
from .data_factory import (
    SampleRecord,
    generate_sample,
    load_sample,
    read_manifest,
    sprite_center,
    sprite_mask,
    SPRITE_COLORS,
)
from .encoders import MODALITY_BACKGROUND, MODALITY_INSTANCE
from .control import ConditionBundle
from .latent_codec import LatentVideo, PixelVideo, encode
from .metrics import ssim


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, step, checkpoint_path):
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {checkpoint_path}"
        )
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    steps: int = 20000
    batch_size: int = 1
    weight_decay: float = 0.01
    seed: int = 0
    ablation: str = "full"
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 1000
    probe_every: int = 0  # 0 disables the fixed probe-loss log
    probe_size: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")


@dataclass
class PreparedSample:
    """Per-sample constants that do not depend on trainable weights."""

    x0: LatentVideo
    sketch: torch.Tensor
    canvas: torch.Tensor
    instance_latents: list
    instance_images: list
    background_image: np.ndarray
    caption: str


def training_spec(record: SampleRecord) -> CanvasSpec:
    """The canvas a training sample implies: its instances placed at their
    reference-frame positions over the sample background."""
    h, w = record.background.shape[:2]
    return CanvasSpec(
        width=w,
        height=h,
        placements=list(record.reference_placements),
        background=record.background,
    )


def prepare_sample(model: Denoiser, record: SampleRecord) -> PreparedSample:
    cfg = model.config
    cond = build_conditions(
        model, training_spec(record), record.instances, record.sketches, record.caption
    )
    inst_images = [
        np.where(inst.alpha()[..., None], inst.image, 0.0)
        for inst in record.instances.images()
    ]
    return PreparedSample(
        x0=encode(record.frames, cfg.codec_factor),
        sketch=cond.sketch,
        canvas=cond.canvas,
        instance_latents=cond.instance_latents,
        instance_images=inst_images,
        background_image=record.background,
        caption=record.caption,
    )


def sample_conditions(model: Denoiser, prep: PreparedSample) -> Conditions:
    """Re-encode the trainable semantic features for one step."""
    enc = model.encoders
    bg = enc.project(enc.encode_image_condition(prep.background_image, MODALITY_BACKGROUND))
    inst = [
        enc.project(enc.encode_image_condition(im, MODALITY_INSTANCE))
        for im in prep.instance_images
    ]
    text = enc.project(enc.encode_text(prep.caption))
    bundle = ConditionBundle(
        bg=bg,
        text=text,
        instances=inst,
        weights=model.weight_store.bundle_weights(len(inst)),
    )
    return Conditions(
        sketch=prep.sketch,
        canvas=prep.canvas,
        instance_latents=prep.instance_latents,
        bundle=bundle,
    )


def masked_token_loss(token_out, target_tokens, position_mask) -> torch.Tensor:
    """Mean squared error over the masked (joint) positions only."""
    if token_out.shape != target_tokens.shape:
        raise ValueError(
            f"prediction {tuple(token_out.shape)} and target "
            f"{tuple(target_tokens.shape)} shapes differ"
        )
    diff = token_out - target_tokens
    return (diff[position_mask] ** 2).mean()


def compute_loss(model: Denoiser, prep: PreparedSample, t: int, eps: np.ndarray):
    """Noise the sample, run the denoiser, regress at joint positions."""
    cfg = model.config
    if cfg.objective == "flow":
        x_t = model.schedule.flow_mix(prep.x0, t, eps)
        target_field = eps - prep.x0.data
    else:
        x_t = model.schedule.add_noise(prep.x0, t, eps)
        target_field = eps
    cond = sample_conditions(model, prep)
    result = model(model._as_tensor(x_t.data), t, cond)
    joint_targets = flatten_latent_tokens(model._as_tensor(target_field), cfg.patch)
    targets = torch.zeros_like(result.token_out)
    targets[: result.joint_len] = joint_targets
    seq = TokenSequence(result.token_out, result.joint_len, result.group_sizes)
    position_mask = torch.as_tensor(loss_mask(seq))
    return masked_token_loss(result.token_out, targets, position_mask)


def model_config_for_corpus(manifest: dict, **overrides) -> ModelConfig:
    base = dict(
        frames=manifest["frames"], height=manifest["height"], width=manifest["width"]
    )
    base.update(overrides)
    return ModelConfig(**base)


def trainable_parameters(model: Denoiser):
    return [p for p in model.parameters() if p.requires_grad]


def train(
    config: TrainConfig,
    corpus_dir,
    out_dir,
    model_config: ModelConfig | None = None,
) -> Path:
    """Train a model on a corpus directory; returns the final checkpoint path.

    Deterministic given config.seed. Emits an append-only loss CSV every
    `log_every` steps, periodic checkpoints, and (optionally) a fixed-probe
    loss CSV for smoothed-loss comparisons.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(corpus_dir)
    if model_config is None:
        model_config = model_config_for_corpus(manifest, hidden_dim=128, blocks=2)
    model_config = replace(model_config, ablation=config.ablation)

    torch.manual_seed(config.seed)
    model = Denoiser(model_config)
    if config.ablation == "no_decoupled_control":
        for block in model.blocks:
            block.gate.gain.requires_grad_(False)

    records = [load_sample(corpus_dir / row["path"]) for row in manifest["samples"]]
    prepared = [prepare_sample(model, r) for r in records]

    optimizer = torch.optim.AdamW(
        trainable_parameters(model),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed)
    probe = _build_probe(config, model, prepared) if config.probe_every else None

    loss_path = out_dir / "loss_log.csv"
    if not loss_path.exists():
        loss_path.write_text("step,loss,lr\n")
    probe_path = out_dir / "probe_log.csv"
    if probe and not probe_path.exists():
        probe_path.write_text("step,loss\n")

    last_good = out_dir / "checkpoint_000000.pt"
    save_checkpoint(model, last_good, step=0)
    if probe:
        _append_csv(probe_path, [0, _probe_loss(model, prepared, probe)])

    model.train()
    for step in range(1, config.steps + 1):
        optimizer.zero_grad()
        total = 0.0
        for _ in range(config.batch_size):
            idx = int(torch.randint(len(prepared), (1,), generator=gen))
            t = int(torch.randint(model.schedule.steps, (1,), generator=gen))
            eps = torch.randn(
                prepared[idx].x0.data.shape, generator=gen, dtype=torch.float32
            ).numpy()
            loss = compute_loss(model, prepared[idx], t, eps) / config.batch_size
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, last_good)
            loss.backward()
            total += loss.item()
        torch.nn.utils.clip_grad_norm_(trainable_parameters(model), config.grad_clip)
        optimizer.step()
        model.weight_store.clamp_non_negative()

        if step % config.log_every == 0:
            _append_csv(loss_path, [step, f"{total:.6f}", config.learning_rate])
        if probe and step % config.probe_every == 0:
            _append_csv(probe_path, [step, f"{_probe_loss(model, prepared, probe):.6f}"])
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            path = out_dir / f"checkpoint_{step:06d}.pt"
            save_checkpoint(model, path, step=step)
            last_good = path

    final = out_dir / "model.pt"
    save_checkpoint(model, final, step=config.steps)
    return final


def _append_csv(path: Path, row):
    with path.open("a", newline="") as fh:
        csv.writer(fh).writerow(row)


def _build_probe(config: TrainConfig, model: Denoiser, prepared):
    gen = torch.Generator().manual_seed(config.seed + 7919)
    probe = []
    steps = model.schedule.steps
    for k in range(config.probe_size):
        idx = k % len(prepared)
        t = int((k + 0.5) * steps / config.probe_size)
        eps = torch.randn(
            prepared[idx].x0.data.shape, generator=gen, dtype=torch.float32
        ).numpy()
        probe.append((idx, t, eps))
    return probe


def _probe_loss(model: Denoiser, prepared, probe) -> float:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        losses = [float(compute_loss(model, prepared[i], t, e)) for i, t, e in probe]
    if was_training:
        model.train()
    return float(np.mean(losses))


def read_probe_log(out_dir) -> list[tuple[int, float]]:
    rows = []
    with (Path(out_dir) / "probe_log.csv").open() as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["step"]), float(row["loss"])))
    return rows


# ---------------------------------------------------------------------------
# toy-model evaluation harness

COLOR_DISTANCE_THRESHOLD = 0.15


def held_out_records(seed: int, count: int, width=32, height=32, frames=4,
                     min_sprites=2, max_sprites=2, min_size=None,
                     max_size=None) -> list[SampleRecord]:
    return [
        generate_sample(seed, i, width=width, height=height, frames=frames,
                        min_sprites=min_sprites, max_sprites=max_sprites,
                        min_size=min_size, max_size=max_size)
        for i in range(count)
    ]


def colorize_record(
    model: Denoiser,
    record: SampleRecord,
    seed: int,
    num_steps: int = 50,
    swap_pair: tuple[str, str] | None = None,
) -> PixelVideo:
    """Run inference for one record's sketches and canvas.

    swap_pair exchanges the images bound to two instance ids, leaving the
    placements where they are.
    """
    instances = record.instances
    if swap_pair is not None:
        a, b = swap_pair
        swapped = {i: instances[i] for i in instances.ids}
        swapped[a], swapped[b] = swapped[b], swapped[a]
        from .canvas import InstanceSet

        instances = InstanceSet(swapped)
    spec = training_spec(record)
    cond = build_conditions(model, spec, instances, record.sketches, record.caption)
    return sample(model, cond, record.sketches.frames.shape[0], seed=seed, num_steps=num_steps)


def sprite_region_masks(record: SampleRecord) -> list[np.ndarray]:
    """Per-sprite boolean masks (T, H, W), re-rendered from the script."""
    script = record.script
    frames = record.frames.frames.shape[0]
    out = []
    for sprite in script.sprites:
        m = np.stack(
            [
                sprite_mask(sprite, *sprite_center(sprite, t), script.height, script.width)
                for t in range(frames)
            ]
        )
        out.append(m)
    return out


def region_mean_color(video: PixelVideo, region: np.ndarray) -> np.ndarray:
    pixels = video.frames[region]
    return pixels.mean(axis=0) if len(pixels) else np.zeros(3)


def color_accuracy(records, videos) -> tuple[int, int]:
    """Count instances whose generated sprite-region mean color lands within
    the RGB distance threshold of the reference fill color."""
    hits, total = 0, 0
    for record, video in zip(records, videos):
        for sprite, region in zip(record.script.sprites, sprite_region_masks(record)):
            ref = np.array(SPRITE_COLORS[sprite.color]) / 255.0
            mean = region_mean_color(video, region)
            if np.linalg.norm(mean - ref) < COLOR_DISTANCE_THRESHOLD:
                hits += 1
            total += 1
    return hits, total


def swap_flip_rate(records, normal_videos, swapped_videos) -> tuple[int, int]:
    """Count swap pairs where the nearest-color assignment of the two sprite
    regions flips between the normal and the swapped generation."""
    flips, total = 0, 0
    for record, normal, swapped in zip(records, normal_videos, swapped_videos):
        sprites = record.script.sprites
        if len(sprites) != 2:
            continue
        colors = [np.array(SPRITE_COLORS[s.color]) / 255.0 for s in sprites]
        regions = sprite_region_masks(record)

        def assignment(video):
            out = []
            for region in regions:
                mean = region_mean_color(video, region)
                out.append(int(np.argmin([np.linalg.norm(mean - c) for c in colors])))
            return out

        if assignment(normal) == [0, 1] and assignment(swapped) == [1, 0]:
            flips += 1
        total += 1
    return flips, total


def mean_frame_ssim(records, videos) -> float:
    values = []
    for record, video in zip(records, videos):
        truth = record.frames.frames
        for t in range(truth.shape[0]):
            values.append(ssim(video.frames[t], truth[t]))
    return float(np.mean(values))
