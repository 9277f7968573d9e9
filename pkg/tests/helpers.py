"""Shared test utilities: micro configurations, parameter jitter, and
finite-difference gradient checking against the real training loss."""

import numpy as np
import torch

from sketchanim.backbone import Conditions, Denoiser, ModelConfig
from sketchanim.control import ConditionBundle
from sketchanim.data_factory import generate_sample
from sketchanim.encoders import (
    MODALITY_BACKGROUND,
    MODALITY_INSTANCE,
    MODALITY_TEXT,
    ProjectedFeature,
)
from sketchanim.training import compute_loss, prepare_sample


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        frames=2,
        height=8,
        width=8,
        codec_factor=4,
        hidden_dim=16,
        blocks=2,
        heads=2,
        instance_px=4,
        semantic_dim=8,
        semantic_tokens=2,
        text_buckets=512,
        max_instances=4,
        schedule_steps=50,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_model(seed=0, dtype=None, **overrides) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(micro_config(**overrides))
    if dtype is not None:
        model = model.to(dtype)
    return model


def micro_record(seed=0, frames=2, sprites=1, size=8):
    return generate_sample(
        seed, 0, width=size, height=size, frames=frames,
        min_sprites=sprites, max_sprites=sprites,
    )


def jitter_parameters(model, seed=0, scale=0.05):
    """Randomize every parameter so gradients flow through all paths
    (fresh models have zero-initialized heads and gates)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float32).to(p.dtype) * scale)


def random_conditions(model, seed=0, n_instances=2, frames=None):
    """Raw Conditions with random streams and a directly built bundle."""
    cfg = model.config
    frames = frames or cfg.frames
    rng = np.random.default_rng(seed)
    shape = (frames, cfg.latent_h, cfg.latent_w, cfg.latent_channels)
    side = cfg.instance_px // cfg.codec_factor
    as_t = lambda a: torch.tensor(a, dtype=model.dtype)
    feat = lambda k, m: ProjectedFeature(as_t(rng.normal(size=(k, cfg.hidden_dim))), m)
    bundle = ConditionBundle(
        bg=feat(3, MODALITY_BACKGROUND),
        text=feat(2, MODALITY_TEXT),
        instances=[feat(4, MODALITY_INSTANCE) for _ in range(n_instances)],
        weights=model.weight_store.bundle_weights(n_instances),
    )
    return Conditions(
        sketch=as_t(rng.normal(size=shape)),
        canvas=as_t(rng.normal(size=shape)),
        instance_latents=[
            as_t(rng.normal(size=(side, side, cfg.latent_channels)))
            for _ in range(n_instances)
        ],
        bundle=bundle,
    )


def gradient_check(model, prep, t, eps, coords_per_tensor=3, h=1e-4, seed=0):
    """Compare analytic parameter gradients of the training loss against
    central finite differences; returns the worst relative error."""
    model.zero_grad()
    loss = compute_loss(model, prep, t, eps)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for name, param in named:
        if param.grad is None:
            continue
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
        for idx in picks:
            idx = int(idx)
            original = flat[idx].item()
            step = h * max(1.0, abs(original))
            with torch.no_grad():
                flat[idx] = original + step
                plus = float(compute_loss(model, prep, t, eps))
                flat[idx] = original - step
                minus = float(compute_loss(model, prep, t, eps))
                flat[idx] = original
            fd = (plus - minus) / (2 * step)
            an = grad[idx].item()
            denom = max(abs(fd), abs(an))
            if denom < 1e-7:
                continue
            rel = abs(fd - an) / denom
            worst = max(worst, rel)
    return worst


def micro_prepared(model, record=None, seed=0):
    record = record or micro_record(seed=seed, frames=model.config.frames)
    return prepare_sample(model, record)
