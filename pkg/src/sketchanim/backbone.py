"""Denoising transformer, noise schedule, and ancestral sampler.

The denoiser consumes channel-fused (noise || sketch || canvas) latent
cells as joint tokens plus one token group per reference instance, and
runs them through blocks of {instance-grouped self-attention, gated
condition-expert cross-attention, feed-forward}, each pre-normalized and
modulated by the timestep embedding. The output head regresses the noise
at every position; only joint positions are read back as the prediction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .attention import InstanceAwareAttention, TokenSequence
from .canvas import (
    CanvasSpec,
    InstanceImage,
    InstanceSet,
    build_condition_stream,
    _nearest_indices,
)
from .control import (
    ConditionBundle,
    ConditionExperts,
    ConditionGate,
    ConditionWeightStore,
    set_weights,
)
from .encoders import MODALITY_BACKGROUND, MODALITY_INSTANCE, ConditionEncoders
from .latent_codec import LatentVideo, PixelVideo, decode, encode, encode_image

ABLATIONS = ("full", "no_instance_attention", "no_canvas_guidance", "no_decoupled_control")
OBJECTIVES = ("epsilon", "flow")


@dataclass
class ModelConfig:
    frames: int = 16
    height: int = 64
    width: int = 64
    codec_factor: int = 4
    hidden_dim: int = 128
    blocks: int = 6
    heads: int = 4
    patch: int = 1
    instance_px: int = 16
    semantic_dim: int = 64
    semantic_tokens: int = 16
    text_buckets: int = 4096
    max_instances: int = 8
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    objective: str = "epsilon"
    attention_mode: str = "unified"
    ablation: str = "full"

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.height % self.codec_factor or self.width % self.codec_factor:
            raise ValueError("height/width must be divisible by the codec factor")
        if self.instance_px % self.codec_factor:
            raise ValueError("instance_px must be divisible by the codec factor")
        if (self.height // self.codec_factor) % self.patch or (
            self.width // self.codec_factor
        ) % self.patch:
            raise ValueError("latent grid must be divisible by the patch size")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.attention_mode not in ("unified", "per_instance"):
            raise ValueError(f"unknown attention mode {self.attention_mode!r}")

    @property
    def latent_h(self) -> int:
        return self.height // self.codec_factor

    @property
    def latent_w(self) -> int:
        return self.width // self.codec_factor

    @property
    def latent_channels(self) -> int:
        return 3 * self.codec_factor**2

    @property
    def joint_channels(self) -> int:
        # noise || sketch || canvas
        return 3 * self.latent_channels

    @property
    def tokens_per_frame(self) -> int:
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)

    @property
    def instance_token_count(self) -> int:
        side = self.instance_px // self.codec_factor
        return side * side

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class NoiseSchedule:
    """Forward-noising constants: betas and their cumulative products."""

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if (betas <= 0).any() or (betas >= 1).any():
            raise ValueError("betas must lie in (0, 1)")
        if (np.diff(betas) < 0).any():
            raise ValueError("betas must be non-decreasing")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alphas_cumprod = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def steps(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int):
        if not 0 <= t < self.steps:
            raise ValueError(f"timestep {t} out of range [0, {self.steps})")

    def add_noise(self, x0: LatentVideo, t: int, eps: np.ndarray) -> LatentVideo:
        """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
        self._check_t(t)
        eps = np.asarray(eps)
        if eps.shape != x0.data.shape:
            raise ValueError(f"noise shape {eps.shape} != latent shape {x0.data.shape}")
        ab = self.alphas_cumprod[t]
        data = np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps
        return LatentVideo(data, x0.scale_factor, frame_rate=x0.frame_rate)

    def strided_timesteps(self, num: int) -> list[int]:
        """Descending timestep subset for strided ancestral sampling."""
        num = min(max(1, num), self.steps)
        ts = np.unique(np.linspace(0, self.steps - 1, num).round().astype(int))
        return list(ts[::-1])

    def reverse_step(self, x_t, eps_hat, t: int, t_prev: int, noise=None, x0_clip=None):
        """Ancestral update from t to t_prev (t_prev < 0 means clean).

        For adjacent steps this is exactly the DDPM posterior mean plus its
        variance draw; the strided form generalizes it to timestep subsets.
        x0_clip, when set, clamps the implied clean-sample estimate to that
        range before stepping (the sampler uses the valid pixel range, which
        keeps early high-noise steps from amplifying prediction error).
        """
        self._check_t(t)
        ab_t = self.alphas_cumprod[t]
        ab_prev = 1.0 if t_prev < 0 else self.alphas_cumprod[t_prev]
        x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if x0_clip is not None:
            lo, hi = x0_clip
            x0_hat = x0_hat.clip(lo, hi) if isinstance(x0_hat, np.ndarray) else x0_hat.clamp(lo, hi)
            eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
        var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        var = max(float(var), 0.0)
        dir_coeff = math.sqrt(max(1.0 - ab_prev - var, 0.0))
        x_prev = math.sqrt(ab_prev) * x0_hat + dir_coeff * eps_hat
        if noise is not None and var > 0:
            x_prev = x_prev + math.sqrt(var) * noise
        return x_prev

    def flow_mix(self, x0: LatentVideo, t: int, eps: np.ndarray) -> LatentVideo:
        """Linear interpolation path for the flow-matching alternative."""
        self._check_t(t)
        s = t / max(self.steps - 1, 1)
        data = (1.0 - s) * x0.data + s * np.asarray(eps)
        return LatentVideo(data, x0.scale_factor, frame_rate=x0.frame_rate)


def timestep_embedding(t: int, dim: int, dtype=torch.float32, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = float(t) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=dtype)])
    return emb


def flatten_latent_tokens(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(T, H, W, C) -> (T*(H/p)*(W/p), p*p*C), row-major over (t, i, j)."""
    t, h, w, c = x.shape
    x = x.reshape(t, h // patch, patch, w // patch, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(t * (h // patch) * (w // patch), patch * patch * c)


def unflatten_latent_tokens(tokens: torch.Tensor, shape, patch: int) -> torch.Tensor:
    t, h, w, c = shape
    x = tokens.reshape(t, h // patch, w // patch, patch, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(t, h, w, c)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class DenoiserBlock(nn.Module):
    """Self-attention -> gated expert cross-attention -> feed-forward."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = InstanceAwareAttention(width, heads)
        self.norm_cross = nn.LayerNorm(width, elementwise_affine=False)
        self.experts = ConditionExperts(width, heads)
        self.gate = ConditionGate()
        self.norm_mlp = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, seq: TokenSequence, t_emb, bundle, mode: str, use_experts: bool,
                anchor_bias=None):
        sh_a, sc_a, sh_c, sc_c, sh_m, sc_m = self.ada(t_emb).chunk(6)
        h = seq.tokens
        attn_in = TokenSequence(
            _modulate(self.norm_attn(h), sh_a, sc_a), seq.joint_len, seq.group_sizes
        )
        h = h + self.attn(attn_in, mode=mode, anchor_bias=anchor_bias).tokens
        if use_experts and bundle is not None:
            jl = seq.joint_len
            joint = h[:jl]
            cross_in = _modulate(self.norm_cross(joint), sh_c, sc_c)
            attn_hidden = self.experts(cross_in, bundle)
            gated = self.gate(joint, attn_hidden)
            h = torch.cat([gated, h[jl:]], dim=0) if h.shape[0] > jl else gated
        h = h + self.mlp(_modulate(self.norm_mlp(h), sh_m, sc_m))
        return TokenSequence(h, seq.joint_len, seq.group_sizes)


@dataclass
class Conditions:
    """Everything the denoiser needs besides the noisy latent."""

    sketch: torch.Tensor  # (T', H', W', D)
    canvas: torch.Tensor  # (T', H', W', D)
    instance_latents: list[torch.Tensor] = field(default_factory=list)
    bundle: ConditionBundle | None = None


@dataclass
class DenoiseResult:
    """Head output at every token position plus the sequence structure."""

    token_out: torch.Tensor
    joint_len: int
    group_sizes: tuple[int, ...]

    def joint_tokens(self) -> torch.Tensor:
        return self.token_out[: self.joint_len]


class Denoiser(nn.Module):
    """The conditional noise predictor, including its condition encoders
    and the learnable condition-weight store (single checkpointable unit).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        width = config.hidden_dim
        self.encoders = ConditionEncoders(
            feature_dim=config.semantic_dim,
            hidden_dim=width,
            image_tokens=config.semantic_tokens,
            text_buckets=config.text_buckets,
        )
        self.weight_store = ConditionWeightStore(config.max_instances)
        in_dim = config.joint_channels * config.patch**2
        self.patch_embed = nn.Linear(in_dim, width)
        self.instance_embed = nn.Linear(config.latent_channels, width)
        # factorized position embedding: one spatial table shared by every
        # frame plus a per-frame table, so the same cell lines up across time
        self.spatial_pos = nn.Parameter(torch.zeros(config.tokens_per_frame, width))
        self.temporal_pos = nn.Parameter(torch.zeros(config.frames, width))
        self.instance_pos = nn.Parameter(torch.zeros(config.instance_token_count, width))
        self.instance_segment = nn.Parameter(torch.zeros(width))
        nn.init.normal_(self.spatial_pos, std=0.1)
        nn.init.normal_(self.temporal_pos, std=0.05)
        nn.init.normal_(self.instance_pos, std=0.02)
        nn.init.normal_(self.instance_segment, std=0.02)
        # per-head logit bias toward the same cell in other frames: the
        # canvas composite at frame 0 anchors colors for the whole clip
        self.anchor_gains = nn.Parameter(torch.linspace(0.0, 2.0, config.heads))
        self._same_cell_cache: dict = {}
        self.time_mlp = nn.Sequential(
            nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width)
        )
        self.blocks = nn.ModuleList(
            [DenoiserBlock(width, config.heads) for _ in range(config.blocks)]
        )
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False)
        self.ada_final = nn.Linear(width, 2 * width)
        nn.init.zeros_(self.ada_final.weight)
        nn.init.zeros_(self.ada_final.bias)
        self.head = nn.Linear(width, config.latent_channels * config.patch**2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # long skip from the raw fused cell to the head: layer-normed deep
        # features lose per-token magnitude, but the noise estimate needs
        # t-scaled copies of the raw noise and condition channels
        self.head_skip = nn.Linear(in_dim, config.latent_channels * config.patch**2)
        self.ada_skip = nn.Linear(width, 2 * in_dim)
        nn.init.zeros_(self.head_skip.weight)
        nn.init.zeros_(self.head_skip.bias)
        nn.init.zeros_(self.ada_skip.weight)
        nn.init.zeros_(self.ada_skip.bias)
        self.schedule = NoiseSchedule.linear(
            config.schedule_steps, config.beta_start, config.beta_end
        )

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    def _as_tensor(self, x):
        if isinstance(x, torch.Tensor):
            return x.to(self.dtype)
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def _same_cell(self, t_frames: int) -> torch.Tensor:
        key = t_frames
        if key not in self._same_cell_cache:
            cells = torch.arange(t_frames * self.config.tokens_per_frame) % (
                self.config.tokens_per_frame
            )
            self._same_cell_cache[key] = cells[:, None] == cells[None, :]
        return self._same_cell_cache[key]

    def forward(self, x_t: torch.Tensor, t: int, cond: Conditions) -> DenoiseResult:
        cfg = self.config
        x_t = self._as_tensor(x_t)
        sketch = self._as_tensor(cond.sketch)
        canvas = self._as_tensor(cond.canvas)
        if cfg.ablation == "no_canvas_guidance":
            canvas = torch.zeros_like(canvas)
        for name, ax in zip(("frames", "height", "width"), range(3)):
            if not (x_t.shape[ax] == sketch.shape[ax] == canvas.shape[ax]):
                raise ValueError(
                    f"condition streams disagree on {name}: noise={x_t.shape[ax]}, "
                    f"sketch={sketch.shape[ax]}, canvas={canvas.shape[ax]}"
                )
        t_frames, lh, lw, _ = x_t.shape
        if t_frames > cfg.frames:
            raise ValueError(f"{t_frames} frames exceed configured maximum {cfg.frames}")
        if (lh, lw) != (cfg.latent_h, cfg.latent_w):
            raise ValueError(
                f"latent grid {(lh, lw)} does not match configured "
                f"{(cfg.latent_h, cfg.latent_w)}"
            )

        # condition streams live in [0, 1]; center them so their variance is
        # commensurate with the unit-scale noise channels
        fused = torch.cat(
            [x_t, (sketch - 0.5) * 2.0, (canvas - 0.5) * 2.0], dim=-1
        )
        raw_cells = flatten_latent_tokens(fused, cfg.patch)
        tokens = self.patch_embed(raw_cells)
        pos = (self.temporal_pos[:t_frames, None, :] + self.spatial_pos[None, :, :])
        tokens = tokens + pos.reshape(-1, cfg.hidden_dim)
        joint_len = tokens.shape[0]

        group_sizes: list[int] = []
        if cfg.ablation != "no_instance_attention":
            for i, lat in enumerate(cond.instance_latents):
                lat = self._as_tensor(lat)
                cells = (lat.reshape(-1, lat.shape[-1]) - 0.5) * 2.0
                if cells.shape[0] != cfg.instance_token_count:
                    raise ValueError(
                        f"instance {i} has {cells.shape[0]} latent cells, "
                        f"expected {cfg.instance_token_count}"
                    )
                emb = self.instance_embed(cells) + self.instance_pos + self.instance_segment
                tokens = torch.cat([tokens, emb], dim=0)
                group_sizes.append(cells.shape[0])

        seq = TokenSequence(tokens, joint_len, tuple(group_sizes))
        t_emb = self.time_mlp(timestep_embedding(t, cfg.hidden_dim, dtype=self.dtype))
        use_experts = cfg.ablation != "no_decoupled_control"
        anchor_bias = (self._same_cell(t_frames), self.anchor_gains)
        for block in self.blocks:
            seq = block(seq, t_emb, cond.bundle, cfg.attention_mode, use_experts,
                        anchor_bias=anchor_bias)

        sh_f, sc_f = self.ada_final(t_emb).chunk(2)
        out = self.head(_modulate(self.final_norm(seq.tokens), sh_f, sc_f))
        sh_s, sc_s = self.ada_skip(t_emb).chunk(2)
        skip = self.head_skip(_modulate(raw_cells, sh_s, sc_s))
        out = torch.cat([out[:joint_len] + skip, out[joint_len:]], dim=0)
        return DenoiseResult(out, joint_len, tuple(group_sizes))


def predict_noise(model: Denoiser, x_t: LatentVideo, t: int, cond: Conditions) -> LatentVideo:
    """Run the denoiser and reshape the joint-token head output to x_t's shape."""
    model.schedule._check_t(t)
    with torch.no_grad():
        result = model(model._as_tensor(x_t.data), t, cond)
        eps = unflatten_latent_tokens(
            result.joint_tokens(), x_t.data.shape, model.config.patch
        )
    return LatentVideo(eps.numpy(), x_t.scale_factor, frame_rate=x_t.frame_rate)


def prepare_instance_latent(model: Denoiser, instance: InstanceImage) -> np.ndarray:
    """Resize a crop (masked content on black) to the configured square and
    encode it; every instance contributes the same number of tokens."""
    cfg = model.config
    content = np.where(instance.alpha()[..., None], instance.image, 0.0)
    h, w = content.shape[:2]
    ri = _nearest_indices(h, cfg.instance_px)
    ci = _nearest_indices(w, cfg.instance_px)
    resized = np.clip(content[ri][:, ci], 0.0, 1.0)
    return encode_image(resized, cfg.codec_factor).data[0]


def build_conditions(
    model: Denoiser,
    spec: CanvasSpec,
    instances: InstanceSet,
    sketches: PixelVideo,
    caption: str = "",
    weight_overrides: dict | None = None,
) -> Conditions:
    """Encode every condition stream for one clip.

    Instance group order follows the placement list; the background
    reference is the canvas spec's background (a blank image when absent).
    """
    cfg = model.config
    spec.validate_divisible(cfg.codec_factor)
    frames = sketches.frames.shape[0]
    stream = build_condition_stream(spec, instances, frames)
    canvas_lat = encode(stream, cfg.codec_factor)
    sketch_lat = encode(sketches, cfg.codec_factor)

    placed = [instances[p.instance_id] for p in spec.placements]
    instance_latents = [
        torch.as_tensor(prepare_instance_latent(model, inst), dtype=model.dtype)
        for inst in placed
    ]

    bg_image = spec.background
    if bg_image is None:
        bg_image = np.zeros((spec.height, spec.width, 3))
    enc = model.encoders
    bg_feat = enc.project(enc.encode_image_condition(bg_image, MODALITY_BACKGROUND))
    inst_feats = [
        enc.project(
            enc.encode_image_condition(
                np.where(inst.alpha()[..., None], inst.image, 0.0), MODALITY_INSTANCE
            )
        )
        for inst in placed
    ]
    text_feat = enc.project(enc.encode_text(caption))
    bundle = ConditionBundle(
        bg=bg_feat,
        text=text_feat,
        instances=inst_feats,
        weights=model.weight_store.bundle_weights(len(placed)),
    )
    if weight_overrides:
        bundle = set_weights(bundle, weight_overrides)
    return Conditions(
        sketch=torch.as_tensor(sketch_lat.data, dtype=model.dtype),
        canvas=torch.as_tensor(canvas_lat.data, dtype=model.dtype),
        instance_latents=instance_latents,
        bundle=bundle,
    )


def sample(
    model: Denoiser,
    cond: Conditions,
    frames: int,
    seed: int = 0,
    num_steps: int = 50,
) -> PixelVideo:
    """Ancestral sampling from pure noise under fixed conditions.

    Deterministic given the seed: one generator drives the initial draw and
    every per-step noise draw.
    """
    cfg = model.config
    shape = (frames, cfg.latent_h, cfg.latent_w, cfg.latent_channels)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen, dtype=torch.float32).to(model.dtype)
    ts = model.schedule.strided_timesteps(num_steps)
    model.eval()
    with torch.no_grad():
        if cfg.objective == "flow":
            x = _sample_flow(model, cond, x, ts)
        else:
            for i, t in enumerate(ts):
                t_prev = ts[i + 1] if i + 1 < len(ts) else -1
                eps_hat = unflatten_latent_tokens(
                    model(x, t, cond).joint_tokens(), shape, cfg.patch
                )
                noise = None
                if t_prev >= 0:
                    noise = torch.randn(shape, generator=gen, dtype=torch.float32).to(
                        model.dtype
                    )
                x = model.schedule.reverse_step(
                    x, eps_hat, t, t_prev, noise, x0_clip=(0.0, 1.0)
                )
    latent = LatentVideo(
        torch.clamp(x, 0.0, 1.0).to(torch.float64).numpy(), cfg.codec_factor
    )
    return decode(latent)


def _sample_flow(model, cond, x, ts):
    # Euler integration of the learned velocity field from s=1 to s=0
    cfg = model.config
    steps = model.schedule.steps
    shape = x.shape
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else None
        s_cur = t / max(steps - 1, 1)
        s_prev = (t_prev / max(steps - 1, 1)) if t_prev is not None else 0.0
        v_hat = unflatten_latent_tokens(model(x, t, cond).joint_tokens(), shape, cfg.patch)
        x = x - (s_cur - s_prev) * v_hat
    return x


CHECKPOINT_VERSION = 1


def save_checkpoint(model: Denoiser, path, step: int = 0, extra: dict | None = None):
    """Single-container checkpoint: named parameter arrays, config header,
    schedule constants, mandatory version field."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state": model.state_dict(),
        "schedule_betas": model.schedule.betas,
        "step": step,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    payload = torch.load(path, weights_only=False)
    if "version" not in payload:
        raise ValueError("checkpoint missing mandatory version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload['version']}")
    config = ModelConfig.from_dict(payload["config"])
    model = Denoiser(config)
    model.load_state_dict(payload["state"])
    model.schedule = NoiseSchedule(payload["schedule_betas"])
    meta = {k: payload[k] for k in ("version", "step", "extra")}
    return model, meta
