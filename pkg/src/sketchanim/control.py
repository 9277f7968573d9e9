"""Adaptive decoupled condition control.

Each condition modality (background, instances, text) gets its own
cross-attention expert; their outputs are combined by non-negative
per-condition weights, and a zero-initialized tanh gate blends the result
back into the backbone hidden states. The background weight is frozen
during training; every weight can be overridden per request at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .encoders import (
    MODALITY_BACKGROUND,
    MODALITY_INSTANCE,
    MODALITY_TEXT,
    ProjectedFeature,
)


@dataclass
class ConditionWeights:
    """Non-negative scalars scaling each expert branch."""

    bg: torch.Tensor
    text: torch.Tensor
    instances: list[torch.Tensor] = field(default_factory=list)

    def as_floats(self) -> dict:
        return {
            "bg": float(self.bg),
            "text": float(self.text),
            "inst": [float(w) for w in self.instances],
        }


@dataclass
class ConditionBundle:
    """Projected per-modality features plus their combination weights."""

    bg: ProjectedFeature
    text: ProjectedFeature
    instances: list[ProjectedFeature] = field(default_factory=list)
    weights: ConditionWeights | None = None

    def __post_init__(self):
        if self.weights is not None and len(self.weights.instances) != len(self.instances):
            raise ValueError(
                f"{len(self.weights.instances)} instance weights for "
                f"{len(self.instances)} instance features"
            )


def set_weights(bundle: ConditionBundle, overrides: dict) -> ConditionBundle:
    """Return a copy of the bundle with some weights replaced.

    Override keys: "bg", "text", and "inst" (a {index: value} map). The
    frozen-in-training background weight may be overridden here; this is an
    inference-time dial and never touches stored parameters.
    """
    w = bundle.weights
    new_bg, new_text = w.bg, w.text
    new_inst = list(w.instances)
    for key, value in overrides.items():
        if key == "bg":
            new_bg = _check_weight("bg", value)
        elif key == "text":
            new_text = _check_weight("text", value)
        elif key == "inst":
            for idx, v in value.items():
                idx = int(idx)
                if not 0 <= idx < len(new_inst):
                    raise ValueError(f"instance weight index {idx} out of range")
                new_inst[idx] = _check_weight(f"inst[{idx}]", v)
        else:
            raise ValueError(f"unknown weight override key {key!r}")
    return replace(
        bundle, weights=ConditionWeights(bg=new_bg, text=new_text, instances=new_inst)
    )


def _check_weight(name, value) -> torch.Tensor:
    value = float(value)
    if value < 0:
        raise ValueError(f"condition weight {name} must be >= 0, got {value}")
    return torch.tensor(value)


class ConditionWeightStore(nn.Module):
    """Learnable weight vector shared by every backbone block.

    bg_weight never receives optimizer updates (requires_grad=False); the
    per-instance weights live in a fixed-size store sliced per sample, so
    the instance count may vary without retraining.
    """

    def __init__(self, max_instances: int = 8):
        super().__init__()
        self.max_instances = max_instances
        self.bg_weight = nn.Parameter(torch.tensor(1.0), requires_grad=False)
        self.text_weight = nn.Parameter(torch.tensor(1.0))
        self.instance_weights = nn.Parameter(torch.ones(max_instances))

    def bundle_weights(self, num_instances: int) -> ConditionWeights:
        inst = [
            self.instance_weights[i]
            if i < self.max_instances
            else torch.tensor(1.0, dtype=self.instance_weights.dtype)
            for i in range(num_instances)
        ]
        return ConditionWeights(bg=self.bg_weight, text=self.text_weight, instances=inst)

    def clamp_non_negative(self):
        with torch.no_grad():
            self.text_weight.clamp_(min=0.0)
            self.instance_weights.clamp_(min=0.0)


class CrossAttentionBranch(nn.Module):
    """One condition expert: hidden states query a feature's tokens."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.to_q = nn.Linear(width, width)
        self.to_k = nn.Linear(width, width)
        self.to_v = nn.Linear(width, width)
        self.to_out = nn.Linear(width, width)

    def forward(self, hidden: torch.Tensor, feature_tokens: torch.Tensor) -> torch.Tensor:
        if feature_tokens.shape[-1] != hidden.shape[-1]:
            raise ValueError(
                f"feature width {feature_tokens.shape[-1]} does not match "
                f"hidden width {hidden.shape[-1]}"
            )
        lq = hidden.shape[0]
        lk = feature_tokens.shape[0]
        q = self.to_q(hidden).view(lq, self.heads, self.head_dim).transpose(0, 1)
        k = self.to_k(feature_tokens).view(lk, self.heads, self.head_dim).transpose(0, 1)
        v = self.to_v(feature_tokens).view(lk, self.heads, self.head_dim).transpose(0, 1)
        probs = torch.softmax(q @ k.transpose(1, 2) / self.head_dim**0.5, dim=-1)
        out = (probs @ v).transpose(0, 1).reshape(lq, -1)
        return self.to_out(out)


class ConditionExperts(nn.Module):
    """Weighted sum of the three expert branches.

    The instance branch has a single weight set reused for every instance;
    only the scalar weights are per-instance.
    """

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        self.bg_branch = CrossAttentionBranch(width, heads)
        self.inst_branch = CrossAttentionBranch(width, heads)
        self.text_branch = CrossAttentionBranch(width, heads)

    def forward(self, hidden: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        w = bundle.weights
        out = w.bg * self.bg_branch(hidden, bundle.bg.tokens)
        for weight, feat in zip(w.instances, bundle.instances):
            out = out + weight * self.inst_branch(hidden, feat.tokens)
        out = out + w.text * self.text_branch(hidden, bundle.text.tokens)
        return out


class ConditionGate(nn.Module):
    """H' = H + tanh(g) * H_attn with g zero-initialized.

    At initialization the gate is exactly the identity, so untrained blocks
    leave the backbone path untouched.
    """

    def __init__(self):
        super().__init__()
        self.gain = nn.Parameter(torch.tensor(0.0))

    def forward(self, hidden: torch.Tensor, attn_hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape != attn_hidden.shape:
            raise ValueError(
                f"hidden {tuple(hidden.shape)} and attention output "
                f"{tuple(attn_hidden.shape)} shapes differ"
            )
        return hidden + torch.tanh(self.gain) * attn_hidden
