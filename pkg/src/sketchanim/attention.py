"""Instance-grouped attention.

Joint tokens (fused noise/sketch/canvas cells) interact with every instance
token group, but instance groups never see each other. Two equivalent
realizations share one weight set:

* ``unified`` — a single masked multi-head attention over all tokens
  (the default; one fused attention call).
* ``per_instance`` — joint self-attention plus an explicit per-group
  cross-attention term summed over groups; instance tokens attend over
  {joint + own group}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

# finite stand-in for -inf so softmax stays well-behaved in low precision
NEGATIVE_LOGIT = -1e9


@dataclass
class TokenSequence:
    """Joint tokens followed by contiguous instance token groups."""

    tokens: torch.Tensor
    joint_len: int
    group_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        self.group_sizes = tuple(int(g) for g in self.group_sizes)
        if self.joint_len < 1:
            raise ValueError("need at least one joint token")
        if any(g < 1 for g in self.group_sizes):
            raise ValueError(f"instance groups must be non-empty, got {self.group_sizes}")
        expected = self.joint_len + sum(self.group_sizes)
        if self.tokens.shape[0] != expected:
            raise ValueError(
                f"token count {self.tokens.shape[0]} does not match "
                f"joint {self.joint_len} + groups {self.group_sizes}"
            )

    @property
    def total_len(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_groups(self) -> int:
        return len(self.group_sizes)

    def segment_map(self) -> np.ndarray:
        """Per-token segment label: 0 for joint, i >= 1 for instance group i."""
        labels = np.zeros(self.total_len, dtype=np.int64)
        start = self.joint_len
        for i, g in enumerate(self.group_sizes, start=1):
            labels[start : start + g] = i
            start += g
        return labels

    def group_slices(self) -> list[slice]:
        slices, start = [], self.joint_len
        for g in self.group_sizes:
            slices.append(slice(start, start + g))
            start += g
        return slices


def build_mask(joint_len: int, group_sizes) -> torch.Tensor:
    """Boolean (L_total, L_total) matrix of allowed attention pairs.

    Joint tokens see everything; each instance group sees the joint tokens
    and itself, never another group.
    """
    group_sizes = tuple(int(g) for g in group_sizes)
    if joint_len < 1:
        raise ValueError("joint token count must be >= 1")
    if any(g < 1 for g in group_sizes):
        raise ValueError(f"instance groups must be non-empty, got {group_sizes}")
    total = joint_len + sum(group_sizes)
    allowed = torch.zeros(total, total, dtype=torch.bool)
    allowed[:joint_len, :] = True
    allowed[:, :joint_len] = True
    start = joint_len
    for g in group_sizes:
        allowed[start : start + g, start : start + g] = True
        start += g
    return allowed


def loss_mask(seq: TokenSequence) -> np.ndarray:
    """True at joint positions; instance tokens are excluded from the loss."""
    return seq.segment_map() == 0


def _masked_softmax(scores: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    scores = scores.masked_fill(~allowed, NEGATIVE_LOGIT)
    return torch.softmax(scores, dim=-1)


class InstanceAwareAttention(nn.Module):
    """Multi-head attention with the instance-grouped mask."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.to_q = nn.Linear(width, width)
        self.to_k = nn.Linear(width, width)
        self.to_v = nn.Linear(width, width)
        self.to_out = nn.Linear(width, width)

    def _split_heads(self, x):
        return x.view(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def _attend(self, q, k, v, allowed=None, bias=None):
        scores = q @ k.transpose(1, 2) / self.head_dim**0.5
        if bias is not None:
            scores = scores + bias
        if allowed is not None:
            probs = _masked_softmax(scores, allowed)
        else:
            probs = torch.softmax(scores, dim=-1)
        return probs @ v

    def forward(self, seq: TokenSequence, mode: str = "unified", anchor_bias=None) -> TokenSequence:
        """anchor_bias, when given, is (bool (L, L) same-cell matrix, per-head
        gains); it biases joint-to-joint logits only and leaves every
        instance interaction untouched."""
        if mode not in ("unified", "per_instance"):
            raise ValueError(f"unknown attention mode {mode!r}")
        q = self._split_heads(self.to_q(seq.tokens))
        k = self._split_heads(self.to_k(seq.tokens))
        v = self._split_heads(self.to_v(seq.tokens))
        jl = seq.joint_len
        joint_bias = None
        if anchor_bias is not None:
            same_cell, gains = anchor_bias
            joint_bias = gains.view(-1, 1, 1) * same_cell.to(q.dtype)

        if mode == "unified":
            allowed = build_mask(jl, seq.group_sizes).to(seq.tokens.device)
            scores = q @ k.transpose(1, 2) / self.head_dim**0.5
            if joint_bias is not None:
                scores[:, :jl, :jl] = scores[:, :jl, :jl] + joint_bias
            ctx = _masked_softmax(scores, allowed) @ v
        else:
            ctx = torch.zeros_like(q)
            # joint queries: self-attention over joint keys, plus one
            # softmax per instance group, summed without extra weights
            joint_ctx = self._attend(q[:, :jl], k[:, :jl], v[:, :jl], bias=joint_bias)
            for sl in seq.group_slices():
                joint_ctx = joint_ctx + self._attend(q[:, :jl], k[:, sl], v[:, sl])
            ctx[:, :jl] = joint_ctx
            # instance queries: attend over {joint + own group}
            for sl in seq.group_slices():
                keys = torch.cat([k[:, :jl], k[:, sl]], dim=1)
                vals = torch.cat([v[:, :jl], v[:, sl]], dim=1)
                ctx[:, sl] = self._attend(q[:, sl], keys, vals)

        out = ctx.transpose(0, 1).reshape(seq.total_len, self.width)
        out = self.to_out(out)
        return TokenSequence(tokens=out, joint_len=jl, group_sizes=seq.group_sizes)
