"""Conditional masked denoiser over plan slots.

A small pre-norm transformer runs self-attention over the ``n_max`` slot
embeddings, cross-attention into encoded prompt states, and a feed-forward
sublayer.  Masked slots are substituted with a learned mask embedding before
the forward pass.  Two heads read the final states: a linear head predicting
clean slot embeddings and a logistic head predicting per-slot stop
probabilities.  Reverse-process steps are injected as a learned step
embedding added to every slot input, and padded slots are attention-masked
out so zero rows never leak signal.

forward and reverse_mean are pure with respect to parameters: any number of
rollouts may evaluate a frozen snapshot concurrently, while updates remain
single-writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters for the denoiser stack."""

    n_max: int = 16
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_prompt_len: int = 128
    t_steps: int = 8

    def __post_init__(self) -> None:
        if self.d % self.n_heads != 0:
            raise ValueError("model dim must divide evenly across heads")
        if self.t_steps < 1:
            raise ValueError("reverse process needs at least one step")


#: Named model presets.  "paper-scale" mirrors a 22-layer, d=2048 stack and is
#: intentionally never exercised in tests.
PRESETS: dict[str, DenoiserConfig] = {
    "desk": DenoiserConfig(),
    "tiny": DenoiserConfig(n_max=8, d=32, n_layers=2, n_heads=2, d_ff=64, t_steps=4),
    "paper-scale": DenoiserConfig(
        n_max=16, d=2048, n_layers=22, n_heads=32, d_ff=4096, max_prompt_len=512, t_steps=8
    ),
}


@dataclass(frozen=True)
class DiffusionSchedule:
    """Reverse-process noise schedule: sigma_t = sigma_max * t / T."""

    t_steps: int = 8
    sigma_max: float = 0.1

    def __post_init__(self) -> None:
        if self.t_steps < 1:
            raise ValueError("schedule needs T >= 1")
        if not self.sigma_max > 0:
            raise ValueError("sigma_max must be positive")

    def sigma(self, t: int) -> float:
        if not 1 <= t <= self.t_steps:
            raise ValueError(f"step {t} outside [1, {self.t_steps}]")
        return self.sigma_max * t / self.t_steps


@dataclass(frozen=True)
class MaskSpec:
    """Index set of slots to corrupt, with the rate that produced it."""

    indices: tuple[int, ...]
    rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("mask rate must lie in [0, 1]")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("mask indices must be unique")


def sample_mask(s: torch.Tensor, rate: float, rng: np.random.Generator) -> MaskSpec:
    """Include each active slot independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    active = torch.nonzero(s > 0, as_tuple=False).flatten().tolist()
    draws = rng.random(len(active))
    indices = tuple(idx for idx, u in zip(active, draws) if u < rate)
    return MaskSpec(indices=indices, rate=rate)


class MultiHeadAttention(nn.Module):
    """Standard scaled dot-product attention with an additive key mask."""

    def __init__(self, d: int, n_heads: int, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.q_proj = nn.Linear(d, d, dtype=dtype)
        self.k_proj = nn.Linear(d, d, dtype=dtype)
        self.v_proj = nn.Linear(d, d, dtype=dtype)
        self.out_proj = nn.Linear(d, d, dtype=dtype)

    def forward(
        self,
        query: torch.Tensor,
        keyvalue: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
        logit_bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, tq, d = query.shape
        tk = keyvalue.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(query).view(b, tq, h, hd).transpose(1, 2)
        k = self.k_proj(keyvalue).view(b, tk, h, hd).transpose(1, 2)
        v = self.v_proj(keyvalue).view(b, tk, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if logit_bias is not None:
            # logit_bias: [h, tq, tk] learned additive position bias
            scores = scores + logit_bias[None, :, :, :]
        if key_mask is not None:
            # key_mask: [b, tk] bool, True where the key is attendable
            bias = torch.where(key_mask, 0.0, -1e9).to(scores.dtype)
            scores = scores + bias[:, None, None, :]
        if causal:
            future = torch.triu(torch.ones(tq, tk, dtype=torch.bool, device=scores.device), diagonal=1)
            scores = scores.masked_fill(future, -1e9)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    """Position-wise GELU MLP."""

    def __init__(self, d: int, d_ff: int, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.fc1 = nn.Linear(d, d_ff, dtype=dtype)
        self.fc2 = nn.Linear(d_ff, d, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class CrossBlock(nn.Module):
    """Pre-norm block: slot self-attention, prompt cross-attention, MLP.

    Cross-attention carries a learned per-head (slot, prompt-position) logit
    bias so slot-to-segment routing has a direct parameter path instead of
    relying on content projections to align two positional codebooks.
    """

    def __init__(
        self,
        d: int,
        n_heads: int,
        d_ff: int,
        n_max: int,
        max_prompt_len: int,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.self_attn = MultiHeadAttention(d, n_heads, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, n_heads, dtype=dtype)
        self.cross_bias = nn.Parameter(torch.zeros(n_heads, n_max, max_prompt_len, dtype=dtype))
        self.ffn = FeedForward(d, d_ff, dtype=dtype)
        self.norm1 = nn.LayerNorm(d, dtype=dtype)
        self.norm2 = nn.LayerNorm(d, dtype=dtype)
        self.norm3 = nn.LayerNorm(d, dtype=dtype)

    def forward(
        self,
        x: torch.Tensor,
        slot_mask: torch.Tensor | None,
        prompt: torch.Tensor,
        prompt_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, key_mask=slot_mask)
        m = prompt.shape[1]
        x = x + self.cross_attn(
            self.norm2(x), prompt, key_mask=prompt_mask, logit_bias=self.cross_bias[:, :, :m]
        )
        x = x + self.ffn(self.norm3(x))
        return x


class Denoiser(nn.Module):
    """Masked slot denoiser with clean-embedding and stop-probability heads."""

    def __init__(self, config: DenoiserConfig, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.config = config
        d = config.d
        self.mask_embedding = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.slot_pos = nn.Parameter(torch.zeros(config.n_max, d, dtype=dtype))
        self.prompt_pos = nn.Parameter(torch.zeros(config.max_prompt_len, d, dtype=dtype))
        # index 0 is the no-step (pretraining) condition; 1..T are reverse steps
        self.step_embedding = nn.Embedding(config.t_steps + 1, d, dtype=dtype)
        self.prompt_norm = nn.LayerNorm(d, dtype=dtype)
        self.blocks = nn.ModuleList(
            CrossBlock(
                d, config.n_heads, config.d_ff, config.n_max, config.max_prompt_len, dtype=dtype
            )
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(d, dtype=dtype)
        self.out_head = nn.Linear(d, d, dtype=dtype)
        self.stop_head = nn.Linear(d, 1, dtype=dtype)

    @property
    def t_steps(self) -> int:
        return self.config.t_steps

    def reset_parameters(self, gen: torch.Generator) -> None:
        """Seeded init: scaled Gaussian linear weights, unit norms, zero biases."""
        init_transformer_params(self, gen)
        d = self.config.d
        with torch.no_grad():
            for p in (self.mask_embedding, self.slot_pos, self.prompt_pos):
                p.normal_(0.0, d**-0.5, generator=gen)
            for block in self.blocks:
                block.cross_bias.zero_()
            # zero so that conditioning on a step is a no-op until tuned;
            # reverse rollouts then start exactly at the pretrained denoiser
            self.step_embedding.weight.zero_()

    def forward(
        self,
        vt: torch.Tensor,
        prompt: torch.Tensor,
        slot_mask: torch.Tensor | None = None,
        prompt_mask: torch.Tensor | None = None,
        step: torch.Tensor | int | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict clean embeddings and stop probabilities.

        vt: [b, n_max, d] corrupted plan; prompt: [b, m, d] prompt states;
        slot_mask/prompt_mask: bool, True where attendable; step: reverse-step
        index per element (0 or None means the stepless pretraining condition).
        Returns (v0_hat [b, n_max, d], s_hat [b, n_max] in (0, 1)).
        """
        if vt.ndim != 3 or vt.shape[1] != self.config.n_max or vt.shape[2] != self.config.d:
            raise ValueError(
                f"expected plan batch [b, {self.config.n_max}, {self.config.d}], got {tuple(vt.shape)}"
            )
        if prompt.ndim != 3 or prompt.shape[2] != self.config.d:
            raise ValueError(f"expected prompt batch [b, m, {self.config.d}], got {tuple(prompt.shape)}")
        if prompt.shape[1] > self.config.max_prompt_len:
            raise ValueError(
                f"prompt length {prompt.shape[1]} exceeds maximum {self.config.max_prompt_len}"
            )
        b, m = prompt.shape[0], prompt.shape[1]
        x = vt + self.slot_pos[None, :, :]
        if step is not None:
            if isinstance(step, int):
                step = torch.full((b,), step, dtype=torch.long, device=vt.device)
            if torch.any(step < 0) or torch.any(step > self.config.t_steps):
                raise ValueError("step index outside [0, T]")
            x = x + self.step_embedding(step)[:, None, :]
        p = self.prompt_norm(prompt + self.prompt_pos[None, :m, :])
        for block in self.blocks:
            x = block(x, slot_mask, p, prompt_mask)
        x = self.final_norm(x)
        v0_hat = self.out_head(x)
        # clamp keeps confident predictions off exact 0/1 so log-loss stays finite
        s_hat = torch.sigmoid(self.stop_head(x).squeeze(-1)).clamp(1e-6, 1.0 - 1e-6)
        return v0_hat, s_hat


def init_transformer_params(module: nn.Module, gen: torch.Generator) -> None:
    """Seeded init for every Linear/LayerNorm in a module tree."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                sub.weight.normal_(0.0, sub.in_features**-0.5, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


def apply_mask(plan_v: torch.Tensor, stop_mask: torch.Tensor, spec: MaskSpec, model: Denoiser) -> torch.Tensor:
    """Replace the rows named by ``spec`` with the learned mask embedding.

    Masking a padded slot is an error; all other rows are copied unchanged.
    """
    if plan_v.ndim != 2:
        raise ValueError("apply_mask operates on a single [n_max, d] plan")
    out = plan_v.clone()
    for idx in spec.indices:
        if idx < 0 or idx >= plan_v.shape[0]:
            raise IndexError(f"mask index {idx} outside plan")
        if stop_mask[idx] <= 0:
            raise ValueError(f"mask index {idx} refers to a padded slot")
        out[idx] = model.mask_embedding
    return out


def reverse_mean(
    model: Denoiser,
    vt: torch.Tensor,
    prompt: torch.Tensor,
    t: int,
    slot_mask: torch.Tensor,
    prompt_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Gaussian center for the next reverse state: the clean-embedding head at step t.

    Padded slot rows are forced to zero so they are never sampled.
    """
    if not 1 <= t <= model.config.t_steps:
        raise ValueError(f"reverse step {t} outside [1, {model.config.t_steps}]")
    v0_hat, _ = model(vt, prompt, slot_mask=slot_mask, prompt_mask=prompt_mask, step=t)
    return v0_hat * slot_mask.to(v0_hat.dtype)[:, :, None]
