"""Masked-reconstruction pretraining of the denoiser.

Each step draws a masking rate per batch element, corrupts the active slots,
and optimizes reconstruction over masked positions plus a weighted BCE stop
loss.  Reconstruction targets are treated as data (detached), so the
projection learns only through the conditioning path.  The loop is
single-writer and bitwise reproducible given (seed, config) on one thread.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .plans import EncoderInterface, pool, pool_prompt_segments
from .denoiser import Denoiser
from .seeding import numpy_rng

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces NaN or infinite loss."""

    def __init__(self, message: str, diagnostics: dict) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class PretrainConfig:
    """Stage I hyperparameters."""

    lambda_stop: float = 0.1
    batch_size: int = 64
    steps: int = 2000
    lr: float = 6e-3
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.lambda_stop < 0:
            raise ValueError("lambda_stop must be non-negative")
        if self.steps < 1:
            raise ValueError("step budget must be at least 1")


@dataclass(frozen=True)
class PretrainExample:
    """One corpus item: prompt tokens plus gold plan span tokens."""

    prompt_tokens: tuple[int, ...]
    spans: tuple[tuple[int, ...], ...]


@dataclass
class CachedExample:
    """Frozen-encoder states for one example, computed once up front."""

    pooled_spans: torch.Tensor  # [n, d_e]
    prompt_states: torch.Tensor  # [m, d_e]
    n: int


@dataclass
class PretrainReport:
    """Loss trajectory and summary statistics of one pretraining run."""

    rows: list[dict] = field(default_factory=list)
    empty_mask_batches: int = 0

    @property
    def initial_loss(self) -> float:
        head = [r["total"] for r in self.rows[:20]]
        return float(np.mean(head)) if head else float("nan")

    @property
    def final_loss(self) -> float:
        tail = [r["total"] for r in self.rows[-100:]]
        return float(np.mean(tail)) if tail else float("nan")


def recon_loss(v0_hat: torch.Tensor, v0: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Squared L2 over masked rows, normalized by the masked count across the batch.

    An all-empty mask is defined as zero loss (counted by the caller).
    """
    if v0_hat.shape != v0.shape:
        raise ValueError("prediction and target shapes differ")
    if masked.shape != v0_hat.shape[:-1]:
        raise ValueError("mask shape must match slot layout")
    count = int(masked.sum().item())
    if count == 0:
        return v0_hat.new_zeros(())
    sq = ((v0_hat - v0) ** 2).sum(dim=-1)
    return (sq * masked.to(sq.dtype)).sum() / count


def stop_loss(s_hat: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over every slot, active and padded."""
    if torch.any(s_hat <= 0) or torch.any(s_hat >= 1):
        raise ValueError("stop probabilities must lie strictly in (0, 1)")
    target = s.to(s_hat.dtype)
    return -(target * torch.log(s_hat) + (1 - target) * torch.log(1 - s_hat)).mean()


def cache_corpus(corpus: Sequence[PretrainExample], enc: EncoderInterface) -> list[CachedExample]:
    """Run the frozen encoder once per example; only the projection varies later."""
    cached = []
    for ex in corpus:
        pooled = torch.stack([pool(enc.embed(span)) for span in ex.spans])
        cached.append(
            CachedExample(
                pooled_spans=pooled,
                prompt_states=pool_prompt_segments(ex.prompt_tokens, enc),
                n=len(ex.spans),
            )
        )
    return cached


def assemble_batch(
    items: Sequence[CachedExample],
    proj: nn.Linear,
    model: Denoiser,
    rates: np.ndarray,
    rng: np.random.Generator,
) -> dict:
    """Build corrupted inputs, targets, and masks for one optimizer step."""
    n_max = model.config.n_max
    b = len(items)
    dtype = proj.weight.dtype
    m_max = max(ex.prompt_states.shape[0] for ex in items)

    targets = torch.zeros(b, n_max, model.config.d, dtype=dtype)
    stop = torch.zeros(b, n_max, dtype=dtype)
    masked = torch.zeros(b, n_max, dtype=torch.bool)
    prompt_raw = torch.zeros(b, m_max, items[0].prompt_states.shape[1], dtype=dtype)
    prompt_mask = torch.zeros(b, m_max, dtype=torch.bool)

    rows_attached = []
    for i, ex in enumerate(items):
        rows = proj(ex.pooled_spans.to(dtype))
        rows_attached.append(rows)
        targets[i, : ex.n] = rows.detach()
        stop[i, : ex.n] = 1.0
        masked[i, : ex.n] = torch.from_numpy(rng.random(ex.n) < rates[i])
        m = ex.prompt_states.shape[0]
        prompt_raw[i, :m] = ex.prompt_states.to(dtype)
        prompt_mask[i, :m] = True

    vt = torch.zeros(b, n_max, model.config.d, dtype=dtype)
    for i, rows in enumerate(rows_attached):
        keep = ~masked[i, : items[i].n]
        vt[i, : items[i].n] = torch.where(keep[:, None], rows, model.mask_embedding.to(dtype))

    prompt = proj(prompt_raw)
    return {
        "vt": vt,
        "targets": targets,
        "stop": stop,
        "masked": masked,
        "prompt": prompt,
        "prompt_mask": prompt_mask,
        "slot_mask": stop > 0,
    }


def pretrain_step(
    model: Denoiser,
    proj: nn.Linear,
    optimizer: torch.optim.Optimizer,
    batch: dict,
    cfg: PretrainConfig,
) -> dict:
    """One optimizer update; returns the loss parts measured before the update."""
    v0_hat, s_hat = model(
        batch["vt"], batch["prompt"], slot_mask=batch["slot_mask"], prompt_mask=batch["prompt_mask"]
    )
    l_recon = recon_loss(v0_hat, batch["targets"], batch["masked"])
    l_stop = stop_loss(s_hat, batch["stop"])
    total = l_recon + cfg.lambda_stop * l_stop
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            "non-finite pretraining loss",
            diagnostics={
                "recon": float(l_recon.item()),
                "stop": float(l_stop.item()),
                "masked_count": int(batch["masked"].sum().item()),
            },
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {
        "recon": float(l_recon.item()),
        "stop": float(l_stop.item()),
        "total": float(total.item()),
        "masked_count": int(batch["masked"].sum().item()),
    }


def train(
    model: Denoiser,
    proj: nn.Linear,
    enc: EncoderInterface,
    corpus: Sequence[PretrainExample],
    cfg: PretrainConfig,
    root_seed: int,
    on_checkpoint: Callable[[int], None] | None = None,
    on_row: Callable[[dict], None] | None = None,
) -> PretrainReport:
    """Run the Stage I loop over a fixed corpus."""
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    cached = cache_corpus(corpus, enc)
    optimizer = torch.optim.Adam(
        list(model.parameters()) + list(proj.parameters()), lr=cfg.lr
    )
    rng = numpy_rng(root_seed, "pretrain")
    report = PretrainReport()
    model.train()
    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(cached), size=cfg.batch_size)
        rates = rng.random(cfg.batch_size)
        batch = assemble_batch([cached[i] for i in picks], proj, model, rates, rng)
        parts = pretrain_step(model, proj, optimizer, batch, cfg)
        if parts["masked_count"] == 0:
            report.empty_mask_batches += 1
            logger.warning("step %d: batch masked no slots, reconstruction loss is 0", step)
        row = {"step": step, **{k: parts[k] for k in ("recon", "stop", "total")}}
        report.rows.append(row)
        if on_row is not None and (step % cfg.log_every == 0 or step == 1 or step == cfg.steps):
            on_row(row)
        if on_checkpoint is not None and cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
            on_checkpoint(step)
    model.eval()
    return report


def eval_masked_recovery(
    model: Denoiser,
    proj: nn.Linear,
    enc: EncoderInterface,
    corpus: Sequence[PretrainExample],
    root_seed: int,
    rate: float = 0.5,
    sample: int = 128,
) -> dict:
    """Mean cosine between predicted and true embeddings on masked slots.

    Also reports stop-head accuracy at the 0.5 decision threshold.
    """
    cached = cache_corpus(corpus, enc)
    rng = numpy_rng(root_seed, "pretrain-eval")
    picks = rng.integers(0, len(cached), size=min(sample, max(len(cached), 1)))
    rates = np.full(len(picks), rate)
    model.eval()
    with torch.no_grad():
        batch = assemble_batch([cached[i] for i in picks], proj, model, rates, rng)
        # guarantee at least one masked slot per element for a defined metric
        for i in range(len(picks)):
            if not batch["masked"][i].any():
                first_active = int(torch.nonzero(batch["slot_mask"][i]).flatten()[0].item())
                batch["masked"][i, first_active] = True
                batch["vt"][i, first_active] = model.mask_embedding
        v0_hat, s_hat = model(
            batch["vt"], batch["prompt"], slot_mask=batch["slot_mask"], prompt_mask=batch["prompt_mask"]
        )
        pred = v0_hat[batch["masked"]]
        target = batch["targets"][batch["masked"]]
        cos = torch.nn.functional.cosine_similarity(pred, target, dim=-1)
        stop_acc = ((s_hat > 0.5) == (batch["stop"] > 0.5)).float().mean()
    return {
        "masked_cosine": float(cos.mean().item()),
        "stop_accuracy": float(stop_acc.item()),
        "masked_slots": int(batch["masked"].sum().item()),
    }
