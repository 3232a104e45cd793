"""Embedding-to-text inversion: base hypothesizer plus iterative corrector.

A single encoder-decoder serves both roles through a learned mode embedding;
the base distribution is the corrector evaluated at an empty hypothesis with
a zero hypothesis embedding.  Decoding is greedy everywhere so inference is
deterministic.  `invert` chains corrections on the latest iterate while
keeping the best hypothesis seen so far by cosine score, and exits early
once the target is matched almost exactly.

Robust training perturbs only the conditioning embedding of the corrector
(v' = v + eps, eps ~ N(0, alpha^2 I), resampled per example per epoch); the
base hypothesizer always trains clean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import vocab
from .denoiser import FeedForward, MultiHeadAttention, init_transformer_params
from .plans import VariablePlan, cosine
from .pretrain import NonFiniteLossError
from .seeding import numpy_rng, torch_generator

logger = logging.getLogger(__name__)

PAD_ID = vocab.VOCAB_SIZE
BOS_ID = vocab.VOCAB_SIZE + 1
EOS_ID = vocab.VOCAB_SIZE + 2
RENDER_VOCAB = vocab.VOCAB_SIZE + 3

MODE_BASE = 0
MODE_CORRECTOR = 1

Phi = Callable[[Sequence[int]], torch.Tensor]


@dataclass(frozen=True)
class RendererConfig:
    """Architecture of the shared hypothesizer/corrector."""

    d: int = 64  # plan-space embedding dim it inverts
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_text_len: int = 16

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if self.max_text_len < 1:
            raise ValueError("max_text_len must be positive")


@dataclass(eq=False)
class Hypothesis:
    """A candidate inversion: tokens, their embedding, and the match score."""

    tokens: tuple[int, ...]
    embedding: torch.Tensor
    score: float
    iteration: int
    truncated: bool = False


@dataclass(frozen=True)
class BaseTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class RobustTrainConfig:
    """Corrector training: noise level, replication, and draft refinement depth."""

    alpha: float = 0.01
    samples_per_example: int = 1
    train_rounds: int = 1
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("noise level alpha must be non-negative")
        if self.samples_per_example < 1 or self.train_rounds < 1:
            raise ValueError("samples_per_example and train_rounds must be >= 1")


class EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads)
        self.ffn = FeedForward(d, d_ff)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask=mask)
        return x + self.ffn(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.self_attn = MultiHeadAttention(d, n_heads)
        self.cross_attn = MultiHeadAttention(d, n_heads)
        self.ffn = FeedForward(d, d_ff)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mem_mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, causal=True)
        x = x + self.cross_attn(self.norm2(x), memory, key_mask=mem_mask)
        return x + self.ffn(self.norm3(x))


class Renderer(nn.Module):
    """Shared encoder-decoder over (target embedding, hypothesis, its embedding)."""

    def __init__(self, config: RendererConfig) -> None:
        super().__init__()
        self.config = config
        dm = config.d_model
        self.token_emb = nn.Embedding(RENDER_VOCAB, dm)
        self.target_in = nn.Linear(config.d, dm)
        self.hyp_emb_in = nn.Linear(config.d, dm)
        self.mode_emb = nn.Embedding(2, dm)
        self.src_pos = nn.Parameter(torch.zeros(2 + config.max_text_len, dm))
        self.tgt_pos = nn.Parameter(torch.zeros(config.max_text_len + 1, dm))
        self.enc_blocks = nn.ModuleList(
            EncoderBlock(dm, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(dm, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.enc_norm = nn.LayerNorm(dm)
        self.dec_norm = nn.LayerNorm(dm)
        self.lm_head = nn.Linear(dm, RENDER_VOCAB)

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_transformer_params(self, gen)
        dm = self.config.d_model
        with torch.no_grad():
            self.token_emb.weight.normal_(0.0, dm**-0.5, generator=gen)
            self.mode_emb.weight.normal_(0.0, dm**-0.5, generator=gen)
            self.src_pos.normal_(0.0, dm**-0.5, generator=gen)
            self.tgt_pos.normal_(0.0, dm**-0.5, generator=gen)

    def encode_source(
        self,
        e: torch.Tensor,
        hyp_tokens: torch.Tensor,
        hyp_emb: torch.Tensor,
        mode: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Source = [target slot, hypothesis-embedding slot, hypothesis tokens]."""
        b = e.shape[0]
        tok = self.token_emb(hyp_tokens)
        src = torch.cat([self.target_in(e)[:, None], self.hyp_emb_in(hyp_emb)[:, None], tok], dim=1)
        src = src + self.src_pos[None, : src.shape[1]] + self.mode_emb.weight[mode][None, None]
        mask = torch.cat(
            [torch.ones(b, 2, dtype=torch.bool), hyp_tokens != PAD_ID], dim=1
        )
        for block in self.enc_blocks:
            src = block(src, mask)
        return self.enc_norm(src), mask

    def decode_logits(self, memory: torch.Tensor, mem_mask: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        x = self.token_emb(ys) + self.tgt_pos[None, : ys.shape[1]]
        for block in self.dec_blocks:
            x = block(x, memory, mem_mask)
        return self.lm_head(self.dec_norm(x))

    def forward(
        self,
        e: torch.Tensor,
        hyp_tokens: torch.Tensor,
        hyp_emb: torch.Tensor,
        mode: int,
        ys: torch.Tensor,
    ) -> torch.Tensor:
        memory, mask = self.encode_source(e, hyp_tokens, hyp_emb, mode)
        return self.decode_logits(memory, mask, ys)


def pad_token_batch(seqs: Sequence[Sequence[int]], max_len: int) -> torch.Tensor:
    out = torch.full((len(seqs), max_len), PAD_ID, dtype=torch.long)
    for i, seq in enumerate(seqs):
        if len(seq) > max_len:
            raise ValueError(f"token sequence of length {len(seq)} exceeds {max_len}")
        out[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return out


def greedy_decode(
    model: Renderer,
    e: torch.Tensor,
    hyp_tokens: Sequence[Sequence[int]],
    hyp_emb: torch.Tensor,
    mode: int,
) -> list[tuple[tuple[int, ...], bool]]:
    """Greedy batched decode; returns (tokens, truncated) per row.

    Only text tokens and EOS can be emitted; rows without an EOS within the
    length budget come back flagged as truncated.
    """
    max_len = model.config.max_text_len
    tok = pad_token_batch(hyp_tokens, max_len)
    with torch.no_grad():
        memory, mask = model.encode_source(e, tok, hyp_emb, mode)
        b = e.shape[0]
        ys = torch.full((b, 1), BOS_ID, dtype=torch.long)
        for _ in range(max_len):
            logits = model.decode_logits(memory, mask, ys)[:, -1]
            logits[:, PAD_ID] = -torch.inf
            logits[:, BOS_ID] = -torch.inf
            ys = torch.cat([ys, logits.argmax(dim=-1, keepdim=True)], dim=1)
    results = []
    for row in ys[:, 1:].tolist():
        if EOS_ID in row:
            results.append((tuple(row[: row.index(EOS_ID)]), False))
        else:
            results.append((tuple(row), True))
    return results


def _scored(tokens: tuple[int, ...], e: torch.Tensor, phi: Phi, iteration: int, truncated: bool) -> Hypothesis:
    emb = phi(tokens)
    return Hypothesis(
        tokens=tokens, embedding=emb, score=cosine(emb, e), iteration=iteration, truncated=truncated
    )


def hypothesize(model: Renderer, e: torch.Tensor, phi: Phi) -> Hypothesis:
    """Greedy decode of the base distribution (empty hypothesis, zero embedding)."""
    zero = torch.zeros(1, model.config.d)
    (tokens, truncated), = greedy_decode(model, e[None, :], [()], zero, MODE_BASE)
    return _scored(tokens, e, phi, iteration=0, truncated=truncated)


def correct(model: Renderer, e: torch.Tensor, hyp: Hypothesis, phi: Phi) -> Hypothesis:
    """One corrector pass conditioned on (target, hypothesis, its embedding)."""
    (tokens, truncated), = greedy_decode(
        model, e[None, :], [hyp.tokens], hyp.embedding[None, :], MODE_CORRECTOR
    )
    return _scored(tokens, e, phi, iteration=hyp.iteration + 1, truncated=truncated)


def invert(
    model: Renderer,
    e: torch.Tensor,
    phi: Phi,
    iters: int = 10,
    tol: float = 1e-6,
) -> Hypothesis:
    """Base hypothesis plus up to iters-1 corrections; returns the best by score."""
    if iters < 1:
        raise ValueError("iteration budget must be at least 1")
    current = hypothesize(model, e, phi)
    best = current
    for _ in range(iters - 1):
        if best.score >= 1.0 - tol:
            break
        current = correct(model, e, current, phi)
        if current.score > best.score:
            best = current
    return best


def invert_with_history(
    model: Renderer,
    e: torch.Tensor,
    phi: Phi,
    iters: int = 10,
    tol: float = 1e-6,
) -> list[Hypothesis]:
    """Best-so-far hypothesis after each budget 1..iters (one shared chain)."""
    if iters < 1:
        raise ValueError("iteration budget must be at least 1")
    current = hypothesize(model, e, phi)
    best = current
    history = [best]
    for _ in range(iters - 1):
        if best.score < 1.0 - tol:
            current = correct(model, e, current, phi)
            if current.score > best.score:
                best = current
        history.append(best)
    return history


def batch_invert_with_history(
    model: Renderer,
    targets: torch.Tensor,
    phi: Phi,
    iters: int,
    tol: float = 1e-6,
) -> list[list[Hypothesis]]:
    """Vectorized `invert_with_history` over [b, d] targets."""
    b = targets.shape[0]
    decoded = greedy_decode(model, targets, [()] * b, torch.zeros(b, model.config.d), MODE_BASE)
    current = [_scored(tok, targets[i], phi, 0, tr) for i, (tok, tr) in enumerate(decoded)]
    best = list(current)
    histories = [[h] for h in best]
    for _ in range(iters - 1):
        live = [i for i in range(b) if best[i].score < 1.0 - tol]
        if live:
            hyp_emb = torch.stack([current[i].embedding for i in live])
            decoded = greedy_decode(
                model, targets[live], [current[i].tokens for i in live], hyp_emb, MODE_CORRECTOR
            )
            for i, (tok, tr) in zip(live, decoded):
                current[i] = _scored(tok, targets[i], phi, current[i].iteration + 1, tr)
                if current[i].score > best[i].score:
                    best[i] = current[i]
        for i in range(b):
            histories[i].append(best[i])
    return histories


def render_plan(model: Renderer, plan: VariablePlan, phi: Phi, iters: int = 10) -> list[str]:
    """Invert each active slot independently, in slot order."""
    texts = []
    for i in plan.active_rows():
        hyp = invert(model, plan.V[i], phi, iters=iters)
        if hyp.score < 0.5:
            logger.warning("slot %d rendered with low score %.3f", i, hyp.score)
        texts.append(vocab.decode(hyp.tokens))
    return texts


def teacher_forcing_loss(
    model: Renderer,
    e: torch.Tensor,
    hyp_tokens: Sequence[Sequence[int]],
    hyp_emb: torch.Tensor,
    mode: int,
    targets: Sequence[Sequence[int]],
) -> torch.Tensor:
    """Mean cross-entropy of target tokens plus EOS under teacher forcing."""
    max_len = model.config.max_text_len
    b = len(targets)
    width = max(len(t) for t in targets) + 1
    if width > max_len + 1:
        raise ValueError("target exceeds the decoder length budget")
    ys_in = torch.full((b, width), PAD_ID, dtype=torch.long)
    ys_out = torch.full((b, width), PAD_ID, dtype=torch.long)
    for i, t in enumerate(targets):
        ys_in[i, 0] = BOS_ID
        ys_in[i, 1 : len(t) + 1] = torch.tensor(t, dtype=torch.long)
        ys_out[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        ys_out[i, len(t)] = EOS_ID
    logits = model(e, pad_token_batch(hyp_tokens, max_len), hyp_emb, mode, ys_in)
    return nn.functional.cross_entropy(
        logits.reshape(-1, RENDER_VOCAB), ys_out.reshape(-1), ignore_index=PAD_ID
    )


@dataclass
class RendererReport:
    rows: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")


def train_base(
    model: Renderer,
    pairs: Sequence[tuple[tuple[int, ...], torch.Tensor]],
    cfg: BaseTrainConfig,
    root_seed: int,
    on_row: Callable[[dict], None] | None = None,
) -> RendererReport:
    """Maximum likelihood of text given its own clean embedding (base mode)."""
    if not pairs:
        raise ValueError("empty training corpus")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = numpy_rng(root_seed, "render-base")
    report = RendererReport()
    targets = torch.stack([e for _, e in pairs])
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for lo in range(0, len(pairs), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            toks = [pairs[i][0] for i in idx]
            e = targets[idx]
            zero = torch.zeros(len(idx), model.config.d)
            loss = teacher_forcing_loss(model, e, [()] * len(idx), zero, MODE_BASE, toks)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("non-finite base renderer loss", {"epoch": epoch})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.item()))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        report.rows.append(row)
        if on_row is not None:
            on_row(row)
    model.eval()
    return report


def make_drafts(
    model: Renderer,
    noisy_targets: torch.Tensor,
    phi: Phi,
    rounds: int,
) -> tuple[list[tuple[int, ...]], torch.Tensor]:
    """Seed hypotheses from the base head, optionally refined by the corrector."""
    b = noisy_targets.shape[0]
    model.eval()
    decoded = greedy_decode(model, noisy_targets, [()] * b, torch.zeros(b, model.config.d), MODE_BASE)
    tokens = [tok for tok, _ in decoded]
    embs = torch.stack([phi(t) for t in tokens])
    for _ in range(rounds - 1):
        decoded = greedy_decode(model, noisy_targets, tokens, embs, MODE_CORRECTOR)
        tokens = [tok for tok, _ in decoded]
        embs = torch.stack([phi(t) for t in tokens])
    return tokens, embs


def train_corrector_robust(
    model: Renderer,
    pairs: Sequence[tuple[tuple[int, ...], torch.Tensor]],
    cfg: RobustTrainConfig,
    phi: Phi,
    root_seed: int,
    on_row: Callable[[dict], None] | None = None,
) -> RendererReport:
    """Corrector training on (perturbed target, drafted hypothesis) pairs.

    With alpha = 0 the perturbation is skipped entirely, which reduces this
    to clean corrector training bitwise.
    """
    if not pairs:
        raise ValueError("empty training corpus")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = numpy_rng(root_seed, "render-corrector")
    report = RendererReport()
    clean = torch.stack([e for _, e in pairs]).repeat_interleave(cfg.samples_per_example, dim=0)
    texts = [pairs[i][0] for i in range(len(pairs)) for _ in range(cfg.samples_per_example)]
    for epoch in range(1, cfg.epochs + 1):
        if cfg.alpha > 0:
            gen = torch_generator(root_seed, "render-noise", epoch)
            noisy = clean + cfg.alpha * torch.randn(clean.shape, generator=gen)
        else:
            noisy = clean
        rounds = 1 + (epoch - 1) % cfg.train_rounds
        drafts, draft_embs = make_drafts(model, noisy, phi, rounds)
        model.train()
        order = rng.permutation(len(texts))
        losses = []
        for lo in range(0, len(texts), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss = teacher_forcing_loss(
                model,
                noisy[idx],
                [drafts[i] for i in idx],
                draft_embs[idx],
                MODE_CORRECTOR,
                [texts[i] for i in idx],
            )
            if not torch.isfinite(loss):
                raise NonFiniteLossError("non-finite corrector loss", {"epoch": epoch})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.item()))
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "rounds": rounds}
        report.rows.append(row)
        if on_row is not None:
            on_row(row)
    model.eval()
    return report


def exact_match_curve(
    model: Renderer,
    pairs: Sequence[tuple[tuple[int, ...], torch.Tensor]],
    phi: Phi,
    budgets: Sequence[int],
    eval_noise: float,
    root_seed: int,
) -> dict[int, float]:
    """Exact-match accuracy at several iteration budgets from one shared chain.

    Targets are perturbed once per example with N(0, eval_noise^2 I) before
    inversion, mirroring how a noisy planner output reaches the renderer.
    """
    budgets = sorted(budgets)
    targets = torch.stack([e for _, e in pairs])
    if eval_noise > 0:
        gen = torch_generator(root_seed, "render-eval-noise")
        targets = targets + eval_noise * torch.randn(targets.shape, generator=gen)
    histories = batch_invert_with_history(model, targets, phi, iters=budgets[-1])
    curve = {}
    for budget in budgets:
        hits = sum(
            1 for (tokens, _), hist in zip(pairs, histories) if hist[budget - 1].tokens == tokens
        )
        curve[budget] = hits / len(pairs)
    return curve


def exact_match_rate(
    model: Renderer,
    pairs: Sequence[tuple[tuple[int, ...], torch.Tensor]],
    phi: Phi,
    iters: int,
    eval_noise: float,
    root_seed: int,
) -> float:
    return exact_match_curve(model, pairs, phi, [iters], eval_noise, root_seed)[iters]
