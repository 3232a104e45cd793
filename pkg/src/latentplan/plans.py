"""Fixed-length variable-slot plans: segmentation, pooling, projection, padding.

A plan is a matrix ``V`` of ``n_max`` slot embeddings plus a binary stop mask
``s``.  The first ``n`` rows hold projected mean-pooled span embeddings, the
remaining rows are exactly zero with ``s = 0``.  Construction is pure given a
frozen encoder and a projection, so plans can be built concurrently against
read-only parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
from torch import nn

from . import vocab


class PlanOverflowError(ValueError):
    """Raised when a text segments into more spans than the plan has slots."""


class PlanConfigError(ValueError):
    """Raised on encoder/projection dimension mismatches and invalid plans."""


class EncoderInterface(Protocol):
    """Frozen deterministic token encoder: same tokens, identical output."""

    embedding_dim: int

    def embed(self, tokens: Sequence[int]) -> torch.Tensor:
        """Encode a token sequence into per-token states of shape [len, d_e]."""
        ...


@dataclass(frozen=True)
class VariableSpan:
    """One segmented text span destined for a plan slot."""

    tokens: tuple[int, ...]
    index: int

    def __post_init__(self) -> None:
        if len(self.tokens) == 0:
            raise ValueError("span must contain at least one token")
        if any(t < 0 or t >= vocab.VOCAB_SIZE for t in self.tokens):
            raise ValueError("span token id outside vocabulary")
        if any(t in vocab.DELIMITER_IDS for t in self.tokens):
            raise ValueError("span may not contain delimiter tokens")

    @property
    def text(self) -> str:
        return vocab.decode(self.tokens)


@dataclass
class VariablePlan:
    """Padded slot-embedding matrix V [n_max, d] with stop mask s [n_max]."""

    V: torch.Tensor
    s: torch.Tensor
    n: int

    def __post_init__(self) -> None:
        self.validate()

    @property
    def n_max(self) -> int:
        return self.V.shape[0]

    @property
    def dim(self) -> int:
        return self.V.shape[1]

    def validate(self) -> None:
        """Assert the padding invariant: rows past n are zero and s matches."""
        if self.V.ndim != 2 or self.s.ndim != 1 or self.s.shape[0] != self.V.shape[0]:
            raise PlanConfigError("plan tensor shapes inconsistent")
        if not 1 <= self.n <= self.n_max:
            raise PlanConfigError(f"active slot count {self.n} outside [1, {self.n_max}]")
        if not torch.all(self.s[: self.n] == 1):
            raise PlanConfigError("stop mask must be 1 on active slots")
        if self.n < self.n_max:
            if not torch.all(self.s[self.n :] == 0):
                raise PlanConfigError("stop mask must be 0 on padded slots")
            if torch.any(self.V[self.n :] != 0):
                raise PlanConfigError("padded slot rows must be exactly zero")

    def active_rows(self) -> torch.Tensor:
        return self.V[: self.n]


def segment_ids(
    ids: Sequence[int], delimiters: frozenset[int] = vocab.DELIMITER_IDS
) -> list[list[int]]:
    """Split token ids at delimiters, dropping empty segments."""
    segments: list[list[int]] = []
    current: list[int] = []
    for tok in ids:
        if tok in delimiters:
            if current:
                segments.append(current)
                current = []
        else:
            current.append(tok)
    if current:
        segments.append(current)
    return segments


def split(text: str, n_max: int, delimiters: frozenset[int] = vocab.DELIMITER_IDS) -> list[VariableSpan]:
    """Segment text at delimiter tokens into at most n_max spans.

    Empty segments (leading, trailing, or repeated delimiters) are dropped;
    all non-delimiter content is preserved in order.  More than n_max
    segments is a hard error, never a silent truncation.
    """
    if not text:
        raise ValueError("cannot split empty text")
    segments = segment_ids(vocab.encode(text), delimiters)
    if not segments:
        raise ValueError("text contains no non-delimiter content")
    if len(segments) > n_max:
        raise PlanOverflowError(
            f"plan overflow: {len(segments)} segments exceed {n_max} slots"
        )
    return [VariableSpan(tokens=tuple(seg), index=i) for i, seg in enumerate(segments)]


def pool(states: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over token states: [len, d_e] -> [d_e]."""
    if states.ndim != 2 or states.shape[0] < 1:
        raise ValueError(f"expected non-empty [len, d_e] matrix, got {tuple(states.shape)}")
    return states.mean(dim=0)


def embed_plan(
    spans: Sequence[VariableSpan],
    enc: EncoderInterface,
    proj: nn.Linear,
    n_max: int,
) -> VariablePlan:
    """Embed spans into a padded plan: row i = proj(pool(enc(span_i)))."""
    if len(spans) == 0:
        raise ValueError("a plan requires at least one span")
    if len(spans) > n_max:
        raise PlanOverflowError(
            f"plan overflow: {len(spans)} spans exceed {n_max} slots"
        )
    if enc.embedding_dim != proj.in_features:
        raise PlanConfigError(
            f"encoder dim {enc.embedding_dim} does not match projection input {proj.in_features}"
        )
    pooled = torch.stack([pool(enc.embed(span.tokens)) for span in spans])
    rows = proj(pooled.to(proj.weight.dtype))
    n = len(spans)
    V = rows.new_zeros((n_max, proj.out_features))
    V[:n] = rows
    s = torch.zeros(n_max, dtype=V.dtype)
    s[:n] = 1.0
    return VariablePlan(V=V, s=s, n=n)


def pool_prompt_segments(tokens: Sequence[int], enc: EncoderInterface) -> torch.Tensor:
    """Encoder-space prompt conditioning: one pooled state per segment, [m, d_e].

    Conditioning on segment means rather than raw token states keeps the
    prompt interface aligned with the slot targets: a copied span's target
    row is exactly the projection of its prompt segment's state.
    """
    if len(tokens) == 0:
        raise ValueError("prompt must contain at least one token")
    segments = segment_ids(list(tokens))
    if not segments:
        raise ValueError("prompt contains no non-delimiter content")
    return torch.stack([pool(enc.embed(seg)) for seg in segments])


def encode_prompt(tokens: Sequence[int], enc: EncoderInterface, proj: nn.Linear) -> torch.Tensor:
    """Per-segment prompt states in plan space: [m, d]."""
    states = pool_prompt_segments(tokens, enc)
    if states.shape[1] != proj.in_features:
        raise PlanConfigError(
            f"encoder dim {states.shape[1]} does not match projection input {proj.in_features}"
        )
    return proj(states.to(proj.weight.dtype))


def embed_text(tokens: Sequence[int], enc: EncoderInterface, proj: nn.Linear) -> torch.Tensor:
    """Plan-space embedding of one span: proj(pool(enc(tokens))).

    The empty sequence maps to the zero vector by convention; it marks
    "no hypothesis yet" for the renderer and never goes through proj.
    """
    if len(tokens) == 0:
        return torch.zeros(proj.out_features, dtype=proj.weight.dtype)
    return proj(pool(enc.embed(tokens)).to(proj.weight.dtype))


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of two vectors; zero if either has zero norm."""
    na, nb = float(torch.linalg.norm(a)), float(torch.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(torch.dot(a, b) / (na * nb))


def make_projection(d_e: int, d: int, gen: torch.Generator, dtype: torch.dtype = torch.float32) -> nn.Linear:
    """Trainable affine map d_e -> d with seeded Gaussian init."""
    proj = nn.Linear(d_e, d, dtype=dtype)
    with torch.no_grad():
        proj.weight.normal_(0.0, d_e**-0.5, generator=gen)
        proj.bias.zero_()
    return proj
