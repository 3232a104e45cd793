"""Synthetic desk-scale tasks and the frozen toy encoder.

The encoder mixes a fixed random token table with per-position sign flips and
an orthogonal-ish output map, so distinct short strings (including anagrams)
land on distinct embeddings while a span embedded on its own matches the same
span inside a prompt: the position counter restarts after every delimiter.

Task families:
  copy  - prompt lines become plan slots verbatim (Stage I corpus)
  mc    - prompt names a gold option by digit; answer slot must hold it
  em    - answer slot must match a single gold string by cosine threshold
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import vocab
from .plans import (
    VariablePlan,
    VariableSpan,
    embed_plan,
    embed_text,
    encode_prompt,
    split,
)
from .pretrain import PretrainExample
from .rl import RewardSpec, RLTask, compute_reward
from .seeding import numpy_rng, torch_generator

MAX_STRING_LEN = 12


class CalibrationError(RuntimeError):
    """Raised when no threshold meets the false-accept target."""

    def __init__(self, message: str, roc: list[dict]) -> None:
        super().__init__(message)
        self.roc = roc


class ToyEmbedder:
    """Frozen deterministic stand-in for a pretrained encoder.

    States are sign-flipped token-table rows passed through a fixed
    semi-orthogonal map to ``d_e``; smaller ``d_e`` is a lossier encoder,
    which is the embedding-quality sweep axis.
    """

    TABLE_DIM = 64

    def __init__(self, d_e: int = 32, seed: int = 0, max_positions: int = 256) -> None:
        if d_e < 1:
            raise ValueError("embedding dim must be positive")
        self.embedding_dim = d_e
        self.seed = seed
        self.max_positions = max_positions
        gen = torch_generator(seed, "toy-embedder")
        self.table = torch.randn(vocab.VOCAB_SIZE, self.TABLE_DIM, generator=gen) * self.TABLE_DIM**-0.5
        raw_signs = torch.randint(0, 2, (max_positions, self.TABLE_DIM), generator=gen)
        self.signs = raw_signs.to(torch.float32) * 2.0 - 1.0
        gaussian = torch.randn(d_e, self.TABLE_DIM, generator=gen)
        u, _, vh = torch.linalg.svd(gaussian, full_matrices=False)
        self.mix = u @ vh  # semi-orthogonal [d_e, TABLE_DIM]

    def embed(self, tokens: Sequence[int]) -> torch.Tensor:
        if len(tokens) == 0:
            raise ValueError("cannot embed an empty token sequence")
        ids = []
        positions = []
        counter = 0
        for t in tokens:
            if not 0 <= t < vocab.VOCAB_SIZE:
                raise ValueError(f"token id {t} outside vocabulary")
            ids.append(t)
            positions.append(counter)
            # the counter restarts after a delimiter so spans embed the
            # same standalone as inside a prompt
            counter = 0 if t in vocab.DELIMITER_IDS else counter + 1
            if counter >= self.max_positions:
                raise ValueError("segment longer than the embedder position table")
        states = self.table[ids] * self.signs[positions]
        return states @ self.mix.T


@dataclass(eq=False)
class TaskInstance:
    """A generated task: prompt, gold plan, and how to score an answer."""

    prompt_tokens: tuple[int, ...]
    plan: VariablePlan
    reward: RewardSpec
    family: str
    seed: int


LINE_ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits


def random_lowercase(rng: np.random.Generator, lo: int = 3, hi: int = 8) -> str:
    length = int(rng.integers(lo, hi + 1))
    return "".join(string.ascii_lowercase[i] for i in rng.integers(0, 26, size=length))


def random_line(rng: np.random.Generator, lo: int = 3, hi: int = 8) -> str:
    """Random string over the full letter+digit alphabet."""
    length = int(rng.integers(lo, hi + 1))
    return "".join(LINE_ALPHABET[i] for i in rng.integers(0, len(LINE_ALPHABET), size=length))


def gen_copy_example(rng: np.random.Generator, max_lines: int = 8) -> PretrainExample:
    """Prompt of random lines whose plan is the lines themselves."""
    lines = [random_line(rng) for _ in range(int(rng.integers(2, max_lines + 1)))]
    prompt = "\n".join(lines)
    return PretrainExample(
        prompt_tokens=tuple(vocab.encode(prompt)),
        spans=tuple(tuple(vocab.encode(line)) for line in lines),
    )


# a final one-digit segment dereferences that line; a final one-letter
# segment is inert filler whose slot target is the segment itself
NEUTRAL_MARKERS = string.ascii_uppercase


def rule_permutation(k: int) -> tuple[int, ...]:
    """Digit-to-gold map for multiple choice: one fixpoint, the rest a cycle.

    A pretrained policy reads 'P{j}' literally and answers option j, which is
    correct exactly when j is the fixpoint, so its mean reward starts at 1/k
    and reaching the ceiling requires learning the remaining cycle.
    """
    if k < 2:
        raise ValueError("permutation needs k >= 2")
    if k == 2:
        return (1, 0)
    return (0,) + tuple(1 + (j % (k - 1)) for j in range(1, k))


def rule_digit(gold: int, k: int) -> int:
    """Digit to place after the marker so the permutation lands on ``gold``."""
    return rule_permutation(k).index(gold)


def gen_pointer_example(
    rng: np.random.Generator,
    max_lines: int = 6,
    dereference: bool = True,
    exact_lines: int | None = None,
    shifted: bool = False,
    doubled: bool | None = None,
) -> PretrainExample:
    """Lines plus a final marker segment and one extra plan slot.

    The marker grammars share the layout but differ in what the extra slot
    must contain:

    * bare digit ``j``: the target is line j, a direct indexed lookup;
    * doubled digit ``jj``: the target is line sigma(j) under the fixpoint
      permutation, the same remap the multiple-choice rule applies;
    * single uppercase letter: the target is the marker itself, which keeps
      the lookup from firing on arbitrary trailing short segments.

    The doubled form pools to the digit row under a different position-sign
    mask than the bare form, so the two are linearly separable to the policy
    while sharing the digit identity.  ``shifted`` with ``doubled=False``
    deliberately reuses the bare grammar for the permuted target: mixed with
    plain lookups it is indistinguishable per example, so the regression
    optimum is a fixed blend whose dominant mode is still the plain lookup.
    That leaves the blend weight as a continuous handle reward optimization
    can push without rebuilding the lookup circuit.
    """
    count = exact_lines if exact_lines is not None else int(rng.integers(2, max_lines + 1))
    lines = [random_line(rng) for _ in range(count)]
    j = int(rng.integers(len(lines)))
    if doubled is None:
        doubled = shifted
    if shifted or doubled:
        if not dereference:
            raise ValueError("shifted or doubled markers require the dereference grammar")
    if dereference:
        tail = str(j) * (2 if doubled else 1)
        extra = lines[rule_permutation(count)[j]] if shifted else lines[j]
    else:
        tail = NEUTRAL_MARKERS[int(rng.integers(len(NEUTRAL_MARKERS)))]
        extra = tail
    prompt = "\n".join(lines) + "\n" + tail
    spans = split(prompt, n_max=max_lines + 2)
    return PretrainExample(
        prompt_tokens=tuple(vocab.encode(prompt)),
        spans=tuple(tuple(s.tokens) for s in spans) + (tuple(vocab.encode(extra)),),
    )


def mc_prompt(options: Sequence[str], gold: int) -> str:
    return "\n".join(options) + f"\n{rule_digit(gold, len(options))}"


def gen_mc_options(rng: np.random.Generator, k: int) -> list[str]:
    options: list[str] = []
    while len(options) < k:
        cand = random_line(rng)
        if cand not in options:
            options.append(cand)
    return options


def build_pretrain_corpus(
    rng: np.random.Generator,
    size: int,
    max_lines: int = 8,
) -> list[PretrainExample]:
    """Copy, pointer, shifted-pointer, and neutral examples in a fixed cycle.

    Both lookup grammars get an exact-four-line share matching the reward
    task's layout; the variable-width share keeps the direct lookup general.
    One slot in sixteen is a bare-marker example with the permuted target,
    which fixes the plain lookup's blend weight at a small nonzero value.
    The neutral share keeps the marker detector honest: lookups should fire
    on digit markers, not on any trailing short segment.
    """
    plines = min(max_lines, 6)
    out: list[PretrainExample] = []
    for i in range(size):
        slot = i % 16
        if slot in (0, 4, 8, 12):
            out.append(gen_copy_example(rng, max_lines=max_lines))
        elif slot in (1, 9):
            out.append(gen_pointer_example(rng, max_lines=plines))
        elif slot in (2, 5, 10, 13):
            out.append(gen_pointer_example(rng, max_lines=plines, exact_lines=4))
        elif slot in (3, 6, 14):
            out.append(gen_pointer_example(rng, max_lines=plines, exact_lines=4, shifted=True))
        elif slot == 11:
            out.append(
                gen_pointer_example(
                    rng, max_lines=plines, exact_lines=4, shifted=True, doubled=False
                )
            )
        else:
            out.append(gen_pointer_example(rng, max_lines=plines, dereference=False))
    return out


def build_mc_task(
    enc: ToyEmbedder,
    proj: nn.Linear,
    options: Sequence[str],
    gold: int,
    n_max: int = 16,
    seed: int = 0,
) -> TaskInstance:
    """Assemble a multiple-choice instance from explicit options."""
    embs = torch.stack([embed_text(vocab.encode(o), enc, proj) for o in options])
    prompt = mc_prompt(options, gold)
    spans = split(prompt, n_max=n_max)
    answer = VariableSpan(tokens=tuple(vocab.encode(options[gold])), index=len(spans))
    plan = embed_plan(spans + [answer], enc, proj, n_max)
    spec = RewardSpec(kind="mc", options=embs, gold=gold)
    instance = TaskInstance(
        prompt_tokens=tuple(vocab.encode(prompt)), plan=plan, reward=spec, family="mc", seed=seed
    )
    r, _ = compute_reward(plan.V, plan.n, spec)
    if r != 1.0:
        raise AssertionError("gold plan must score reward 1")
    return instance


def gen_mc_task(
    enc: ToyEmbedder,
    proj: nn.Linear,
    rng: np.random.Generator,
    k: int = 4,
    n_max: int = 16,
    max_tries: int = 64,
    gold: int | None = None,
) -> TaskInstance:
    """Multiple-choice instance; option embeddings pairwise cosine < 0.95."""
    if k < 2:
        raise ValueError("multiple choice needs at least two options")
    seed = int(rng.integers(2**31))
    for _ in range(max_tries):
        options = gen_mc_options(rng, k)
        embs = torch.stack([embed_text(vocab.encode(o), enc, proj) for o in options])
        normed = embs / torch.linalg.norm(embs, dim=1, keepdim=True)
        sims = normed @ normed.T - torch.eye(k)
        if float(sims.max()) < 0.95:
            break
    else:
        raise RuntimeError("could not draw sufficiently distinct options")
    if gold is None:
        gold = int(rng.integers(k))
    return build_mc_task(enc, proj, options, gold, n_max=n_max, seed=seed)


def build_em_task(
    enc: ToyEmbedder,
    proj: nn.Linear,
    gold: str,
    n_max: int = 16,
    threshold: float = 0.9,
    seed: int = 0,
) -> TaskInstance:
    """Assemble an exact-match instance around one gold string."""
    prompt = "E\n" + gold
    spans = split(prompt, n_max=n_max)
    plan = embed_plan(spans, enc, proj, n_max)
    spec = RewardSpec(kind="em", target=embed_text(vocab.encode(gold), enc, proj), threshold=threshold)
    instance = TaskInstance(
        prompt_tokens=tuple(vocab.encode(prompt)), plan=plan, reward=spec, family="em", seed=seed
    )
    r, _ = compute_reward(plan.V, plan.n, spec)
    if r != 1.0:
        raise AssertionError("gold plan must score reward 1")
    return instance


def gen_em_task(
    enc: ToyEmbedder,
    proj: nn.Linear,
    rng: np.random.Generator,
    n_max: int = 16,
    threshold: float = 0.9,
) -> TaskInstance:
    """Exact-match instance: reproduce the prompt's payload string."""
    seed = int(rng.integers(2**31))
    gold = random_lowercase(rng)
    return build_em_task(enc, proj, gold, n_max=n_max, threshold=threshold, seed=seed)


def task_to_row(instance: TaskInstance) -> dict:
    """JSON-able view of an instance; the prompt text carries the payload."""
    row = {
        "family": instance.family,
        "prompt": vocab.decode(instance.prompt_tokens),
        "seed": instance.seed,
    }
    if instance.reward.kind == "em":
        row["threshold"] = instance.reward.threshold
    return row


def task_from_row(row: dict, enc: ToyEmbedder, proj: nn.Linear, n_max: int = 16) -> TaskInstance:
    """Rebuild an instance from a gen-data row using the frozen embedder."""
    lines = row["prompt"].split("\n")
    if row["family"] == "mc":
        return build_mc_task(
            enc, proj, lines[1:], gold=int(lines[0][1:]), n_max=n_max, seed=int(row["seed"])
        )
    if row["family"] == "em":
        return build_em_task(
            enc,
            proj,
            lines[1],
            n_max=n_max,
            threshold=float(row.get("threshold", 0.9)),
            seed=int(row["seed"]),
        )
    raise ValueError(f"unknown task family {row['family']!r}")


def to_rl_task(instance: TaskInstance, enc: ToyEmbedder, proj: nn.Linear) -> RLTask:
    return RLTask(
        prompt=encode_prompt(instance.prompt_tokens, enc, proj),
        n=instance.plan.n,
        reward=instance.reward,
    )


def make_task_sampler(
    enc: ToyEmbedder,
    proj: nn.Linear,
    family: str = "mc",
    k: int = 4,
    n_max: int = 16,
    pool_size: int = 256,
    pool_seed: int = 7,
    instances: Sequence[TaskInstance] | None = None,
) -> Callable[[np.random.Generator, int], list[RLTask]]:
    """RL episode source; a finite pool bounds task diversity at desk scale.

    Explicit instances (from a gen-data file) form the pool when given;
    otherwise pool_size instances are drawn up front, or fresh instances per
    call when pool_size = 0.
    """

    def generate(rng: np.random.Generator, gold: int | None = None) -> RLTask:
        if family == "mc":
            return to_rl_task(gen_mc_task(enc, proj, rng, k=k, n_max=n_max, gold=gold), enc, proj)
        if family == "em":
            return to_rl_task(gen_em_task(enc, proj, rng, n_max=n_max), enc, proj)
        raise ValueError(f"unknown task family {family!r}")

    pool: list[RLTask] = []
    if instances is not None:
        pool = [to_rl_task(inst, enc, proj) for inst in instances]
    elif pool_size > 0:
        # cycle gold through the options so the pool's chance level is exact
        pool_rng = numpy_rng(pool_seed, f"task-pool-{family}")
        golds = [i % k if family == "mc" else None for i in range(pool_size)]
        pool = [generate(pool_rng, gold=g) for g in golds]

    def sample(rng: np.random.Generator, count: int) -> list[RLTask]:
        if pool:
            return [pool[int(i)] for i in rng.integers(0, len(pool), size=count)]
        return [generate(rng) for _ in range(count)]

    return sample


def mc_chance_estimate(
    enc: ToyEmbedder,
    proj: nn.Linear,
    rng: np.random.Generator,
    k: int = 4,
    trials: int = 10_000,
) -> float:
    """Monte-Carlo chance level: random noise in the answer slot of fresh tasks."""
    d = proj.out_features
    hits = 0
    for _ in range(trials):
        options = gen_mc_options(rng, k)
        embs = torch.stack([embed_text(vocab.encode(o), enc, proj) for o in options])
        spec = RewardSpec(kind="mc", options=embs, gold=int(rng.integers(k)))
        answer = torch.from_numpy(rng.standard_normal(d)).to(torch.float32)
        r, _ = compute_reward(answer[None, :], 1, spec)
        hits += int(r)
    return hits / trials


def make_phi(enc: ToyEmbedder, proj: nn.Linear) -> Callable[[Sequence[int]], torch.Tensor]:
    """Frozen text-to-plan-space map shared by rewards and the renderer."""

    def phi(tokens: Sequence[int]) -> torch.Tensor:
        with torch.no_grad():
            return embed_text(tokens, enc, proj)

    return phi


def gen_render_corpus(
    enc: ToyEmbedder,
    proj: nn.Linear,
    rng: np.random.Generator,
    size: int,
    lo: int = 4,
    hi: int = MAX_STRING_LEN,
) -> list[tuple[tuple[int, ...], torch.Tensor]]:
    """Distinct random strings paired with their plan-space embeddings."""
    if hi > MAX_STRING_LEN:
        raise ValueError(f"render strings are capped at {MAX_STRING_LEN} symbols")
    phi = make_phi(enc, proj)
    seen: set[str] = set()
    corpus = []
    while len(corpus) < size:
        text = random_lowercase(rng, lo, hi)
        if text in seen:
            continue
        seen.add(text)
        tokens = tuple(vocab.encode(text))
        corpus.append((tokens, phi(tokens)))
    return corpus


def calibrate_threshold(
    positives: Sequence[float],
    negatives: Sequence[float],
    target_far: float = 0.01,
) -> float:
    """Pick the cosine threshold with maximal true-accept at bounded false-accept.

    Separable score sets return the midpoint of the gap.  If no candidate
    threshold meets the false-accept target the full ROC is attached to the
    error for inspection.
    """
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("calibration needs both positive and negative scores")
    if float(neg.max()) < float(pos.min()):
        return float((neg.max() + pos.min()) / 2.0)
    candidates = np.unique(np.concatenate([pos, neg]))
    roc = []
    best: tuple[float, float] | None = None  # (tar, threshold)
    for theta in candidates:
        far = float(np.mean(neg >= theta))
        tar = float(np.mean(pos >= theta))
        roc.append({"threshold": float(theta), "far": far, "tar": tar})
        if far <= target_far and tar > 0 and (best is None or tar > best[0]):
            best = (tar, float(theta))
    if best is None:
        raise CalibrationError(
            f"no threshold reaches false-accept <= {target_far}", roc
        )
    return best[1]
