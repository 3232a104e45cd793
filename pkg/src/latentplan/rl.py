"""PPO over reverse-diffusion trajectories, entirely in embedding space.

Rollouts sample the Gaussian reverse chain V_T -> ... -> V_0, score V_0 with
an embedding-space reward, and optimize a clipped surrogate plus a KL penalty
toward the rollout policy.  Time is indexed by the diffusion step t, so t=0
is the terminal (clean) state and the reward attaches there; generalized
advantages therefore recurse from t=0 upward.

This module must stay independent of the text renderer; rewards and values
never leave embedding space.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .denoiser import Denoiser, DiffusionSchedule, reverse_mean
from .plans import cosine
from .pretrain import NonFiniteLossError
from .seeding import numpy_rng, torch_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RLConfig:
    """Stage II hyperparameters."""

    iterations: int = 60
    episodes_per_iter: int = 16
    ppo_epochs: int = 4
    gamma: float = 1.0
    lam: float = 0.95
    clip_eps: float = 0.2
    beta_kl: float = 0.01
    lr_policy: float = 1e-4
    lr_value: float = 1e-3
    shared_advantage: bool = True
    standardize: bool = True
    max_halvings: int = 8
    guard_frac: float = 0.5
    guard_min_peak: float = 0.4
    guard_patience: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")
        if self.guard_patience < 1:
            raise ValueError("guard patience must be at least 1")
        if not 0 < self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("gamma must be in (0, 1], lam in [0, 1]")


@dataclass(frozen=True, eq=False)
class RewardSpec:
    """What to compare the answer slot against.

    kind "mc": cosine-nearest row of ``options`` must equal ``gold``
    (ties resolve to the lowest index).  kind "em": cosine against
    ``target`` must reach ``threshold`` (inclusive).
    """

    kind: str
    options: torch.Tensor | None = None
    gold: int = 0
    target: torch.Tensor | None = None
    threshold: float = 0.9

    def __post_init__(self) -> None:
        if self.kind not in ("mc", "em"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == "mc":
            if self.options is None or self.options.ndim != 2:
                raise ValueError("mc reward needs a [K, d] option matrix")
            if not 0 <= self.gold < self.options.shape[0]:
                raise ValueError("gold index outside option range")
        else:
            if self.target is None or self.target.ndim != 1:
                raise ValueError("em reward needs a [d] target vector")
            if not 0 < self.threshold <= 1:
                raise ValueError("match threshold must lie in (0, 1]")


@dataclass(eq=False)
class RLTask:
    """One episode: a projected prompt, its slot count, and a reward spec."""

    prompt: torch.Tensor  # [m, d], already projected into plan space
    n: int
    reward: RewardSpec


@dataclass(eq=False)
class RolloutBatch:
    """Trajectories collected under the rollout-time (old) policy."""

    states: torch.Tensor  # [T+1, b, n_max, d], index = diffusion step
    means: torch.Tensor  # [T+1, b, n_max, d], means[t] produced states[t-1]
    old_logprob: torch.Tensor  # [T+1, b], valid for t >= 1
    old_values: torch.Tensor  # [T+1, b]
    rewards: torch.Tensor  # [b]
    slot_mask: torch.Tensor  # [b, n_max] bool
    prompt: torch.Tensor  # [b, m, d]
    prompt_mask: torch.Tensor  # [b, m] bool
    zero_norm_answers: int = 0

    @property
    def batch(self) -> int:
        return self.states.shape[1]

    @property
    def t_steps(self) -> int:
        return self.states.shape[0] - 1


@dataclass
class RLReport:
    """Per-iteration metrics plus the halt state of the run."""

    rows: list[dict] = field(default_factory=list)
    halted: bool = False
    halt_reason: str = ""
    peak_reward: float = 0.0
    zero_norm_answers: int = 0


def compute_reward(v0: torch.Tensor, n: int, spec: RewardSpec) -> tuple[float, bool]:
    """Score a clean plan: the answer lives in the last active slot.

    Returns (reward, zero_norm_flag); a zero-norm answer earns 0.
    """
    if not 1 <= n <= v0.shape[0]:
        raise ValueError("active slot count outside plan")
    answer = v0[n - 1]
    if float(torch.linalg.norm(answer)) == 0.0:
        return 0.0, True
    if spec.kind == "mc":
        sims = np.array([cosine(answer, opt) for opt in spec.options])
        pick = int(np.argmax(sims))  # first maximum, so ties go low
        return (1.0 if pick == spec.gold else 0.0), False
    sim = cosine(answer, spec.target)
    return (1.0 if sim >= spec.threshold else 0.0), False


def gaussian_logprob(
    x: torch.Tensor,
    mean: torch.Tensor,
    sigma: float,
    row_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Log density of an isotropic Gaussian, summed over coordinates.

    The last axis holds coordinates; with a row_mask, rows where it is
    False contribute nothing (padded slots).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if x.shape != mean.shape:
        raise ValueError("sample and mean shapes differ")
    d = x.shape[-1]
    quad = ((x - mean) ** 2).sum(dim=-1) / (2.0 * sigma * sigma)
    const = 0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
    row_lp = -quad - const
    if x.ndim == 1:
        return row_lp
    if row_mask is None:
        return row_lp.sum(dim=-1)
    if row_mask.shape != row_lp.shape:
        raise ValueError("row mask shape must match the row layout")
    return (row_lp * row_mask.to(row_lp.dtype)).sum(dim=-1)


def gaussian_kl(
    mu_new: torch.Tensor,
    mu_old: torch.Tensor,
    sigma: float,
    row_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """KL between equal-variance Gaussians: ||mu_new - mu_old||^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    sq = ((mu_new - mu_old) ** 2).sum(dim=-1)
    if row_mask is not None:
        sq = sq * row_mask.to(sq.dtype)
    if sq.ndim == 0:
        return sq / (2.0 * sigma * sigma)
    return sq.sum(dim=-1) / (2.0 * sigma * sigma)


def gae(
    rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantages over diffusion-indexed arrays.

    Index 0 is the terminal step, so the TD error there has no successor
    value; larger t bootstraps on the value one step closer to the end.
    Returns (advantages, value targets), both shaped like the inputs.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError("rewards and values must be equal-length vectors")
    steps = rewards.shape[0]
    adv = np.zeros(steps)
    adv[0] = rewards[0] - values[0]
    for t in range(1, steps):
        delta = rewards[t] + gamma * values[t - 1] - values[t]
        adv[t] = delta + gamma * lam * adv[t - 1]
    return adv, adv + values


def batch_gae(
    rewards: torch.Tensor, values: torch.Tensor, gamma: float, lam: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized `gae` over a [T+1, b] value matrix with terminal rewards."""
    steps, b = values.shape
    if rewards.shape != (b,):
        raise ValueError("expected one terminal reward per episode")
    adv = torch.zeros_like(values)
    adv[0] = rewards - values[0]
    for t in range(1, steps):
        delta = gamma * values[t - 1] - values[t]
        adv[t] = delta + gamma * lam * adv[t - 1]
    return adv, adv + values


def shared_advantages(
    rewards: torch.Tensor, values: torch.Tensor, gamma: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Verifiable-reward mode: one advantage per episode, copied to every step.

    The baseline is the value of the initial state, which sees the prompt but
    not the outcome. Later states reveal the answer, so their values converge
    to the reward itself and would cancel the learning signal if used here.
    Targets discount the terminal reward by the distance to it.
    """
    steps = values.shape[0]
    adv = (rewards - values[steps - 1])[None, :].expand(steps, -1).clone()
    discounts = torch.tensor([gamma**t for t in range(steps)], dtype=values.dtype)
    returns = discounts[:, None] * rewards[None, :]
    return adv, returns


def standardize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Center and scale by the population deviation; constants become zeros."""
    x = np.asarray(x, dtype=np.float64)
    std = float(x.std())
    if std < eps:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def standardize_selected(x: torch.Tensor, selected: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Standardize over the True positions of ``selected``; rest untouched."""
    vals = x[selected]
    std = float(vals.std(unbiased=False)) if vals.numel() else 0.0
    out = x.clone()
    if std < eps:
        out[selected] = 0.0
    else:
        out[selected] = (vals - vals.mean()) / std
    return out


class ValueModel(nn.Module):
    """Scalar value of a latent state: pooled slots, pooled prompt, step code."""

    def __init__(self, d: int, t_steps: int, hidden: int = 128, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.d = d
        self.t_steps = t_steps
        self.step_embedding = nn.Embedding(t_steps + 1, d, dtype=dtype)
        self.body = nn.Sequential(
            nn.Linear(3 * d, hidden, dtype=dtype),
            nn.GELU(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.GELU(),
        )
        self.head = nn.Linear(hidden, 1, dtype=dtype)

    def reset_parameters(self, gen: torch.Generator) -> None:
        """Seeded init; the output head starts at zero so all values start at 0."""
        with torch.no_grad():
            for sub in self.modules():
                if isinstance(sub, nn.Linear):
                    sub.weight.normal_(0.0, sub.in_features**-0.5, generator=gen)
                    sub.bias.zero_()
            self.step_embedding.weight.normal_(0.0, self.d**-0.5, generator=gen)
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(
        self,
        vt: torch.Tensor,
        prompt: torch.Tensor,
        step: torch.Tensor | int,
        slot_mask: torch.Tensor,
        prompt_mask: torch.Tensor,
    ) -> torch.Tensor:
        if isinstance(step, int):
            step = torch.full((vt.shape[0],), step, dtype=torch.long)
        sm = slot_mask.to(vt.dtype)
        pm = prompt_mask.to(prompt.dtype)
        pooled_v = (vt * sm[:, :, None]).sum(dim=1) / sm.sum(dim=1, keepdim=True).clamp(min=1.0)
        pooled_p = (prompt * pm[:, :, None]).sum(dim=1) / pm.sum(dim=1, keepdim=True).clamp(min=1.0)
        x = torch.cat([pooled_v, pooled_p, self.step_embedding(step)], dim=-1)
        return self.head(self.body(x)).squeeze(-1)


def pad_prompts(tasks: Sequence[RLTask]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length projected prompts into [b, m, d] plus a mask."""
    m_max = max(task.prompt.shape[0] for task in tasks)
    d = tasks[0].prompt.shape[1]
    prompt = torch.zeros(len(tasks), m_max, d, dtype=tasks[0].prompt.dtype)
    mask = torch.zeros(len(tasks), m_max, dtype=torch.bool)
    for i, task in enumerate(tasks):
        m = task.prompt.shape[0]
        prompt[i, :m] = task.prompt
        mask[i, :m] = True
    return prompt, mask


def rollout(
    policy: Denoiser,
    value: ValueModel,
    tasks: Sequence[RLTask],
    schedule: DiffusionSchedule,
    gen: torch.Generator,
) -> RolloutBatch:
    """Sample one reverse trajectory per task under the current policy."""
    if not tasks:
        raise ValueError("cannot roll out an empty task batch")
    n_max, d = policy.config.n_max, policy.config.d
    steps = schedule.t_steps
    b = len(tasks)
    prompt, prompt_mask = pad_prompts(tasks)
    slot_mask = torch.zeros(b, n_max, dtype=torch.bool)
    for i, task in enumerate(tasks):
        if not 1 <= task.n <= n_max:
            raise ValueError(f"task slot count {task.n} outside [1, {n_max}]")
        slot_mask[i, : task.n] = True
    smf = slot_mask.to(torch.float32)[:, :, None]

    states = torch.zeros(steps + 1, b, n_max, d)
    means = torch.zeros(steps + 1, b, n_max, d)
    logp = torch.zeros(steps + 1, b)
    policy.eval()
    value.eval()
    with torch.no_grad():
        eps = torch.randn(b, n_max, d, generator=gen)
        states[steps] = (policy.mask_embedding[None, None, :] + schedule.sigma(steps) * eps) * smf
        for t in range(steps, 0, -1):
            mu = reverse_mean(policy, states[t], prompt, t, slot_mask, prompt_mask)
            sigma = schedule.sigma(t)
            eps = torch.randn(b, n_max, d, generator=gen)
            nxt = (mu + sigma * eps) * smf
            means[t] = mu
            states[t - 1] = nxt
            logp[t] = gaussian_logprob(nxt, mu, sigma, slot_mask)
        values = torch.zeros(steps + 1, b)
        for t in range(steps + 1):
            values[t] = value(states[t], prompt, t, slot_mask, prompt_mask)
        rewards = torch.zeros(b)
        zero_norm = 0
        for i, task in enumerate(tasks):
            r, flagged = compute_reward(states[0, i], task.n, task.reward)
            rewards[i] = r
            if flagged:
                zero_norm += 1
                logger.warning("episode %d produced a zero-norm answer slot", i)
    return RolloutBatch(
        states=states,
        means=means,
        old_logprob=logp,
        old_values=values,
        rewards=rewards,
        slot_mask=slot_mask,
        prompt=prompt,
        prompt_mask=prompt_mask,
        zero_norm_answers=zero_norm,
    )


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip_eps: float) -> torch.Tensor:
    """Pessimistic clipped policy objective, elementwise (to be maximized)."""
    clipped = torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return torch.minimum(ratio * adv, clipped * adv)


def sample_step_subsets(rng: np.random.Generator, b: int, t_steps: int) -> torch.Tensor:
    """Per-episode subsample of reverse steps, ceil(T/2) of {1..T}, as a mask."""
    k = math.ceil(t_steps / 2)
    mask = torch.zeros(t_steps + 1, b, dtype=torch.bool)
    for i in range(b):
        picks = rng.choice(np.arange(1, t_steps + 1), size=k, replace=False)
        for t in picks:
            mask[int(t), i] = True
    return mask


def policy_objective(
    policy: Denoiser,
    ro: RolloutBatch,
    tau: torch.Tensor,
    adv: torch.Tensor,
    schedule: DiffusionSchedule,
    cfg: RLConfig,
) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate plus KL penalty over the subsampled transitions."""
    losses, kls, clipped_flags = [], [], []
    for t in range(1, ro.t_steps + 1):
        cols = torch.nonzero(tau[t]).flatten()
        if cols.numel() == 0:
            continue
        sigma = schedule.sigma(t)
        mu_new = reverse_mean(
            policy, ro.states[t][cols], ro.prompt[cols], t, ro.slot_mask[cols], ro.prompt_mask[cols]
        )
        lp_new = gaussian_logprob(ro.states[t - 1][cols], mu_new, sigma, ro.slot_mask[cols])
        ratio = torch.exp(lp_new - ro.old_logprob[t][cols])
        losses.append(clipped_surrogate(ratio, adv[t][cols], cfg.clip_eps))
        kls.append(gaussian_kl(mu_new, ro.means[t][cols], sigma, ro.slot_mask[cols]))
        clipped_flags.append((ratio - 1.0).abs() > cfg.clip_eps)
    surrogate = torch.cat(losses).mean()
    mean_kl = torch.cat(kls).mean()
    loss = -surrogate + cfg.beta_kl * mean_kl
    stats = {
        "surrogate": float(surrogate.item()),
        "mean_kl": float(mean_kl.item()),
        "clip_fraction": float(torch.cat(clipped_flags).to(torch.float32).mean().item()),
    }
    return loss, stats


def value_objective(
    value: ValueModel,
    ro: RolloutBatch,
    tau: torch.Tensor,
    returns: torch.Tensor,
    cfg: RLConfig,
) -> torch.Tensor:
    """Clipped value regression over the subsampled steps plus the terminal step.

    The terminal step always participates: it is the only place the reward
    enters the value targets, so skipping it would break bootstrapping.
    """
    tau_v = tau.clone()
    tau_v[0] = True
    losses = []
    for t in range(ro.t_steps + 1):
        cols = torch.nonzero(tau_v[t]).flatten()
        if cols.numel() == 0:
            continue
        v_new = value(ro.states[t][cols], ro.prompt[cols], t, ro.slot_mask[cols], ro.prompt_mask[cols])
        v_old = ro.old_values[t][cols]
        v_clip = v_old + torch.clamp(v_new - v_old, -cfg.clip_eps, cfg.clip_eps)
        target = returns[t][cols]
        losses.append(torch.maximum((v_new - target) ** 2, (v_clip - target) ** 2))
    return 0.5 * torch.cat(losses).mean()


def backtracking_step(
    module: nn.Module,
    optimizer: torch.optim.Optimizer,
    compute_loss: Callable[[], torch.Tensor],
    max_halvings: int,
) -> dict:
    """Adam step accepted only if it lowers the objective on this minibatch.

    The step is retried at halved learning rates; if every scale fails the
    parameters and optimizer state are restored, so a sufficiently harsh
    penalty (for instance a huge KL weight) pins the policy in place.
    """
    loss = compute_loss()
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite policy loss", {"loss": float(loss.item())})
    base = float(loss.item())
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    param_snap = copy.deepcopy(module.state_dict())
    opt_snap = copy.deepcopy(optimizer.state_dict())
    base_lrs = [group["lr"] for group in optimizer.param_groups]
    try:
        for halving in range(max_halvings + 1):
            scale = 0.5**halving
            for group, lr0 in zip(optimizer.param_groups, base_lrs):
                group["lr"] = lr0 * scale
            optimizer.step()
            with torch.no_grad():
                trial = float(compute_loss().item())
            if math.isfinite(trial) and trial < base:
                return {"accepted": True, "scale": scale, "loss_before": base, "loss_after": trial}
            module.load_state_dict(param_snap)
            optimizer.load_state_dict(opt_snap)
        return {"accepted": False, "scale": 0.0, "loss_before": base, "loss_after": base}
    finally:
        for group, lr0 in zip(optimizer.param_groups, base_lrs):
            group["lr"] = lr0


def rl_train(
    policy: Denoiser,
    value: ValueModel,
    schedule: DiffusionSchedule,
    sample_tasks: Callable[[np.random.Generator, int], list[RLTask]],
    cfg: RLConfig,
    root_seed: int,
    on_row: Callable[[dict], None] | None = None,
) -> RLReport:
    """Alternate policy and value updates over fresh rollout batches.

    Halts early if the mean reward collapses below ``guard_frac`` of its
    running peak once the peak has cleared ``guard_min_peak``.
    """
    opt_p = torch.optim.Adam(policy.parameters(), lr=cfg.lr_policy)
    opt_v = torch.optim.Adam(value.parameters(), lr=cfg.lr_value)
    report = RLReport()
    guard_strikes = 0
    for it in range(1, cfg.iterations + 1):
        task_rng = numpy_rng(root_seed, "rl-tasks", it)
        gen = torch_generator(root_seed, "rl-rollout", it)
        tasks = sample_tasks(task_rng, cfg.episodes_per_iter)
        ro = rollout(policy, value, tasks, schedule, gen)
        report.zero_norm_answers += ro.zero_norm_answers
        mean_reward = float(ro.rewards.mean().item())

        if cfg.shared_advantage:
            adv, returns = shared_advantages(ro.rewards, ro.old_values, cfg.gamma)
        else:
            adv, returns = batch_gae(ro.rewards, ro.old_values, cfg.gamma, cfg.lam)

        tau_rng = numpy_rng(root_seed, "rl-tau", it)
        policy.train()
        value.train()
        epoch_stats: list[dict] = []
        for _ in range(cfg.ppo_epochs):
            tau = sample_step_subsets(tau_rng, ro.batch, ro.t_steps)
            adv_used = standardize_selected(adv, tau) if cfg.standardize else adv

            stats_box: dict = {}

            def policy_loss() -> torch.Tensor:
                loss, stats = policy_objective(policy, ro, tau, adv_used, schedule, cfg)
                stats_box.update(stats)
                return loss

            step_info = backtracking_step(policy, opt_p, policy_loss, cfg.max_halvings)

            v_loss = value_objective(value, ro, tau, returns, cfg)
            if not torch.isfinite(v_loss):
                raise NonFiniteLossError("non-finite value loss", {"loss": float(v_loss.item())})
            opt_v.zero_grad(set_to_none=True)
            v_loss.backward()
            opt_v.step()

            epoch_stats.append(
                {
                    "policy_loss": step_info["loss_before"],
                    "value_loss": float(v_loss.item()),
                    "mean_kl": stats_box["mean_kl"],
                    "clip_fraction": stats_box["clip_fraction"],
                    "accepted_scale": step_info["scale"],
                }
            )
        policy.eval()
        value.eval()

        row = {
            "iteration": it,
            "mean_reward": mean_reward,
            "policy_loss": float(np.mean([s["policy_loss"] for s in epoch_stats])),
            "value_loss": float(np.mean([s["value_loss"] for s in epoch_stats])),
            "mean_kl": float(np.mean([s["mean_kl"] for s in epoch_stats])),
            "clip_fraction": float(np.mean([s["clip_fraction"] for s in epoch_stats])),
            "accepted_scale": float(np.mean([s["accepted_scale"] for s in epoch_stats])),
        }
        report.rows.append(row)
        if on_row is not None:
            on_row(row)

        # patience absorbs per-iteration sampling noise (binomial over
        # episodes_per_iter); only a sustained collapse halts the run
        report.peak_reward = max(report.peak_reward, mean_reward)
        armed = report.peak_reward >= cfg.guard_min_peak
        if armed and mean_reward < cfg.guard_frac * report.peak_reward:
            guard_strikes += 1
        else:
            guard_strikes = 0
        if guard_strikes >= cfg.guard_patience:
            report.halted = True
            report.halt_reason = (
                f"reward stayed below {cfg.guard_frac:.0%} of peak {report.peak_reward:.3f} "
                f"for {guard_strikes} iterations ending at {it}"
            )
            logger.warning("halting: %s", report.halt_reason)
            break
    return report


def evaluate_policy(
    policy: Denoiser,
    value: ValueModel,
    tasks: Sequence[RLTask],
    schedule: DiffusionSchedule,
    gen: torch.Generator,
) -> float:
    """Mean terminal reward of fresh rollouts, no updates."""
    ro = rollout(policy, value, tasks, schedule, gen)
    return float(ro.rewards.mean().item())
