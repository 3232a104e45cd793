"""Experiment harness: seeded runs, checkpoints, metrics, sweeps, export.

Every run writes JSON-lines metrics plus a manifest.json holding the resolved
config, artifact names, and final metrics.  Manifests contain no timestamps
or absolute paths, so identical (config, seed) runs produce identical files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as cfgmod
from . import pretrain as pretrain_mod
from . import renderer as renderer_mod
from . import rl as rl_mod
from . import tasks as tasks_mod
from . import vocab
from .denoiser import Denoiser, DenoiserConfig
from .plans import make_projection
from .seeding import numpy_rng, torch_generator

logger = logging.getLogger("latentplan")

ALPHA_SWEEP = [0.001, 0.005, 0.01, 0.02, 0.05]
ITER_SWEEP = [1, 3, 5, 10, 20]
DE_SWEEP = [8, 32, 128]


class DependencyError(RuntimeError):
    """A stage was launched without the checkpoint of the stage it needs."""


class JsonlLog:
    """Append-per-row JSON-lines metrics writer."""

    def __init__(self, path: Path) -> None:
        self.fh = open(path, "w")

    def __call__(self, row: dict) -> None:
        self.fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def write_manifest(out: Path, command: str, cfg: dict, artifacts: dict, metrics: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "artifacts": artifacts,
        "metrics": metrics,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def stage1_checkpoint_config(cfg: dict, dcfg: DenoiserConfig) -> dict:
    return {
        "stage": "pretrain",
        "seed": cfg["seed"],
        "d_e": cfg["d_e"],
        "embedder_seed": cfg["embedder_seed"],
        "t_steps": cfg["t_steps"],
        "sigma_max": cfg["sigma_max"],
        "denoiser": asdict(dcfg),
    }


def cmd_pretrain(cfg: dict) -> dict:
    cfgmod.apply_threads(cfg)
    out = prepare_out(cfg)
    seed = int(cfg["seed"])
    enc = tasks_mod.ToyEmbedder(d_e=int(cfg["d_e"]), seed=int(cfg["embedder_seed"]))
    dcfg = cfgmod.denoiser_config(cfg)
    model = Denoiser(dcfg)
    model.reset_parameters(torch_generator(seed, "denoiser-init"))
    proj = make_projection(enc.embedding_dim, dcfg.d, torch_generator(seed, "proj-init"))
    pcfg = cfgmod.pretrain_config(cfg)
    corpus = tasks_mod.build_pretrain_corpus(
        numpy_rng(seed, "pretrain-corpus"),
        size=int(cfg["pretrain"]["corpus_size"]),
    )
    snapshot = stage1_checkpoint_config(cfg, dcfg)
    tensors = lambda: {**ckpt.module_tensors(model, "denoiser."), **ckpt.module_tensors(proj, "proj.")}

    log = JsonlLog(out / "pretrain_metrics.jsonl")
    try:
        report = pretrain_mod.train(
            model,
            proj,
            enc,
            corpus,
            pcfg,
            root_seed=seed,
            on_row=log,
            on_checkpoint=lambda step: ckpt.save_checkpoint(
                out / "stage1.ckpt", {**snapshot, "step": step}, tensors()
            ),
        )
    finally:
        log.close()
    ckpt.save_checkpoint(out / "stage1.ckpt", {**snapshot, "step": pcfg.steps}, tensors())
    recovery = pretrain_mod.eval_masked_recovery(model, proj, enc, corpus, root_seed=seed)
    metrics = {
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "loss_ratio": report.final_loss / report.initial_loss,
        "empty_mask_batches": report.empty_mask_batches,
        **recovery,
    }
    write_manifest(
        out,
        "pretrain",
        cfg,
        {"checkpoint": "stage1.ckpt", "metrics": "pretrain_metrics.jsonl"},
        metrics,
    )
    logger.info("pretrain done: %s", metrics)
    return metrics


def resolve_stage1(cfg: dict, section: str) -> Path:
    explicit = cfg[section]["pretrain_checkpoint"]
    path = Path(explicit) if explicit else Path(cfg["out_dir"]) / "stage1.ckpt"
    if not path.exists():
        raise DependencyError(
            f"{section} requires the pretrain stage checkpoint; expected {path}. "
            "Run the pretrain subcommand first or pass --pretrain-checkpoint."
        )
    return path


def load_stage1(path: Path) -> tuple[tasks_mod.ToyEmbedder, Denoiser, torch.nn.Module, dict]:
    loaded = ckpt.load_checkpoint(path)
    dcfg = DenoiserConfig(**loaded.config["denoiser"])
    model = Denoiser(dcfg)
    ckpt.load_module(model, loaded.tensors, "denoiser.")
    enc = tasks_mod.ToyEmbedder(
        d_e=int(loaded.config["d_e"]), seed=int(loaded.config["embedder_seed"])
    )
    proj = torch.nn.Linear(enc.embedding_dim, dcfg.d)
    ckpt.load_module(proj, loaded.tensors, "proj.")
    for p in proj.parameters():  # frozen after Stage I
        p.requires_grad_(False)
    return enc, model, proj, loaded.config


def cmd_rl(cfg: dict) -> dict:
    cfgmod.apply_threads(cfg)
    out = prepare_out(cfg)
    seed = int(cfg["seed"])
    enc, policy, proj, snap = load_stage1(resolve_stage1(cfg, "rl"))
    dcfg = DenoiserConfig(**snap["denoiser"])
    sched = cfgmod.schedule(cfg)
    rcfg = cfgmod.rl_config(cfg)
    value = rl_mod.ValueModel(dcfg.d, sched.t_steps)
    value.reset_parameters(torch_generator(seed, "value-init"))

    instances = None
    if cfg["rl"]["tasks_file"]:
        rows = read_jsonl(Path(cfg["rl"]["tasks_file"]))
        instances = [tasks_mod.task_from_row(r, enc, proj, n_max=dcfg.n_max) for r in rows]
    sampler = tasks_mod.make_task_sampler(
        enc,
        proj,
        family=cfg["rl"]["family"],
        k=int(cfg["rl"]["k"]),
        n_max=dcfg.n_max,
        pool_size=int(cfg["rl"]["pool_size"]),
        pool_seed=seed,
        instances=instances,
    )

    if cfg["rl"]["dump_rollouts"]:
        probe = rl_mod.rollout(
            policy, value, sampler(numpy_rng(seed, "rl-dump"), rcfg.episodes_per_iter),
            sched, torch_generator(seed, "rl-dump"),
        )
        ckpt.save_checkpoint(
            out / "rollouts.ckpt",
            {"stage": "rl-rollout-dump", "seed": seed},
            {
                "states": probe.states,
                "means": probe.means,
                "old_logprob": probe.old_logprob,
                "old_values": probe.old_values,
                "rewards": probe.rewards,
                "slot_mask": probe.slot_mask.to(torch.uint8),
            },
        )

    log = JsonlLog(out / "rl_metrics.jsonl")
    try:
        report = rl_mod.rl_train(policy, value, sched, sampler, rcfg, root_seed=seed, on_row=log)
    finally:
        log.close()

    eval_tasks = sampler(numpy_rng(seed, "rl-eval-tasks"), 64)
    final_reward = rl_mod.evaluate_policy(
        policy, value, eval_tasks, sched, torch_generator(seed, "rl-eval")
    )
    tensors = {
        **ckpt.module_tensors(policy, "denoiser."),
        **ckpt.module_tensors(value, "value."),
        **ckpt.module_tensors(proj, "proj."),
    }
    ckpt.save_checkpoint(out / "stage2.ckpt", {**snap, "stage": "rl", "rl_seed": seed}, tensors)
    metrics = {
        "iterations_run": len(report.rows),
        "final_train_reward": report.rows[-1]["mean_reward"] if report.rows else float("nan"),
        "peak_reward": report.peak_reward,
        "eval_reward": final_reward,
        "halted": report.halted,
        "halt_reason": report.halt_reason,
        "zero_norm_answers": report.zero_norm_answers,
    }
    write_manifest(
        out,
        "rl",
        cfg,
        {"checkpoint": "stage2.ckpt", "metrics": "rl_metrics.jsonl"},
        metrics,
    )
    logger.info("rl done: %s", metrics)
    return metrics


def renderer_corpora(cfg: dict, enc, proj) -> tuple[list, list]:
    r = cfg["renderer"]
    if r["corpus_file"]:
        texts = [row["text"] for row in read_jsonl(Path(r["corpus_file"]))]
        phi = tasks_mod.make_phi(enc, proj)
        data = [(tuple(vocab.encode(t)), phi(vocab.encode(t))) for t in texts]
    else:
        data = tasks_mod.gen_render_corpus(
            enc,
            proj,
            numpy_rng(int(cfg["seed"]), "render-corpus"),
            size=int(r["train_size"]) + int(r["eval_size"]),
            lo=int(r["min_len"]),
            hi=int(r["max_len"]),
        )
    train = data[: int(r["train_size"])]
    evalset = data[int(r["train_size"]) :]
    if not train or not evalset:
        raise cfgmod.ConfigError("renderer corpus too small for the train/eval split")
    return train, evalset


def cmd_train_renderer(cfg: dict) -> dict:
    cfgmod.apply_threads(cfg)
    out = prepare_out(cfg)
    seed = int(cfg["seed"])
    enc, _, proj, snap = load_stage1(resolve_stage1(cfg, "renderer"))
    dcfg = DenoiserConfig(**snap["denoiser"])
    rcfg = cfgmod.renderer_config(cfg, d=dcfg.d)
    phi = tasks_mod.make_phi(enc, proj)
    train_pairs, eval_pairs = renderer_corpora(cfg, enc, proj)

    model = renderer_mod.Renderer(rcfg)
    model.reset_parameters(torch_generator(seed, "renderer-init"))
    base_log = JsonlLog(out / "renderer_base_metrics.jsonl")
    try:
        renderer_mod.train_base(model, train_pairs, cfgmod.base_train_config(cfg), seed, on_row=base_log)
    finally:
        base_log.close()
    base_tensors = {**ckpt.module_tensors(model, "renderer."), **ckpt.module_tensors(proj, "proj.")}
    base_snap = {**snap, "stage": "renderer-base", "renderer": asdict(rcfg)}
    ckpt.save_checkpoint(out / "renderer-base.ckpt", base_snap, base_tensors)

    rob = cfgmod.robust_train_config(cfg)
    corr_log = JsonlLog(out / "renderer_corrector_metrics.jsonl")
    try:
        renderer_mod.train_corrector_robust(model, train_pairs, rob, phi, seed, on_row=corr_log)
    finally:
        corr_log.close()
    full_snap = {**base_snap, "stage": "renderer", "alpha": rob.alpha}
    tensors = {**ckpt.module_tensors(model, "renderer."), **ckpt.module_tensors(proj, "proj.")}
    ckpt.save_checkpoint(out / "renderer.ckpt", full_snap, tensors)

    iters = int(cfg["renderer"]["iters"])
    noise = float(cfg["renderer"]["eval_noise"])
    metrics = {
        "alpha": rob.alpha,
        "clean_exact_match": renderer_mod.exact_match_rate(model, eval_pairs, phi, iters, 0.0, seed),
        "noisy_exact_match": renderer_mod.exact_match_rate(model, eval_pairs, phi, iters, noise, seed),
        "eval_noise": noise,
        "iters": iters,
    }
    write_manifest(
        out,
        "train-renderer",
        cfg,
        {
            "base_checkpoint": "renderer-base.ckpt",
            "checkpoint": "renderer.ckpt",
            "base_metrics": "renderer_base_metrics.jsonl",
            "corrector_metrics": "renderer_corrector_metrics.jsonl",
        },
        metrics,
    )
    logger.info("renderer done: %s", metrics)
    return metrics


def load_renderer(path: Path) -> tuple[renderer_mod.Renderer, tasks_mod.ToyEmbedder, torch.nn.Module, dict]:
    loaded = ckpt.load_checkpoint(path)
    rcfg = renderer_mod.RendererConfig(**loaded.config["renderer"])
    model = renderer_mod.Renderer(rcfg)
    ckpt.load_module(model, loaded.tensors, "renderer.")
    model.eval()
    enc = tasks_mod.ToyEmbedder(
        d_e=int(loaded.config["d_e"]), seed=int(loaded.config["embedder_seed"])
    )
    proj = torch.nn.Linear(enc.embedding_dim, rcfg.d)
    ckpt.load_module(proj, loaded.tensors, "proj.")
    for p in proj.parameters():
        p.requires_grad_(False)
    return model, enc, proj, loaded.config


def cmd_eval(cfg: dict) -> dict:
    cfgmod.apply_threads(cfg)
    out = prepare_out(cfg)
    seed = int(cfg["seed"])
    metrics: dict = {}

    stage2 = Path(cfg["out_dir"]) / "stage2.ckpt"
    if stage2.exists():
        enc, policy, proj, snap = load_stage1(stage2)
        dcfg = DenoiserConfig(**snap["denoiser"])
        sched = cfgmod.schedule(cfg)
        value = rl_mod.ValueModel(dcfg.d, sched.t_steps)
        ckpt.load_module(value, ckpt.load_checkpoint(stage2).tensors, "value.")
        sampler = tasks_mod.make_task_sampler(
            enc, proj, family=cfg["rl"]["family"], k=int(cfg["rl"]["k"]),
            n_max=dcfg.n_max, pool_size=int(cfg["rl"]["pool_size"]), pool_seed=seed,
        )
        tasks = sampler(numpy_rng(seed, "eval-tasks"), 64)
        metrics["rl_eval_reward"] = rl_mod.evaluate_policy(
            policy, value, tasks, sched, torch_generator(seed, "eval-rollout")
        )

    renderer_path = Path(cfg["out_dir"]) / "renderer.ckpt"
    if renderer_path.exists():
        model, enc, proj, _ = load_renderer(renderer_path)
        phi = tasks_mod.make_phi(enc, proj)
        _, eval_pairs = renderer_corpora(cfg, enc, proj)
        curve = renderer_mod.exact_match_curve(
            model, eval_pairs, phi, ITER_SWEEP, float(cfg["renderer"]["eval_noise"]), seed
        )
        metrics["renderer_curve"] = {str(k): v for k, v in curve.items()}

    if not metrics:
        raise DependencyError(
            "nothing to evaluate: no stage2.ckpt or renderer.ckpt in the output directory"
        )
    (out / "eval.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    write_manifest(out, "eval", cfg, {"eval": "eval.json"}, metrics)
    logger.info("eval done: %s", metrics)
    return metrics


def cmd_invert(cfg: dict, embeddings: str, renderer_path: str, out_file: str, iters: int, noise: float) -> dict:
    cfgmod.apply_threads(cfg)
    model, enc, proj, _ = load_renderer(Path(renderer_path))
    phi = tasks_mod.make_phi(enc, proj)
    loaded = ckpt.load_checkpoint(embeddings)
    if "targets" not in loaded.tensors:
        raise ckpt.CheckpointFormatError("embeddings file must contain a 'targets' tensor")
    targets = loaded.tensors["targets"].to(torch.float32)
    if targets.ndim != 2 or targets.shape[1] != model.config.d:
        raise ckpt.CheckpointFormatError(
            f"targets must have shape [count, {model.config.d}], got {tuple(targets.shape)}"
        )
    if noise > 0:
        gen = torch_generator(int(cfg["seed"]), "invert-noise")
        targets = targets + noise * torch.randn(targets.shape, generator=gen)
    histories = renderer_mod.batch_invert_with_history(model, targets, phi, iters)
    rows = []
    for i, hist in enumerate(histories):
        best = hist[-1]
        rows.append(
            {
                "index": i,
                "text": vocab.decode(best.tokens),
                "score": best.score,
                "iteration": best.iteration,
                "truncated": best.truncated,
            }
        )
    with open(out_file, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    logger.info("inverted %d embeddings -> %s", len(rows), out_file)
    return {"count": len(rows)}


def cmd_gen_data(cfg: dict, family: str, count: int, out_file: str) -> dict:
    cfgmod.apply_threads(cfg)
    seed = int(cfg["seed"])
    enc = tasks_mod.ToyEmbedder(d_e=int(cfg["d_e"]), seed=int(cfg["embedder_seed"]))
    dcfg = cfgmod.denoiser_config(cfg)
    proj = make_projection(enc.embedding_dim, dcfg.d, torch_generator(seed, "proj-init"))
    rng = numpy_rng(seed, f"gen-data-{family}")
    rows = []
    if family in ("mc", "em"):
        for _ in range(count):
            if family == "mc":
                inst = tasks_mod.gen_mc_task(enc, proj, rng, k=int(cfg["rl"]["k"]), n_max=dcfg.n_max)
            else:
                inst = tasks_mod.gen_em_task(enc, proj, rng, n_max=dcfg.n_max)
            rows.append(tasks_mod.task_to_row(inst))
    elif family == "render":
        corpus = tasks_mod.gen_render_corpus(
            enc, proj, rng, size=count,
            lo=int(cfg["renderer"]["min_len"]), hi=int(cfg["renderer"]["max_len"]),
        )
        rows = [{"text": vocab.decode(tokens)} for tokens, _ in corpus]
    elif family == "copy":
        for _ in range(count):
            ex = tasks_mod.gen_copy_example(rng)
            rows.append(
                {
                    "family": "copy",
                    "prompt": vocab.decode(ex.prompt_tokens),
                    "spans": [vocab.decode(s) for s in ex.spans],
                }
            )
    else:
        raise cfgmod.ConfigError(f"unknown data family {family!r}")
    with open(out_file, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    logger.info("wrote %d %s rows to %s", len(rows), family, out_file)
    return {"count": len(rows)}


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def cmd_sweep(cfg: dict, axis: str, values: list | None) -> dict:
    cfgmod.apply_threads(cfg)
    out = prepare_out(cfg)
    seed = int(cfg["seed"])

    if axis == "alpha":
        points = [float(v) for v in values] if values else ALPHA_SWEEP
        base_path = Path(cfg["out_dir"]) / "renderer-base.ckpt"
        if not base_path.exists():
            raise DependencyError(
                f"alpha sweep requires a trained base renderer; expected {base_path}. "
                "Run train-renderer first."
            )
        enc, _, proj, snap = load_stage1(resolve_stage1(cfg, "renderer"))
        phi = tasks_mod.make_phi(enc, proj)
        train_pairs, eval_pairs = renderer_corpora(cfg, enc, proj)
        iters = int(cfg["renderer"]["iters"])
        noise = float(cfg["renderer"]["eval_noise"])
        summary = []
        for alpha in points:
            model, _, _, _ = load_renderer(base_path)
            rob = cfgmod.robust_train_config(cfg, alpha=alpha)
            renderer_mod.train_corrector_robust(model, train_pairs, rob, phi, seed)
            acc = renderer_mod.exact_match_rate(model, eval_pairs, phi, iters, noise, seed)
            summary.append({"alpha": alpha, "accuracy": acc})
            logger.info("alpha=%g -> noisy exact match %.3f", alpha, acc)
        path = out / "sweep_alpha_summary.json"
    elif axis == "iters":
        points = [int(v) for v in values] if values else ITER_SWEEP
        renderer_path = Path(cfg["out_dir"]) / "renderer.ckpt"
        if not renderer_path.exists():
            raise DependencyError(
                f"iteration sweep requires a trained renderer; expected {renderer_path}."
            )
        model, enc, proj, _ = load_renderer(renderer_path)
        phi = tasks_mod.make_phi(enc, proj)
        _, eval_pairs = renderer_corpora(cfg, enc, proj)
        curve = renderer_mod.exact_match_curve(
            model, eval_pairs, phi, points, float(cfg["renderer"]["eval_noise"]), seed
        )
        summary = [
            {"l_prime": b, "task": "toy-inversion", "accuracy": curve[b]} for b in sorted(points)
        ]
        path = out / "sweep_iters_summary.json"
    elif axis == "d_e":
        points = [int(v) for v in values] if values else DE_SWEEP
        summary = []
        for d_e in points:
            child = copy.deepcopy(cfg)
            child["d_e"] = d_e
            child["out_dir"] = str(out / f"sweep-d_e-{d_e}")
            cmd_pretrain(child)
            metrics = cmd_train_renderer(child)
            summary.append(
                {
                    "d_e": d_e,
                    "accuracy": metrics["noisy_exact_match"],
                    "clean_accuracy": metrics["clean_exact_match"],
                }
            )
        path = out / "sweep_d_e_summary.json"
    else:
        raise cfgmod.ConfigError(f"unknown sweep axis {axis!r}")

    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for row in summary:
        logger.info("sweep point: %s", row)
    write_manifest(out, f"sweep-{axis}", cfg, {"summary": path.name}, {"points": len(summary)})
    return {"summary": summary}


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fieldnames})


def cmd_export(metrics_dir: str, out_dir: str) -> dict:
    src = Path(metrics_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    produced = {}

    specs = [
        ("sweep_iters_summary.json", "iteration_curve.csv", ["l_prime", "task", "accuracy"]),
        ("sweep_alpha_summary.json", "alpha_sweep.csv", ["alpha", "accuracy"]),
        ("sweep_d_e_summary.json", "d_e_sweep.csv", ["d_e", "accuracy", "clean_accuracy"]),
    ]
    for name, csv_name, fields in specs:
        found = sorted(src.rglob(name))
        if not found:
            logger.warning("no %s under %s; skipping %s", name, src, csv_name)
            continue
        rows = []
        for f in found:
            rows.extend(json.loads(f.read_text()))
        write_csv(out / csv_name, fields, rows)
        produced[csv_name] = len(rows)

    jsonl_specs = [
        ("rl_metrics.jsonl", "rl_training.csv"),
        ("pretrain_metrics.jsonl", "pretrain_loss.csv"),
    ]
    for name, csv_name in jsonl_specs:
        found = sorted(src.rglob(name))
        if not found:
            logger.warning("no %s under %s; skipping %s", name, src, csv_name)
            continue
        rows = []
        for f in found:
            rows.extend(read_jsonl(f))
        if rows:
            write_csv(out / csv_name, list(rows[0].keys()), rows)
            produced[csv_name] = len(rows)

    if not produced:
        raise FileNotFoundError(f"no exportable metrics found under {src}")
    logger.info("exported: %s", produced)
    return produced


def add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="root seed for every derived stream")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", type=int, help="torch thread count")
    parser.add_argument("--preset", choices=["desk", "tiny", "paper-scale"])
    parser.add_argument("--d-e", type=int, dest="d_e", help="toy embedder dimensionality")


def common_overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    for key in ("seed", "threads", "preset", "d_e"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    return over


def section_overrides(args: argparse.Namespace, section: str, keys: dict[str, str]) -> dict:
    out = {}
    for attr, cfg_key in keys.items():
        if getattr(args, attr, None) is not None:
            out[cfg_key] = getattr(args, attr)
    return {section: out} if out else {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentplan",
        description="Latent-plan diffusion pipeline: pretrain, embedding-space RL, render.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="Stage I masked-reconstruction training")
    add_common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--corpus-size", type=int, dest="corpus_size")

    p = sub.add_parser("rl", help="Stage II PPO in embedding space")
    add_common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--beta-kl", type=float, dest="beta_kl")
    p.add_argument("--clip-eps", type=float, dest="clip_eps")
    p.add_argument("--family", choices=["mc", "em"])
    p.add_argument("--k", type=int)
    p.add_argument("--pool-size", type=int, dest="pool_size")
    p.add_argument("--tasks-file", dest="tasks_file")
    p.add_argument("--pretrain-checkpoint", dest="pretrain_checkpoint")
    p.add_argument("--gae", action="store_true", help="per-step GAE instead of shared advantages")
    p.add_argument("--dump-rollouts", action="store_true", dest="dump_rollouts")

    p = sub.add_parser("train-renderer", help="Stage III inversion training")
    add_common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--base-epochs", type=int, dest="base_epochs")
    p.add_argument("--corrector-epochs", type=int, dest="corrector_epochs")
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--eval-size", type=int, dest="eval_size")
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-noise", type=float, dest="eval_noise")
    p.add_argument("--corpus-file", dest="corpus_file")
    p.add_argument("--pretrain-checkpoint", dest="pretrain_checkpoint")

    p = sub.add_parser("eval", help="evaluate existing checkpoints")
    add_common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-noise", type=float, dest="eval_noise")
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--eval-size", type=int, dest="eval_size")

    p = sub.add_parser("invert", help="invert embeddings from a checkpoint file to text")
    add_common(p)
    p.add_argument("--embeddings", required=True, help="checkpoint file with a 'targets' tensor")
    p.add_argument("--renderer", required=True, help="trained renderer checkpoint")
    p.add_argument("--out-file", default="inverted.jsonl")
    p.add_argument("--iters", type=int, default=10, help="iteration budget L'")
    p.add_argument("--noise-eval", type=float, default=0.0, dest="noise_eval")

    p = sub.add_parser("gen-data", help="write synthetic task/corpus files")
    add_common(p)
    p.add_argument("--family", required=True, choices=["mc", "em", "render", "copy"])
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--out-file", default="tasks.jsonl")

    p = sub.add_parser("sweep", help="run an ablation axis")
    add_common(p)
    p.add_argument("--axis", required=True, choices=["alpha", "iters", "d_e"])
    p.add_argument("--values", help="comma-separated override of sweep points")
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--eval-size", type=int, dest="eval_size")
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-noise", type=float, dest="eval_noise")
    p.add_argument("--corrector-epochs", type=int, dest="corrector_epochs")

    p = sub.add_parser("export", help="tidy CSVs from run metrics")
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", default="export")

    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    overrides = common_overrides(args)
    cmd = args.command
    if cmd == "pretrain":
        overrides.update(
            section_overrides(
                args, "pretrain",
                {"steps": "steps", "batch_size": "batch_size", "lr": "lr", "corpus_size": "corpus_size"},
            )
        )
    elif cmd == "rl":
        overrides.update(
            section_overrides(
                args, "rl",
                {
                    "iterations": "iterations",
                    "episodes": "episodes_per_iter",
                    "beta_kl": "beta_kl",
                    "clip_eps": "clip_eps",
                    "family": "family",
                    "k": "k",
                    "pool_size": "pool_size",
                    "tasks_file": "tasks_file",
                    "pretrain_checkpoint": "pretrain_checkpoint",
                },
            )
        )
        rl_over = overrides.setdefault("rl", {})
        if args.gae:
            rl_over["shared_advantage"] = False
        if args.dump_rollouts:
            rl_over["dump_rollouts"] = True
    elif cmd in ("train-renderer", "eval", "sweep"):
        keys = {"iters": "iters", "eval_noise": "eval_noise"}
        if cmd in ("sweep", "eval"):
            keys.update({"train_size": "train_size", "eval_size": "eval_size"})
        if cmd == "sweep":
            keys["corrector_epochs"] = "corrector_epochs"
        if cmd == "train-renderer":
            keys.update(
                {
                    "alpha": "alpha",
                    "base_epochs": "base_epochs",
                    "corrector_epochs": "corrector_epochs",
                    "train_size": "train_size",
                    "eval_size": "eval_size",
                    "corpus_file": "corpus_file",
                    "pretrain_checkpoint": "pretrain_checkpoint",
                }
            )
        overrides.update(section_overrides(args, "renderer", keys))
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            cmd_export(args.metrics_dir, args.out)
            return 0
        cfg = resolve_config(args)
        if args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "rl":
            cmd_rl(cfg)
        elif args.command == "train-renderer":
            cmd_train_renderer(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "invert":
            cmd_invert(cfg, args.embeddings, args.renderer, args.out_file, args.iters, args.noise_eval)
        elif args.command == "gen-data":
            cmd_gen_data(cfg, args.family, args.count, args.out_file)
        elif args.command == "sweep":
            values = args.values.split(",") if args.values else None
            cmd_sweep(cfg, args.axis, values)
        return 0
    except (DependencyError, cfgmod.ConfigError, ckpt.CheckpointFormatError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
