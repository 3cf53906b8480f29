"""Turning episodes into training windows and running the optimizer loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..bench import BenchConfig, DEFAULT_CONFIG, Dataset, load_dataset, obs_feature_shape, stack_history
from ..policy import (ActionBounds, DiffusionPolicy, ObsBatch, PolicyConfig, normalize, save_checkpoint,
                      stack_observations)
from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass
class Windows:
    """Aligned training arrays for one modality."""

    obs: ObsBatch
    task_idx: np.ndarray
    traj: np.ndarray          # (n, H, d) normalized

    def __len__(self) -> int:
        return self.traj.shape[0]


def bench_bounds(config: BenchConfig = DEFAULT_CONFIG, dim: int = 2) -> ActionBounds:
    return ActionBounds.symmetric(config.action_limit, dim)


def make_windows(episodes: Sequence, horizon: int, bounds: ActionBounds, tasks: Sequence[str],
                 history: int = 1) -> Windows:
    """One window per step: observation history at i, actions i..i+H-1 zero-padded (rest)."""
    if not episodes:
        raise ValueError("no episodes")
    obs, idx, trajs = [], [], []
    for ep in episodes:
        acts = np.asarray(ep.actions, dtype=np.float64)
        n, d = acts.shape
        padded = np.concatenate([acts, np.zeros((horizon, d))])
        for i in range(n):
            obs.append(stack_history(ep.observations[:i + 1], history))
            idx.append(list(tasks).index(ep.task))
            trajs.append(padded[i:i + horizon])
    return Windows(stack_observations(obs), np.array(idx), normalize(np.stack(trajs), bounds))


@dataclass
class TrainResult:
    policy: DiffusionPolicy
    losses: list
    seconds: float


def train_policy(windows: Sequence[Windows], config: PolicyConfig, bounds: ActionBounds, steps: int,
                 batch_size: int = 64, seed: int = 0, log_every: int = 100) -> TrainResult:
    """Train one policy; with several window sets (one per modality) batches alternate between them."""
    mods = [w.obs.modality for w in windows]
    for m in mods:
        if m not in config.modalities:
            raise ValueError(f"dataset modality {m!r} not among policy modalities {config.modalities}")
    policy = DiffusionPolicy(config, bounds)
    rng = np.random.default_rng(seed)
    losses, window_loss = [], []
    t0 = time.perf_counter()
    for it in range(steps):
        w = windows[it % len(windows)]
        b = rng.integers(0, len(w), size=min(batch_size, len(w)))
        window_loss.append(policy.train_step(w.obs.take(b), w.task_idx[b], w.traj[b], rng))
        if (it + 1) % log_every == 0 or it + 1 == steps:
            losses.append(float(np.mean(window_loss)))
            window_loss = []
            log.debug("step %d loss %.4f", it + 1, losses[-1])
    policy.freeze()
    return TrainResult(policy, losses, time.perf_counter() - t0)


def policy_config_for(cfg: RunConfig, bench: BenchConfig = DEFAULT_CONFIG) -> PolicyConfig:
    kw = dict(
        horizon=cfg.horizon,
        action_dim=2,
        modalities=tuple(cfg.modalities),
        obs_dims={m: obs_feature_shape(m, cfg.history, bench) for m in cfg.modalities},
        tasks=tuple(cfg.tasks),
        domain=cfg.domain,
        lr=cfg.lr,
        seed=cfg.seed,
    )
    kw.update(cfg.policy)
    return PolicyConfig(**kw)


def load_training_sets(cfg: RunConfig, bounds: ActionBounds) -> list[Windows]:
    out = []
    for path in cfg.datasets:
        ds: Dataset = load_dataset(path)
        eps = [e for e in ds.episodes if e.task in cfg.tasks]
        if not eps:
            raise ValueError(f"{path}: no episodes for tasks {cfg.tasks}")
        mod = eps[0].observations[0].modality
        if mod not in cfg.modalities:
            raise ValueError(f"{path}: dataset modality {mod!r} not in configured modalities {cfg.modalities}")
        out.append(make_windows(eps, cfg.horizon, bounds, cfg.tasks, cfg.history))
    return out


def train(cfg: RunConfig) -> Path:
    """Train from dataset files and write the checkpoint plus a loss record."""
    if not cfg.datasets:
        raise ValueError("config lists no datasets")
    bounds = bench_bounds()
    pcfg = policy_config_for(cfg)
    sets = load_training_sets(cfg, bounds)
    result = train_policy(sets, pcfg, bounds, cfg.train_steps, cfg.batch_size, cfg.seed, cfg.log_every)
    out = Path(cfg.out_dir) / cfg.name
    ckpt = save_checkpoint(result.policy, out / "policy.ckpt")
    (out / "losses.json").write_text(json.dumps({"log_every": cfg.log_every, "losses": result.losses,
                                                 "seconds": result.seconds, "fingerprint": cfg.fingerprint()}))
    return ckpt
