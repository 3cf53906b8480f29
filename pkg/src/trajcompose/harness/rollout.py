"""Receding-horizon rollouts and evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..bench import (BenchConfig, DEFAULT_CONFIG, DomainProfile, Scene, TRAIN_SEED_LIMIT, expert_plan, is_success,
                     make_scene, observe, stack_history, step)
from ..compose import Behavior, CompositionSpec, composed_sample
from ..costs import integrate_actions, pose_violation, smoothness_cost
from ..policy import DiffusionPolicy, NULL_TASK, TaskLabel, denormalize, stack_observations
from ..schedule import SamplerConfig


class SeedOverlapError(ValueError):
    pass


# -- controllers --------------------------------------------------------------------------


class _FrameBuffers:
    """Per-scene observation history for each rendering profile."""

    def __init__(self, history: int):
        self.history = history
        self.frames: dict = {}

    def reset(self):
        self.frames = {}

    def observe(self, key, scenes, idx, profile: DomainProfile, rng, config):
        out = []
        for s, i in zip(scenes, idx):
            buf = self.frames.setdefault((key, i), [])
            buf.append(observe(s, profile, rng, config))
            out.append(stack_history(buf, self.history))
        return stack_observations(out)


class PolicyController:
    """Samples from a single policy, conditioned on the scene task or on the null task."""

    def __init__(self, policy: DiffusionPolicy, profile: DomainProfile, sampler: SamplerConfig | None = None,
                 conditioned: bool = True, history: int = 1, config: BenchConfig = DEFAULT_CONFIG):
        if profile.modality not in policy.modalities:
            raise ValueError(f"profile modality {profile.modality!r} not served by policy {policy.modalities}")
        self.policy = policy
        self.profile = profile
        self.sampler = sampler or SamplerConfig()
        self.conditioned = conditioned
        self.buffers = _FrameBuffers(history)
        self.config = config
        self.horizon = policy.horizon

    def reset(self, scenes):
        self.buffers.reset()

    def plan(self, scenes: Sequence[Scene], idx: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        obs = self.buffers.observe(0, scenes, idx, self.profile, rng, self.config)
        tasks = [TaskLabel(s.task) if self.conditioned else NULL_TASK for s in scenes]
        x = self.policy.sample(obs, tasks, self.sampler, rng)
        return denormalize(x, self.policy.bounds)


class ComposedController:
    """Samples from a composition built per task.

    ``build_spec(task)`` returns the spec; ``profiles[i]`` renders the
    observation of term ``i`` (base first; ignored for behavior terms).
    Workspace costs are integrated from each scene's current tool position.
    """

    def __init__(self, build_spec: Callable[[str], CompositionSpec], profiles: Sequence[DomainProfile | None],
                 history: int = 1, config: BenchConfig = DEFAULT_CONFIG, horizon: int = 16):
        self.build_spec = build_spec
        self.horizon = horizon
        self.profiles = list(profiles)
        self.buffers = _FrameBuffers(history)
        self.config = config
        self._specs: dict = {}

    def spec(self, task: str) -> CompositionSpec:
        if task not in self._specs:
            self._specs[task] = self.build_spec(task)
        return self._specs[task]

    def reset(self, scenes):
        self.buffers.reset()

    def plan(self, scenes: Sequence[Scene], idx: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        out = None
        for task in sorted({s.task for s in scenes}):
            sel = [j for j, s in enumerate(scenes) if s.task == task]
            sub = [scenes[j] for j in sel]
            sub_idx = [idx[j] for j in sel]
            spec = self.spec(task)
            if spec.base.policy.horizon != self.horizon:
                raise ValueError(f"controller horizon {self.horizon} != policy horizon {spec.base.policy.horizon}")
            if len(self.profiles) != len(spec.all_terms):
                raise ValueError(f"{len(self.profiles)} profiles for {len(spec.all_terms)} terms")
            obs, rendered = [], {}
            for term, prof in zip(spec.all_terms, self.profiles):
                if isinstance(term, Behavior) or prof is None:
                    obs.append(None)
                    continue
                if prof not in rendered:
                    rendered[prof] = self.buffers.observe(prof, sub, sub_idx, prof, rng, self.config)
                obs.append(rendered[prof])
            start = np.stack([s.tool for s in sub])
            x = composed_sample(spec, obs, rng, start_pose=start, n=len(sub))
            raw = denormalize(x, spec.bounds)
            if out is None:
                out = np.zeros((len(scenes),) + raw.shape[1:])
            out[sel] = raw
        return out


class ExpertController:
    """Replays the expert plan; the oracle upper bound."""

    def __init__(self, horizon: int = 16, config: BenchConfig = DEFAULT_CONFIG):
        self.horizon = horizon
        self.config = config
        self.plans: dict = {}

    def reset(self, scenes):
        self.plans = {i: expert_plan(s, self.config) for i, s in enumerate(scenes)}

    def plan(self, scenes, idx, rng):
        out = np.zeros((len(scenes), self.horizon, 2))
        for j, (s, i) in enumerate(zip(scenes, idx)):
            chunk = self.plans[i][s.steps:s.steps + self.horizon]
            out[j, :len(chunk)] = chunk
        return out


# -- rollouts -----------------------------------------------------------------------------


@dataclass
class RolloutResult:
    scene: Scene              # initial scene
    final: Scene
    actions: np.ndarray       # executed raw actions (L, d)
    poses: np.ndarray         # (L + 1, d)
    success: bool
    plans: int


def rollout(controller, scenes: Sequence[Scene], k: int = 4, rng: np.random.Generator | None = None,
            config: BenchConfig = DEFAULT_CONFIG) -> list[RolloutResult]:
    """Plan H steps, execute the first k, re-observe; until success or the episode cap.

    All scenes advance together so that planning runs batched.
    """
    horizon = getattr(controller, "horizon", 16)
    if not 1 <= k <= horizon:
        raise ValueError(f"execution length k={k} must be in [1, {horizon}]")
    rng = rng if rng is not None else np.random.default_rng(0)
    states = list(scenes)
    executed = [[] for _ in states]
    plans = [0] * len(states)
    done = [is_success(s, config) or s.steps >= config.episode_cap for s in states]
    controller.reset(states)
    while not all(done):
        active = [i for i, d in enumerate(done) if not d]
        chunk = controller.plan([states[i] for i in active], active, rng)
        for j, i in enumerate(active):
            plans[i] += 1
            for a in chunk[j][:k]:
                a = np.clip(a, -config.action_limit, config.action_limit)
                states[i] = step(states[i], a, config)
                executed[i].append(a)
                if is_success(states[i], config) or states[i].steps >= config.episode_cap:
                    done[i] = True
                    break
    out = []
    for s0, s, acts, n in zip(scenes, states, executed, plans):
        a = np.array(acts).reshape(-1, 2)
        out.append(RolloutResult(s0, s, a, integrate_actions(a, s0.tool), is_success(s, config), n))
    return out


# -- metrics and reports ------------------------------------------------------------------


def smoothness_metric(actions: np.ndarray, half_range: float | np.ndarray) -> float:
    """Mean squared second difference of normalized actions (0 for fewer than 3 steps)."""
    a = np.asarray(actions, dtype=np.float64) / half_range
    if a.shape[0] < 3:
        return 0.0
    return smoothness_cost(a) / (a.shape[0] - 2)


def workspace_metric(poses: np.ndarray, box: float) -> float:
    """Mean per-pose squared hinge violation of the safety box (cm^2)."""
    return float(np.mean(pose_violation(poses, -box, box)))


@dataclass
class EvalReport:
    tasks: dict                      # task -> {"success", "stderr", "n", "successes"}
    success: float
    stderr: float
    smoothness: float
    workspace: float
    episodes: int
    fingerprint: str
    repeat_success: list = field(default_factory=list)
    task_repeats: dict = field(default_factory=dict)   # task -> per-repeat success rates
    task_spread: float = 0.0         # std of per-task rates
    repeat_spread: float = 0.0       # std of per-repeat rates

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def _stderr(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n) if n else 0.0


def check_held_out(eval_seeds: Iterable[int], train_seeds: Iterable[int] = ()) -> None:
    eval_seeds = set(eval_seeds)
    low = sorted(s for s in eval_seeds if s < TRAIN_SEED_LIMIT)
    if low:
        raise SeedOverlapError(f"evaluation seeds in the training range: {low[:5]}")
    both = eval_seeds & set(train_seeds)
    if both:
        raise SeedOverlapError(f"evaluation seeds used for training: {sorted(both)[:5]}")


def summarize(results: dict, fingerprint: str = "", config: BenchConfig = DEFAULT_CONFIG) -> EvalReport:
    """``results[(task, repeat)]`` lists of RolloutResult -> EvalReport."""
    tasks = sorted({t for t, _ in results})
    repeats = sorted({r for _, r in results})
    per_task = {}
    all_res = [r for v in results.values() for r in v]
    for t in tasks:
        rs = [r for (tt, _), v in results.items() if tt == t for r in v]
        n = len(rs)
        s = sum(r.success for r in rs)
        per_task[t] = {"success": s / n, "stderr": _stderr(s / n, n), "n": n, "successes": s}
    task_reps = {t: [float(np.mean([x.success for x in results[(t, r)]])) for r in repeats if (t, r) in results]
                 for t in tasks}
    rep = []
    for r in repeats:
        rs = [x for (_, rr), v in results.items() if rr == r for x in v]
        rep.append(sum(x.success for x in rs) / len(rs))
    n = len(all_res)
    p = sum(r.success for r in all_res) / n
    half = config.action_limit
    return EvalReport(
        tasks=per_task, success=p, stderr=_stderr(p, n),
        smoothness=float(np.mean([smoothness_metric(r.actions, half) for r in all_res])),
        workspace=float(np.mean([workspace_metric(r.poses, config.safety_box) for r in all_res])),
        episodes=n, fingerprint=fingerprint, repeat_success=rep, task_repeats=task_reps,
        task_spread=float(np.std([v["success"] for v in per_task.values()])),
        repeat_spread=float(np.std(rep)),
    )


def evaluate(controller, tasks: Sequence[str], n_scenes: int = 50, repeats: int = 3, k: int = 4,
             seed: int = 0, seed_offset: int = 0, fingerprint: str = "", train_seeds: Iterable[int] = (),
             config: BenchConfig = DEFAULT_CONFIG) -> EvalReport:
    """Roll out on held-out scenes: ``repeats`` disjoint blocks of ``n_scenes`` per task."""
    from ..bench import TEST_SEED_BASE
    train_seeds = set(train_seeds)
    results = {}
    for r in range(repeats):
        seeds = list(range(TEST_SEED_BASE + seed_offset + r * 100_000,
                           TEST_SEED_BASE + seed_offset + r * 100_000 + n_scenes))
        check_held_out(seeds, train_seeds)
        for t in tasks:
            rng = np.random.default_rng([seed, r, list(tasks).index(t)])
            scenes = [make_scene(t, s, config) for s in seeds]
            results[(t, r)] = rollout(controller, scenes, k, rng, config)
    return summarize(results, fingerprint, config)
