"""Inference-time composition of diffusion policies.

The composed noise direction at every reverse step is

    base score
    + sum over task terms of  eps_u + alpha * (eps_c - eps_u)
    + sum over behavior terms of  gamma_c * J * grad c(denormalize(tau))
    + sum over domain terms of  gamma_D * eps_i(tau | t, obs_i, task)

where J is the diagonal Jacobian of the action denormalization. Summing
noise predictions sums scores, which samples from the product of the
component distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .costs import CostFunction
from .policy import (ActionBounds, DiffusionPolicy, NULL_TASK, Observation, TaskLabel, denormalize,
                     load_checkpoint, stack_observations)
from .schedule import NoiseSchedule, SamplerConfig, build_schedule, run_sampler

DIVERGENCE_LIMIT = 10.0


class CompositionError(RuntimeError):
    """A term failed or the composed sampler diverged."""


class IncompatiblePolicies(ValueError):
    pass


# -- terms --------------------------------------------------------------------------------


@dataclass
class TaskGuidance:
    policy: DiffusionPolicy
    task: TaskLabel
    alpha: float = 1.5
    obs: Observation | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class Behavior:
    cost: CostFunction
    gamma_c: float | None = None  # None -> cost.weight

    def __post_init__(self):
        if self.gamma_c is None:
            self.gamma_c = self.cost.weight
        if self.gamma_c < 0:
            raise ValueError("gamma_c must be >= 0")


@dataclass
class DomainPolicy:
    policy: DiffusionPolicy
    obs: Observation | None = None
    task: TaskLabel = NULL_TASK
    gamma_d: float = 0.1
    checkpoint: str | None = None

    def __post_init__(self):
        if self.gamma_d < 0:
            raise ValueError("gamma_D must be >= 0")


Term = Union[TaskGuidance, Behavior, DomainPolicy]


def term_label(term: Term, index: int) -> str:
    if index == 0:
        kind = "task" if isinstance(term, TaskGuidance) else "domain"
        return f"term 0 (base {kind} policy {term.policy.config.domain})"
    if isinstance(term, TaskGuidance):
        return f"term {index} (task {term.task.task or 'null'}, alpha={term.alpha})"
    if isinstance(term, Behavior):
        return f"term {index} (behavior {term.cost.kind}, gamma_c={term.gamma_c})"
    return f"term {index} (domain {term.policy.config.domain}, gamma_D={term.gamma_d})"


@dataclass
class CompositionSpec:
    """Base term plus additional terms, and the sampler that runs them.

    ``normalize_tasks`` divides the accumulated task-guidance terms (the base
    included when it is one) by their count K; the default adds each term's
    full guided expression, counting the unconditional score K times.
    """

    base: TaskGuidance | DomainPolicy
    terms: list = field(default_factory=list)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    normalize_tasks: bool = False

    def __post_init__(self):
        if isinstance(self.base, Behavior):
            raise ValueError("the base term must be a policy term")
        self.terms = list(self.terms)
        self.validate()

    @property
    def all_terms(self) -> list:
        return [self.base] + self.terms

    def policies(self) -> list[DiffusionPolicy]:
        return [t.policy for t in self.all_terms if not isinstance(t, Behavior)]

    @property
    def bounds(self) -> ActionBounds:
        return self.base.policy.bounds

    @property
    def schedule(self) -> NoiseSchedule:
        return self.base.policy.schedule

    def validate(self) -> None:
        ref = self.base.policy
        for i, term in enumerate(self.all_terms):
            if isinstance(term, Behavior):
                continue
            p = term.policy
            if not p.frozen:
                raise IncompatiblePolicies(f"{term_label(term, i)}: policy is not frozen")
            if (p.horizon, p.action_dim) != (ref.horizon, ref.action_dim):
                raise IncompatiblePolicies(
                    f"{term_label(term, i)}: trajectory space {(p.horizon, p.action_dim)} "
                    f"!= base {(ref.horizon, ref.action_dim)}")
            if not (np.array_equal(p.bounds.lo, ref.bounds.lo) and np.array_equal(p.bounds.hi, ref.bounds.hi)):
                raise IncompatiblePolicies(f"{term_label(term, i)}: action bounds differ from the base policy")
            if p.schedule.T != ref.schedule.T:
                raise IncompatiblePolicies(f"{term_label(term, i)}: T={p.schedule.T} != base T={ref.schedule.T}")
            if isinstance(term, TaskGuidance) and not p.supports_null_task:
                raise IncompatiblePolicies(f"{term_label(term, i)}: policy has no unconditional branch")

    def scaled(self, factor: float) -> "CompositionSpec":
        """Copy with every additional term's weight multiplied by ``factor``."""
        out = []
        for t in self.terms:
            if isinstance(t, Behavior):
                out.append(Behavior(t.cost, t.gamma_c * factor))
            elif isinstance(t, DomainPolicy):
                out.append(DomainPolicy(t.policy, t.obs, t.task, t.gamma_d * factor, t.checkpoint))
            else:
                out.append(TaskGuidance(t.policy, t.task, t.alpha * factor, t.obs, t.checkpoint))
        return CompositionSpec(self.base, out, self.sampler, self.normalize_tasks)

    # -- serialization ------------------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(t):
            if isinstance(t, Behavior):
                return {"type": "behavior", "cost": t.cost.to_dict(), "gamma_c": t.gamma_c}
            if t.checkpoint is None:
                raise ValueError("policy terms need a checkpoint path to be serialized")
            if isinstance(t, TaskGuidance):
                return {"type": "task", "checkpoint": t.checkpoint, "task": t.task.task, "alpha": t.alpha}
            return {"type": "domain", "checkpoint": t.checkpoint, "task": t.task.task, "gamma_d": t.gamma_d}
        return {"base": enc(self.base), "terms": [enc(t) for t in self.terms],
                "sampler": self.sampler.to_dict(), "normalize_tasks": self.normalize_tasks}

    @classmethod
    def from_dict(cls, d: dict, loader: Callable[[str], DiffusionPolicy] | None = None) -> "CompositionSpec":
        cache: dict[str, DiffusionPolicy] = {}
        load = loader or load_checkpoint

        def get(path):
            if path not in cache:
                cache[path] = load(path)
            return cache[path]

        def dec(e):
            kind = e["type"]
            if kind == "behavior":
                return Behavior(CostFunction.from_dict(e["cost"]), e.get("gamma_c"))
            task = TaskLabel(e.get("task"))
            if kind == "task":
                return TaskGuidance(get(e["checkpoint"]), task, float(e.get("alpha", 1.5)),
                                    checkpoint=e["checkpoint"])
            if kind == "domain":
                return DomainPolicy(get(e["checkpoint"]), task=task, gamma_d=float(e.get("gamma_d", 0.1)),
                                    checkpoint=e["checkpoint"])
            raise ValueError(f"unknown term type {kind!r}")

        return cls(dec(d["base"]), [dec(e) for e in d.get("terms", [])],
                   SamplerConfig(**d.get("sampler", {})), bool(d.get("normalize_tasks", False)))


# -- individual scores --------------------------------------------------------------------


def task_score(policy: DiffusionPolicy, traj: np.ndarray, t, obs, task: TaskLabel, alpha: float = 1.5) -> np.ndarray:
    """eps_u + alpha * (eps_c - eps_u)."""
    if not policy.supports_null_task:
        raise IncompatiblePolicies("policy was trained without task dropout; no unconditional branch")
    eps_u = policy.predict_noise(traj, t, obs, NULL_TASK)
    eps_c = policy.predict_noise(traj, t, obs, task)
    return eps_u + alpha * (eps_c - eps_u)


def behavior_score(cost: CostFunction, traj: np.ndarray, bounds: ActionBounds, gamma_c: float = 0.1,
                   start_pose: np.ndarray | None = None) -> np.ndarray:
    """gamma_c * J^T grad c evaluated on the denormalized trajectory."""
    if gamma_c == 0:
        return np.zeros(np.shape(traj))
    raw = denormalize(traj, bounds)
    return gamma_c * bounds.half_range * cost.grad(raw, start_pose)


def domain_score(policy: DiffusionPolicy, traj: np.ndarray, t, obs, task: TaskLabel = NULL_TASK,
                 gamma_d: float = 0.1) -> np.ndarray:
    eps = policy.predict_noise(traj, t, obs, task)
    return gamma_d * eps


# -- composed sampling --------------------------------------------------------------------


def _prepare(spec: CompositionSpec, observations, start_pose):
    """One ``fn(x, t) -> contribution`` per term, with encoder outputs cached."""
    terms = spec.all_terms
    if observations is None:
        observations = [None] * len(terms)
    elif not isinstance(observations, (list, tuple)):
        observations = [observations] * len(terms)
    if len(observations) != len(terms):
        raise ValueError(f"got {len(observations)} observations for {len(terms)} terms")
    n_task = sum(isinstance(t, TaskGuidance) for t in terms)
    task_scale = 1.0 / n_task if spec.normalize_tasks and n_task else 1.0
    bounds = spec.bounds
    fns = []
    for i, (term, obs) in enumerate(zip(terms, observations)):
        label = term_label(term, i)
        try:
            if isinstance(term, Behavior):
                fns.append((label, _behavior_fn(term, bounds, start_pose)))
                continue
            obs = obs if obs is not None else term.obs
            if obs is None and term.policy.modalities:
                raise ValueError("no observation supplied")
            emb = term.policy.encode(obs)
            if isinstance(term, TaskGuidance):
                fns.append((label, _task_fn(term, emb, task_scale)))
            else:
                weight = 1.0 if i == 0 else term.gamma_d
                fns.append((label, _domain_fn(term, emb, weight)))
        except Exception as exc:
            raise CompositionError(f"{label}: {exc}") from exc
    return fns


def _task_fn(term: TaskGuidance, emb, scale):
    p = term.policy
    u, c, a = p.task_onehot(NULL_TASK), p.task_onehot(term.task), term.alpha

    def fn(x, t):
        eps_u = p.eps_from_embedding(x, t, emb, u)
        eps_c = p.eps_from_embedding(x, t, emb, c)
        out = eps_u + a * (eps_c - eps_u)
        return out if scale == 1.0 else scale * out
    return fn


def _domain_fn(term: DomainPolicy, emb, weight):
    p = term.policy
    onehot = p.task_onehot(term.task)

    def fn(x, t):
        eps = p.eps_from_embedding(x, t, emb, onehot)
        return eps if weight == 1.0 else weight * eps
    return fn


def _behavior_fn(term: Behavior, bounds, start_pose):
    def fn(x, t):
        return behavior_score(term.cost, x, bounds, term.gamma_c, start_pose)
    return fn


def _direction(fns, x, t, record: dict | None = None) -> np.ndarray:
    total = None
    for label, fn in fns:
        try:
            c = fn(x, t)
        except Exception as exc:
            raise CompositionError(f"{label}: {exc}") from exc
        if record is not None:
            record[label] = c
        total = c if total is None else total + c
    if not np.all(np.isfinite(total)):
        raise CompositionError(f"non-finite composed direction at step {t}")
    return total


def composed_step_direction(spec: CompositionSpec, traj: np.ndarray, t: int, observations=None,
                            start_pose: np.ndarray | None = None) -> np.ndarray:
    """Summed noise direction for a trajectory ``(H, d)`` or batch ``(B, H, d)``."""
    traj = np.asarray(traj, dtype=np.float64)
    single = traj.ndim == 2
    x = traj[None] if single else traj
    out = _direction(_prepare(spec, observations, start_pose), x, t)
    return out[0] if single else out


def composed_sample(spec: CompositionSpec, observations=None, rng: np.random.Generator | None = None,
                    start_pose: np.ndarray | None = None, n: int | None = None) -> np.ndarray:
    """Run the configured reverse process on the composed direction.

    ``observations`` is one entry per term (base first) or a single entry
    shared by all; batches are passed as ``ObsBatch``. Returns normalized
    trajectories ``(B, H, d)`` with ``B`` the base batch size unless ``n``
    is given.
    """
    fns = _prepare(spec, observations, start_pose)
    policy = spec.base.policy
    if n is None:
        obs = observations[0] if isinstance(observations, (list, tuple)) else observations
        obs = obs if obs is not None else spec.base.obs
        if obs is None:
            raise ValueError("pass n when the base term has no observation")
        n = len(stack_observations(obs))
    rng = rng if rng is not None else spec.sampler.rng()
    last: dict = {}

    def eps_fn(x, t):
        last.clear()
        return _direction(fns, x, t, last)

    def guard(x, t):
        peak = float(np.max(np.abs(x)))
        if peak > DIVERGENCE_LIMIT:
            worst = max(last, key=lambda k: float(np.max(np.abs(last[k]))))
            raise CompositionError(f"composed sample diverged at step {t} (|tau|_inf={peak:.3g}); "
                                   f"dominated by {worst}")

    # run_sampler clips to [-1, 1] when the sampler asks for it
    return run_sampler(eps_fn, (n, policy.horizon, policy.action_dim), spec.schedule, spec.sampler, rng, guard)


# -- analytic reference models ------------------------------------------------------------


class AnalyticGaussianPolicy:
    """Exact noise predictor for 1-component Gaussian data N(mean, std^2) per entry.

    Quacks like a frozen DiffusionPolicy for composition; observations and
    task labels are ignored.
    """

    def __init__(self, mean: float, std: float = 1.0, horizon: int = 1, action_dim: int = 1,
                 schedule: NoiseSchedule | None = None, bounds: ActionBounds | None = None, domain="analytic"):
        self.mean = float(mean)
        self.std = float(std)
        self.horizon = horizon
        self.action_dim = action_dim
        self.schedule = schedule or build_schedule(100)
        self.bounds = bounds or ActionBounds.symmetric(1.0, action_dim)
        self.config = type("Cfg", (), {"domain": domain})()
        self.frozen = True
        self.supports_null_task = True
        self.modalities = ()

    def encode(self, obs) -> np.ndarray:
        return np.zeros((1, 1))

    def task_onehot(self, task) -> np.ndarray:
        return np.zeros((1, 1))

    def eps_from_embedding(self, x, t, emb, onehot) -> np.ndarray:
        ab = self.schedule.alpha_bars[int(t)]
        var = ab * self.std ** 2 + (1.0 - ab)
        return math.sqrt(1.0 - ab) * (x - math.sqrt(ab) * self.mean) / var

    def predict_noise(self, traj, t, obs=None, task=None) -> np.ndarray:
        return self.eps_from_embedding(np.asarray(traj, float), t, None, None)


def gaussian_product(means: Sequence[float], stds: Sequence[float]) -> tuple[float, float]:
    """Mean and variance of the normalized product of 1-d Gaussians."""
    prec = np.array([1.0 / s ** 2 for s in stds])
    var = 1.0 / prec.sum()
    return float(var * np.dot(prec, means)), float(var)


def discrete_product(*dists: np.ndarray) -> np.ndarray:
    """Normalized elementwise product of distributions over a finite alphabet."""
    out = np.ones_like(np.asarray(dists[0], dtype=np.float64))
    for p in dists:
        out = out * np.asarray(p, dtype=np.float64)
    z = out.sum()
    if z <= 0:
        raise ValueError("product of distributions has no common support")
    return out / z
