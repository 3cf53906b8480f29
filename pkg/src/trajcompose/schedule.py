"""Noise schedules and reverse-diffusion step arithmetic.

All schedule tables are float64. Trajectories passed through the samplers
are promoted to float64 as well: near ``t = T-1`` the cosine schedule has
``alpha_bar`` around 1e-7, and recovering a clean sample divides by its
square root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

SCHEDULE_KINDS = ("squaredcos_cap_v2", "linear")
SAMPLER_MODES = ("ancestral", "implicit", "langevin")
MAX_BETA = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "squaredcos_cap_v2"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t <= 0 else float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at t = 0."""
        if t == 0:
            return 0.0
        return float(self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]))

    def snr(self) -> np.ndarray:
        return self.alpha_bars / (1.0 - self.alpha_bars)

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _cosine_alpha_bar(s: np.ndarray) -> np.ndarray:
    return np.cos((s + 0.008) / 1.008 * math.pi / 2) ** 2


def build_schedule(T: int = 100, kind: str = "squaredcos_cap_v2", beta_end: float = 0.02,
                   beta_start: float = 1e-4) -> NoiseSchedule:
    """Build beta / alpha tables for ``T`` diffusion steps.

    ``squaredcos_cap_v2`` is the capped cosine schedule; like the common
    scheduler libraries it does not use ``beta_end``, which is kept on the
    schedule for the record and used by ``linear``.
    """
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < beta_end < 1.0:
        raise ScheduleError(f"beta_end must lie in (0, 1), got {beta_end}")
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    T = int(T)
    if kind == "linear":
        if not 0.0 < beta_start < beta_end:
            raise ScheduleError("linear schedule needs 0 < beta_start < beta_end")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        s = np.arange(T + 1, dtype=np.float64) / T
        ab = _cosine_alpha_bar(s)
        betas = np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, kind=kind,
                         beta_start=float(beta_start), beta_end=float(beta_end))


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray | float:
    """Index a schedule table by a scalar or per-sample step and broadcast over trailing axes."""
    v = values[t]
    if np.ndim(v) == 0:
        return float(v)
    return np.reshape(v, np.shape(v) + (1,) * (ndim - 1))


def forward_noise(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Corrupt ``x0`` to step ``t``: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ScheduleError(f"noise shape {eps.shape} != trajectory shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ScheduleError(f"step {t} outside [0, {schedule.T})")
    ab = _coef(schedule.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(schedule: NoiseSchedule, x_t: np.ndarray, t: int, eps_hat: np.ndarray) -> np.ndarray:
    ab = float(schedule.alpha_bars[t])
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def _check(schedule: NoiseSchedule, x_t: np.ndarray, t: int, eps_hat: np.ndarray) -> None:
    if np.shape(x_t) != np.shape(eps_hat):
        raise ScheduleError(f"prediction shape {np.shape(eps_hat)} != sample shape {np.shape(x_t)}")
    if not 0 <= t < schedule.T:
        raise ScheduleError(f"step {t} outside [0, {schedule.T})")


def reverse_step(schedule: NoiseSchedule, x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                 rng: np.random.Generator | None, clip_sample: bool = False) -> np.ndarray:
    """Ancestral update x_{t-1} = (x_t - gamma_t * eps_hat) / sqrt(alpha_t) + sigma_t * z.

    gamma_t = beta_t / sqrt(1 - ab_t) and sigma_t^2 is the posterior
    variance, which is zero at t = 0. With ``clip_sample`` the implied clean
    sample is clipped to [-1, 1] before forming the posterior mean.
    """
    _check(schedule, x_t, t, eps_hat)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    beta = float(schedule.betas[t])
    ab = float(schedule.alpha_bars[t])
    if clip_sample:
        x0 = np.clip(predict_x0(schedule, x_t, t, eps_hat), -1.0, 1.0)
        ab_prev = schedule.alpha_bar_prev(t)
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = math.sqrt(float(schedule.alphas[t])) * (1.0 - ab_prev) / (1.0 - ab)
        mean = c0 * x0 + ct * x_t
    else:
        gamma = beta / math.sqrt(1.0 - ab)
        mean = (x_t - gamma * eps_hat) / math.sqrt(float(schedule.alphas[t]))
    var = schedule.posterior_variance(t)
    if var > 0.0:
        mean = mean + math.sqrt(var) * rng.standard_normal(mean.shape)
    return mean


def implicit_step(schedule: NoiseSchedule, x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
                  rng: np.random.Generator | None = None, eta: float = 0.0,
                  clip_sample: bool = False) -> np.ndarray:
    """Strided implicit (DDIM) update from step ``t`` to ``t_prev``; ``t_prev = -1`` is the clean end."""
    _check(schedule, x_t, t, eps_hat)
    if not -1 <= t_prev < t:
        raise ScheduleError(f"t_prev={t_prev} must be in [-1, {t})")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab = float(schedule.alpha_bars[t])
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bars[t_prev])
    x0 = predict_x0(schedule, x_t, t, eps_hat)
    if clip_sample:
        x0 = np.clip(x0, -1.0, 1.0)
        # re-derive the noise direction consistent with the clipped estimate
        eps_hat = (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(max(1.0 - ab / ab_prev, 0.0))
    direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    out = math.sqrt(ab_prev) * x0 + direction
    if sigma > 0.0:
        out = out + sigma * rng.standard_normal(out.shape)
    return out


def langevin_step(schedule: NoiseSchedule, x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                  rng: np.random.Generator, step_scale: float = 0.5, final: bool = False) -> np.ndarray:
    """Annealed Langevin update x - delta * grad E + sqrt(2 delta) z at noise level ``t``.

    The energy gradient is eps_hat / sqrt(1 - ab_t) and the step size is
    delta = step_scale * (1 - ab_t), proportional to the level's noise
    variance. ``final`` drops the injected noise.
    """
    _check(schedule, x_t, t, eps_hat)
    x_t = np.asarray(x_t, dtype=np.float64)
    var = 1.0 - float(schedule.alpha_bars[t])
    delta = step_scale * var
    out = x_t - (delta / math.sqrt(var)) * np.asarray(eps_hat, dtype=np.float64)
    if not final:
        out = out + math.sqrt(2.0 * delta) * rng.standard_normal(out.shape)
    return out


def implicit_sample_steps(T: int, n: int) -> np.ndarray:
    """``n`` evenly strided, strictly increasing steps ending at ``T - 1``."""
    if not 1 <= n <= T:
        raise ScheduleError(f"need 1 <= n <= T, got n={n}, T={T}")
    i = np.arange(n)
    return (T - 1 - ((n - 1 - i) * T) // n).astype(np.int64)


@dataclass(frozen=True)
class SamplerConfig:
    """How to run the reverse process.

    ``ancestral`` walks every training step; ``implicit`` walks the strided
    subsequence with stochasticity ``eta`` (0 is deterministic);
    ``langevin`` runs ``langevin_inner`` annealed Langevin updates at each
    level of the strided subsequence.
    """

    mode: str = "implicit"
    n_steps: int = 16
    eta: float = 0.0
    seed: int = 0
    clip_sample: bool = True
    langevin_step: float = 0.5
    langevin_inner: int = 2

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ScheduleError(f"unknown sampler mode {self.mode!r}")
        if self.n_steps < 1:
            raise ScheduleError("n_steps must be >= 1")
        if self.eta < 0 or self.langevin_step <= 0 or self.langevin_inner < 1:
            raise ScheduleError("eta >= 0, langevin_step > 0 and langevin_inner >= 1 required")

    def steps(self, T: int) -> np.ndarray:
        if self.mode == "ancestral":
            return np.arange(T, dtype=np.int64)
        return implicit_sample_steps(T, self.n_steps)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        return dict(mode=self.mode, n_steps=self.n_steps, eta=self.eta, seed=self.seed,
                    clip_sample=self.clip_sample, langevin_step=self.langevin_step,
                    langevin_inner=self.langevin_inner)


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def run_sampler(eps_fn: EpsFn, shape: tuple[int, ...], schedule: NoiseSchedule, config: SamplerConfig,
                rng: np.random.Generator, guard: Callable[[np.ndarray, int], None] | None = None) -> np.ndarray:
    """Run the reverse process from standard Gaussian noise.

    ``eps_fn(x, t)`` returns the (possibly composed) noise prediction;
    ``guard(x, t)`` is called after every update and may raise.
    """
    x = rng.standard_normal(shape)
    steps = config.steps(schedule.T)
    clip = config.clip_sample
    if config.mode == "ancestral":
        for t in steps[::-1]:
            x = reverse_step(schedule, x, int(t), eps_fn(x, int(t)), rng, clip_sample=clip)
            if guard is not None:
                guard(x, int(t))
    elif config.mode == "implicit":
        for j in range(len(steps) - 1, -1, -1):
            t = int(steps[j])
            t_prev = int(steps[j - 1]) if j > 0 else -1
            x = implicit_step(schedule, x, t, t_prev, eps_fn(x, t), rng, eta=config.eta, clip_sample=clip)
            if guard is not None:
                guard(x, t)
    else:
        for j in range(len(steps) - 1, -1, -1):
            t = int(steps[j])
            for k in range(config.langevin_inner):
                last = j == 0 and k == config.langevin_inner - 1
                x = langevin_step(schedule, x, t, eps_fn(x, t), rng, config.langevin_step, final=last)
                if guard is not None:
                    guard(x, t)
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x
