"""Conditional trajectory diffusion policy.

One network serves both the task-conditioned and the unconditional branch:
the task embedding table has one extra row for the null task, and training
replaces the task with the null row at rate ``cfg_drop``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndnet import Graph, OptState, ParamSet, NonFiniteError, opt_step
from .schedule import NoiseSchedule, SamplerConfig, build_schedule, forward_noise, run_sampler

TASKS = ("spatula", "knife", "hammer", "wrench")
MODALITIES = ("state", "points", "grid")
CHECKPOINT_MAGIC = b"TJCK"
CHECKPOINT_VERSION = 1


class PolicyStateError(RuntimeError):
    """Sampling from a policy still in training, or training a frozen one."""


class ModalityError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- action normalization -----------------------------------------------------------------


@dataclass(frozen=True)
class ActionBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("action bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError(f"action bounds need lo < hi, got {lo} / {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def half_range(self) -> np.ndarray:
        """Jacobian of denormalize (diagonal)."""
        return (self.hi - self.lo) / 2.0

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def symmetric(cls, limit: float, dim: int) -> "ActionBounds":
        return cls(np.full(dim, -float(limit)), np.full(dim, float(limit)))


def normalize(raw: np.ndarray, bounds: ActionBounds, tolerance: float = 0.1) -> np.ndarray:
    """Affine map to [-1, 1] per dimension.

    Values more than ``tolerance`` of the range outside the bounds indicate
    mis-scaled data and raise.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw actions contain non-finite values")
    slack = tolerance * (bounds.hi - bounds.lo)
    if np.any(raw < bounds.lo - slack) or np.any(raw > bounds.hi + slack):
        worst = np.max(np.maximum(bounds.lo - raw, raw - bounds.hi))
        raise ValueError(f"actions exceed bounds by {worst:.4g}, more than {tolerance:.0%} of the range")
    return (raw - bounds.lo) / bounds.half_range - 1.0


def denormalize(x: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * bounds.half_range + bounds.lo


# -- observations and tasks ---------------------------------------------------------------


@dataclass
class Observation:
    """A stack of ``history`` frames in one modality.

    data shapes: state ``(h, k)``; points ``(h, N, 4)`` with columns
    x, y, mask (1 tool / 0 object), valid; grid ``(h, C, Hg, Wg)`` in [0, 1].
    """

    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ModalityError(f"unknown modality {self.modality!r}")
        self.data = np.asarray(self.data, dtype=np.float32)
        want = {"state": 2, "points": 3, "grid": 4}[self.modality]
        if self.data.ndim != want:
            raise ValueError(f"{self.modality} observation needs {want} dims, got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("observation history must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("observation contains non-finite values")
        if self.modality == "points":
            if self.data.shape[-1] != 4:
                raise ValueError("point features must be (x, y, mask, valid)")
            flags = self.data[..., 2:]
            if not np.all((flags == 0) | (flags == 1)):
                raise ValueError("point mask and valid channels must be 0/1")
        if self.modality == "grid" and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("grid observations must lie in [0, 1]")

    @property
    def history(self) -> int:
        return self.data.shape[0]

    def features(self) -> tuple[np.ndarray, np.ndarray | None]:
        """Encoder input for one observation: (features, valid mask or None)."""
        h = self.history
        if self.modality == "points":
            n = self.data.shape[1]
            age = np.repeat(-np.arange(h, dtype=np.float32) / h, n)[:, None]
            flat = self.data.reshape(h * n, 4)
            return np.concatenate([flat[:, :3], age], axis=1), flat[:, 3].copy()
        return self.data.reshape(-1), None


@dataclass
class ObsBatch:
    modality: str
    features: np.ndarray
    valid: np.ndarray | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "ObsBatch":
        return ObsBatch(self.modality, self.features[idx], None if self.valid is None else self.valid[idx])


def stack_observations(obs: Sequence[Observation] | Observation | ObsBatch) -> ObsBatch:
    if isinstance(obs, ObsBatch):
        return obs
    if isinstance(obs, Observation):
        obs = [obs]
    mods = {o.modality for o in obs}
    if len(mods) != 1:
        raise ModalityError(f"mixed modalities in one batch: {sorted(mods)}")
    feats, valids = zip(*(o.features() for o in obs))
    valid = None if valids[0] is None else np.stack(valids)
    return ObsBatch(obs[0].modality, np.stack(feats), valid)


@dataclass(frozen=True)
class TaskLabel:
    """A task id, or the null task when ``task`` is None."""

    task: str | None = None

    @property
    def is_null(self) -> bool:
        return self.task is None

    def index(self, tasks: Sequence[str]) -> int:
        if self.task is None:
            return len(tasks)
        if self.task not in tasks:
            raise ValueError(f"task {self.task!r} not in {tuple(tasks)}")
        return list(tasks).index(self.task)


NULL_TASK = TaskLabel(None)


def classifier_free_dropout(task_idx: np.ndarray, p: float, null_index: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Replace each task index by the null index with probability ``p``."""
    task_idx = np.asarray(task_idx)
    drop = rng.random(task_idx.shape) < p
    return np.where(drop, null_index, task_idx)


# -- the policy ---------------------------------------------------------------------------


@dataclass
class PolicyConfig:
    horizon: int = 16
    action_dim: int = 2
    modalities: tuple[str, ...] = ("points",)
    obs_dims: dict = field(default_factory=dict)  # modality -> feature shape (without batch)
    tasks: tuple[str, ...] = TASKS
    domain: str = "sim"
    T: int = 100
    schedule_kind: str = "squaredcos_cap_v2"
    beta_end: float = 0.02
    hidden: int = 256
    depth: int = 3
    time_dim: int = 32
    task_dim: int = 16
    obs_dim: int = 64
    enc_hidden: int = 64
    cfg_drop: float = 0.1
    lr: float = 1e-3
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.tasks = tuple(self.tasks)
        self.obs_dims = {k: tuple(v) for k, v in self.obs_dims.items()}
        for m in self.modalities:
            if m not in MODALITIES:
                raise ModalityError(f"unknown modality {m!r}")
            if m not in self.obs_dims:
                raise ValueError(f"obs_dims missing modality {m!r}")
        if not 0.0 <= self.cfg_drop < 1.0:
            raise ValueError("cfg_drop must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["tasks"] = list(self.tasks)
        d["obs_dims"] = {k: list(v) for k, v in self.obs_dims.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


def _encoder(g: Graph, modality: str, cfg: PolicyConfig) -> int:
    shape = cfg.obs_dims[modality]
    pre = f"enc.{modality}"
    x = g.input("obs", (None,) + shape)
    if modality == "points":
        valid = g.input("valid", (None, shape[0]))
        h = g.act(g.linear(x, cfg.enc_hidden, f"{pre}.l1"), "relu")
        h = g.act(g.linear(h, cfg.enc_hidden, f"{pre}.l2"), "relu")
        pooled = g.reduce(h, "max", axis=1, mask=valid)
        return g.linear(pooled, cfg.obs_dim, f"{pre}.out")
    h = g.act(g.linear(x, 2 * cfg.enc_hidden, f"{pre}.l1"), "relu")
    return g.linear(h, cfg.obs_dim, f"{pre}.out")


def _denoiser(g: Graph, emb: int, cfg: PolicyConfig) -> int:
    flat = cfg.horizon * cfg.action_dim
    x = g.input("x", (None, flat))
    t = g.input("t", (None,))
    task = g.input("task", (None, len(cfg.tasks) + 1))
    tf = g.act(g.linear(g.sinusoidal(t, cfg.time_dim), 2 * cfg.time_dim, "den.time"), "silu")
    te = g.linear(task, cfg.task_dim, "task.table", bias=False)
    h = g.concat([x, tf, emb, te])
    for i in range(cfg.depth):
        h = g.act(g.linear(h, cfg.hidden, f"den.l{i}"), "silu")
    return g.linear(h, flat, "den.out")


class DiffusionPolicy:
    """Encoders + conditional denoiser + schedule + fixed action bounds."""

    def __init__(self, config: PolicyConfig, bounds: ActionBounds, params: ParamSet | None = None):
        if bounds.dim != config.action_dim:
            raise ValueError(f"bounds dim {bounds.dim} != action_dim {config.action_dim}")
        self.config = config
        self.bounds = bounds
        self.schedule: NoiseSchedule = build_schedule(config.T, config.schedule_kind, config.beta_end)
        self.encoders: dict[str, Graph] = {}
        self.train_graphs: dict[str, tuple[Graph, int]] = {}
        specs: dict = {}
        for m in config.modalities:
            eg = Graph()
            eg.output("emb", _encoder(eg, m, config))
            self.encoders[m] = eg
            tg = Graph()
            eps = _denoiser(tg, _encoder(tg, m, config), config)
            loss = tg.mse(eps, tg.input("target", tg.shape(eps)))
            tg.output("eps", eps)
            self.train_graphs[m] = (tg, loss)
            specs.update(tg.param_specs)
        self.denoiser = Graph()
        self.denoiser.output("eps", _denoiser(self.denoiser, self.denoiser.input("emb", (None, config.obs_dim)),
                                               config))
        specs.update(self.denoiser.param_specs)
        if params is None:
            params = ParamSet(specs, seed=config.seed)
        elif set(params.names()) != set(specs):
            raise CheckpointError("parameter names do not match the architecture")
        self.params = params
        self.opt = None if params.frozen else OptState.for_params(params, lr=config.lr)
        self.loss_history: list[float] = []

    # -- metadata -----------------------------------------------------------------------

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.config.modalities

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    @property
    def supports_null_task(self) -> bool:
        return self.config.cfg_drop > 0.0

    def freeze(self) -> "DiffusionPolicy":
        self.params.freeze()
        self.opt = None
        return self

    def _require_frozen(self):
        if not self.frozen:
            raise PolicyStateError("policy is still training; freeze() it before sampling")

    def task_onehot(self, task) -> np.ndarray:
        """One-hot rows for a TaskLabel, a sequence of labels, or an index array."""
        k = len(self.config.tasks) + 1
        if isinstance(task, TaskLabel):
            idx = np.array([task.index(self.config.tasks)])
        elif isinstance(task, (list, tuple)) and task and isinstance(task[0], TaskLabel):
            idx = np.array([tl.index(self.config.tasks) for tl in task])
        else:
            idx = np.asarray(task, dtype=np.int64).reshape(-1)
        return np.eye(k, dtype=np.float32)[idx]

    def task_embedding(self, task: TaskLabel) -> np.ndarray:
        return np.asarray(self.params["task.table.w"][task.index(self.config.tasks)])

    # -- inference ----------------------------------------------------------------------

    def encode(self, obs) -> np.ndarray:
        """Embedding rows ``(B, obs_dim)`` for an Observation, a list of them, or an ObsBatch."""
        batch = stack_observations(obs)
        if batch.modality not in self.encoders:
            raise ModalityError(f"observation modality {batch.modality!r} does not match policy "
                                f"modalities {self.modalities}")
        inputs = {"obs": batch.features}
        if batch.valid is not None:
            inputs["valid"] = batch.valid
        return self.encoders[batch.modality].forward(self.params, inputs)["emb"]

    def eps_from_embedding(self, x: np.ndarray, t, emb: np.ndarray, task_onehot: np.ndarray) -> np.ndarray:
        """Noise prediction for a batch ``x`` of shape ``(B, H, d)``."""
        self._require_frozen()
        b = x.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=np.float32), (b,))
        if task_onehot.shape[0] == 1 and b > 1:
            task_onehot = np.broadcast_to(task_onehot, (b, task_onehot.shape[1]))
        if emb.shape[0] == 1 and b > 1:
            emb = np.broadcast_to(emb, (b, emb.shape[1]))
        out = self.denoiser.forward(self.params, {"x": x.reshape(b, -1), "t": tt, "emb": emb,
                                                   "task": task_onehot})["eps"]
        return out.reshape(x.shape).astype(np.float64)

    def predict_noise(self, traj: np.ndarray, t, obs, task) -> np.ndarray:
        """eps_theta(traj | t, obs, task); the null task selects the unconditional branch."""
        self._require_frozen()
        traj = np.asarray(traj)
        single = traj.ndim == 2
        x = traj[None] if single else traj
        if x.shape[1:] != (self.horizon, self.action_dim):
            raise ValueError(f"trajectory shape {traj.shape} != (H, d) = {(self.horizon, self.action_dim)}")
        if not 0 <= int(np.max(t)) < self.schedule.T:
            raise ValueError(f"step {t} outside [0, {self.schedule.T})")
        eps = self.eps_from_embedding(x, t, self.encode(obs), self.task_onehot(task))
        return eps[0] if single else eps

    def sample(self, obs, task, sampler: SamplerConfig | None = None,
               rng: np.random.Generator | None = None, n: int | None = None) -> np.ndarray:
        """Draw normalized trajectories; one per observation (or ``n`` for a single observation)."""
        self._require_frozen()
        sampler = sampler or SamplerConfig()
        rng = rng if rng is not None else sampler.rng()
        emb = self.encode(obs)
        b = n if n is not None else emb.shape[0]
        onehot = self.task_onehot(task)

        def eps_fn(x, t):
            return self.eps_from_embedding(x, t, emb, onehot)

        x = run_sampler(eps_fn, (b, self.horizon, self.action_dim), self.schedule, sampler, rng)
        return np.clip(x, -1.0, 1.0)

    # -- training -----------------------------------------------------------------------

    def train_step(self, obs: ObsBatch, task_idx: np.ndarray, traj: np.ndarray,
                   rng: np.random.Generator) -> float:
        """One denoising-MSE step on normalized trajectories ``(B, H, d)``."""
        if self.frozen:
            raise PolicyStateError("policy is frozen")
        if obs.modality not in self.train_graphs:
            raise ModalityError(f"batch modality {obs.modality!r} not in {self.modalities}")
        graph, loss_id = self.train_graphs[obs.modality]
        b = traj.shape[0]
        t = rng.integers(0, self.schedule.T, size=b)
        eps = rng.standard_normal(traj.shape)
        x_t = forward_noise(self.schedule, traj, t, eps)
        idx = np.asarray(task_idx)
        if self.config.cfg_drop > 0:
            idx = classifier_free_dropout(idx, self.config.cfg_drop, len(self.config.tasks), rng)
        inputs = {"obs": obs.features, "x": x_t.reshape(b, -1), "t": t.astype(np.float32),
                  "task": self.task_onehot(idx), "target": eps.reshape(b, -1)}
        if obs.valid is not None:
            inputs["valid"] = obs.valid
        graph.forward(self.params, inputs)
        loss = float(graph.values[loss_id])
        if not np.isfinite(loss):
            raise NonFiniteError(f"loss became {loss} at optimizer step {self.opt.step}")
        grads = graph.backward(loss_id)
        opt_step(self.params, grads, self.opt, clip_norm=self.config.grad_clip)
        self.loss_history.append(loss)
        return loss

    # -- persistence --------------------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "domain": self.config.domain,
            "modalities": list(self.modalities),
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "T": self.schedule.T,
            "bounds": self.bounds.to_dict(),
            "tasks": list(self.config.tasks),
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(self, path)


def save_checkpoint(policy: DiffusionPolicy, path: str | Path) -> Path:
    """Write ``path`` (binary) and ``path.json`` (readable manifest).

    Binary layout: magic ``TJCK``, u16 format version, u32 header length,
    UTF-8 JSON header, then each tensor as float32 little-endian at the
    offset recorded in the header (offsets are relative to the blob start).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name in sorted(policy.params.names()):
        arr = np.ascontiguousarray(policy.params[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "metadata": policy.metadata(),
        "schedule": policy.schedule.to_dict(),
        "config": policy.config.to_dict(),
        "tensors": index,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    manifest = dict(header, num_params=policy.params.num_params(),
                    final_loss=policy.loss_history[-1] if policy.loss_history else None)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> DiffusionPolicy:
    """Load a frozen policy. Rejects unknown magic or format versions."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    start = 10
    header = json.loads(data[start:start + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: header version {header.get('format_version')} mismatch")
    blob = memoryview(data)[start + hlen:]
    arrays = {}
    for ent in header["tensors"]:
        arr = np.frombuffer(blob[ent["offset"]:ent["offset"] + ent["nbytes"]], dtype="<f4")
        arrays[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float32)
    config = PolicyConfig.from_dict(header["config"])
    meta = header["metadata"]
    bounds = ActionBounds(np.array(meta["bounds"]["lo"]), np.array(meta["bounds"]["hi"]))
    params = ParamSet.from_arrays(arrays, seed=config.seed)
    params.freeze()
    return DiffusionPolicy(config, bounds, params)
