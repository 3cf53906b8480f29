"""Planar multi-task tool-use benchmark.

A point-mass tool keypoint moves by per-step displacement actions (cm).
Each task couples the tool to a small object through a scripted progress
variable once the tool enters the task's engagement window from the right
direction:

    hammer   drive the pin down from above          progress = depression (cm)
    knife    slice left to right through the block  progress = split travel (cm)
    spatula  slide under from the right, then lift  progress = lift (cm)
    wrench   sweep clockwise along a circle         progress = rotation (rad)

All tasks use the same object footprint, so which task is being performed
is not visible in the initial observation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .policy import Observation, TASKS

TRAIN_SEED_LIMIT = 1_000_000
TEST_SEED_BASE = 1_000_000
DATASET_VERSION = 1
RECORD_MAGIC = b"TJEP"


@dataclass(frozen=True)
class BenchConfig:
    workspace: float = 40.0             # tool keypoint stays in [-w, w]^2
    start_box: float = 25.0
    object_box: float = 22.0
    object_dist: tuple[float, float] = (12.0, 24.0)
    object_half: float = 2.0
    action_limit: float = 3.0           # cm per step
    episode_cap: int = 40
    n_tool_points: int = 64
    n_obj_points: int = 64
    obs_scale: float = 20.0             # cm per observation unit
    grid_size: int = 16
    grid_window: float = 32.0           # grid covers +-window around the tool
    demo_speed: float = 1.6             # mean cm per step in expert demos
    wrench_radius: float = 7.0
    safety_box: float = 26.0            # pose bounds used by the workspace cost and metric
    thresholds: dict = field(default_factory=lambda: {"hammer": 2.0, "knife": 10.0, "spatula": 5.0,
                                                      "wrench": 0.4})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_dist"] = list(self.object_dist)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        if "object_dist" in d:
            d["object_dist"] = tuple(d["object_dist"])
        return cls(**d)


DEFAULT_CONFIG = BenchConfig()


@dataclass(frozen=True)
class Scene:
    task: str
    seed: int
    tool: np.ndarray          # keypoint position (cm)
    tool_angle: float         # handle orientation (rad); cosmetic
    obj: np.ndarray           # object center (cm)
    progress: float = 0.0
    engaged: bool = False
    steps: int = 0
    clipped: bool = False     # last action was clipped to the bounds

    def goal_geometry(self, config: BenchConfig = DEFAULT_CONFIG) -> dict:
        q = self.obj
        if self.task == "hammer":
            return {"pin": q.tolist()}
        if self.task == "knife":
            return {"cut_line_x": float(q[0]), "cut_from": (q + [-2.0, 0.0]).tolist()}
        if self.task == "spatula":
            return {"scoop_region": [[q[0] - 2.0, q[1] - 5.5], [q[0] + 2.0, q[1] - 1.0]]}
        return {"center": q.tolist(), "radius": config.wrench_radius}


def make_scene(task: str, seed: int, config: BenchConfig = DEFAULT_CONFIG) -> Scene:
    """Random tool and object placement; deterministic in (task, seed)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng([int(seed), TASKS.index(task)])
    lo, hi = config.object_dist
    for _ in range(1000):
        tool = rng.uniform(-config.start_box, config.start_box, 2)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(lo, hi)
        obj = tool + dist * np.array([np.cos(ang), np.sin(ang)])
        if np.all(np.abs(obj) <= config.object_box):
            break
    else:  # pragma: no cover - the boxes above always admit a placement
        raise RuntimeError("scene sampling failed")
    return Scene(task, int(seed), tool, float(rng.uniform(-np.pi, np.pi)), obj)


# -- dynamics -----------------------------------------------------------------------------


def _cross(a: float, b: float, level: float) -> float | None:
    """Fraction along a->b where the value crosses ``level`` (either direction)."""
    if (a - level) * (b - level) > 0 or a == b:
        return None
    return (level - a) / (b - a)


def _couple(task: str, q: np.ndarray, p: np.ndarray, p_new: np.ndarray, progress: float, engaged: bool,
            config: BenchConfig) -> tuple[float, bool]:
    dx, dy = p_new - q
    if task == "hammer":
        if not engaged and p_new[1] < p[1]:
            f = _cross(p[1], p_new[1], q[1] + 2.0)
            if f is not None and abs(p[0] + f * (p_new[0] - p[0]) - q[0]) <= 2.0:
                engaged = True
        if engaged:
            if abs(dx) > 2.5:
                return progress, False
            progress = max(progress, q[1] + 2.0 - p_new[1])
    elif task == "knife":
        if not engaged and p_new[0] > p[0]:
            f = _cross(p[0], p_new[0], q[0] - 2.0)
            if f is not None and abs(p[1] + f * (p_new[1] - p[1]) - q[1]) <= 2.0:
                engaged = True
        if engaged:
            if abs(dy) > 2.5:
                return progress, False
            progress = max(progress, p_new[0] - (q[0] - 2.0))
    elif task == "spatula":
        if not engaged and p_new[0] < p[0]:
            f = _cross(p[0], p_new[0], q[0] + 2.0)
            if f is not None and -5.5 <= p[1] + f * (p_new[1] - p[1]) - q[1] <= -1.0:
                engaged = True
        if engaged:
            if abs(dx) > 3.0:
                return progress, False
            progress = max(progress, p_new[1] - (q[1] - 3.0))
    else:  # wrench
        r = config.wrench_radius
        if not engaged and p_new[1] < p[1]:
            f = _cross(p[1], p_new[1], q[1])
            if f is not None:
                cross = p + f * (p_new - p)
                if abs(cross[0] - q[0] - r) <= 2.0:
                    engaged = True
        if engaged:
            if abs(math.hypot(dx, dy) - r) > 2.5 or dx <= 0:
                return progress, False
            progress = max(progress, -math.atan2(dy, dx))
    return float(progress), engaged


def step(scene: Scene, action: np.ndarray, config: BenchConfig = DEFAULT_CONFIG) -> Scene:
    """Advance the tool by ``action`` (clipped to the action bounds) and apply task coupling."""
    a = np.asarray(action, dtype=np.float64)
    lim = config.action_limit
    clipped = bool(np.any(np.abs(a) > lim + 1e-9))
    a = np.clip(a, -lim, lim)
    p_new = np.clip(scene.tool + a, -config.workspace, config.workspace)
    progress, engaged = _couple(scene.task, scene.obj, scene.tool, p_new, scene.progress, scene.engaged, config)
    return replace(scene, tool=p_new, progress=progress, engaged=engaged, steps=scene.steps + 1, clipped=clipped)


def is_success(scene: Scene, config: BenchConfig = DEFAULT_CONFIG) -> bool:
    """Progress at or above the task threshold (inclusive)."""
    return scene.progress >= config.thresholds[scene.task]


# -- expert demonstrations ----------------------------------------------------------------


def task_waypoints(scene: Scene, config: BenchConfig = DEFAULT_CONFIG) -> list[np.ndarray]:
    q = scene.obj
    if scene.task == "hammer":
        pts = [(0, 8), (0, 4), (0, -1)]
    elif scene.task == "knife":
        pts = [(-9, 0), (-5, 0), (0, 0), (9, 0)]
    elif scene.task == "spatula":
        pts = [(9, -3), (4, -3), (0, -3), (0, 4)]
    else:
        r = config.wrench_radius
        pts = [(r * math.cos(a), r * math.sin(a)) for a in (0.6, 0.3, 0.0, -0.3, -0.6)]
    return [q + np.array(p, dtype=float) for p in pts]


def min_jerk_actions(start: np.ndarray, waypoints: Sequence[np.ndarray], durations: Sequence[int]) -> np.ndarray:
    """Actions through waypoints at cumulative ``durations`` with rest at both ends.

    Minimizes the summed squared second difference of the zero-padded action
    sequence subject to hitting every waypoint exactly (equality-constrained
    least squares solved through its KKT system).
    """
    n = int(sum(durations))
    m = len(waypoints)
    D = np.zeros((n + 2, n))
    for i in range(n + 2):
        for j, c in ((i, 1.0), (i - 1, -2.0), (i - 2, 1.0)):
            if 0 <= j < n:
                D[i, j] = c
    C = np.zeros((m, n))
    times = np.cumsum(durations)
    for k, tk in enumerate(times):
        C[k, :tk] = 1.0
    K = np.zeros((n + m, n + m))
    K[:n, :n] = 2.0 * D.T @ D
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.zeros((n + m, len(start)))
    rhs[n:] = np.stack(waypoints) - start
    return np.linalg.solve(K, rhs)[:n]


@dataclass
class Episode:
    task: str
    domain: str
    seed: int
    observations: list          # one Observation (single frame) per action
    actions: np.ndarray         # (L, d) raw displacement actions
    success: bool

    def __len__(self) -> int:
        return self.actions.shape[0]


class UnreachableGoal(RuntimeError):
    pass


def expert_plan(scene: Scene, config: BenchConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Raw expert actions for a fresh scene."""
    if scene.steps != 0:
        raise ValueError("expert demos start from a fresh scene")
    if is_success(scene, config):
        return np.zeros((3, 2))
    pts = [scene.tool] + task_waypoints(scene, config)
    dists = [float(np.linalg.norm(b - a)) for a, b in zip(pts[:-1], pts[1:])]
    speed = config.demo_speed
    for _ in range(20):
        durs = [max(2, math.ceil(d / speed)) for d in dists]
        actions = min_jerk_actions(scene.tool, pts[1:], durs)
        if np.max(np.abs(actions)) <= 0.98 * config.action_limit:
            break
        speed *= 0.9
    else:
        raise UnreachableGoal(f"{scene.task} seed {scene.seed}: no feasible demo under the action bounds")
    if len(actions) > config.episode_cap:
        raise UnreachableGoal(f"{scene.task} seed {scene.seed}: demo needs {len(actions)} steps")
    return actions


def expert_demo(scene: Scene, profile: "DomainProfile | None" = None, rng: np.random.Generator | None = None,
                config: BenchConfig = DEFAULT_CONFIG) -> Episode:
    """Expert episode rendered under ``profile``.

    Observations follow the executed expert path; under a profile with
    label noise the recorded actions are perturbed copies of the executed ones.
    """
    profile = profile or SIM_PROFILE
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    actions = expert_plan(scene, config)
    obs, s = [], scene
    for a in actions:
        obs.append(observe(s, profile, rng, config))
        s = step(s, a, config)
    if not is_success(s, config):
        raise UnreachableGoal(f"{scene.task} seed {scene.seed}: expert replay did not succeed")
    labels = actions
    if profile.label_noise > 0:
        labels = actions + profile.label_noise * rng.standard_normal(actions.shape)
        labels = np.clip(labels, -config.action_limit, config.action_limit)
    return Episode(scene.task, profile.domain, scene.seed, obs, labels, True)


def replay(scene: Scene, actions: Iterable[np.ndarray], config: BenchConfig = DEFAULT_CONFIG) -> Scene:
    for a in actions:
        scene = step(scene, a, config)
    return scene


# -- observation rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class DomainProfile:
    """Sensor modality, corruption and data budget of one training domain."""

    domain: str
    modality: str = "points"
    jitter: float = 0.0          # point noise std (cm)
    drop: float = 0.0            # fraction of points dropped
    crop: float | None = None    # points farther than this from the tool (cm) are dropped
    label_noise: float = 0.0     # std of additive action-label noise (cm per step)
    n_demos: int = 200

    def __post_init__(self):
        if self.jitter < 0 or self.label_noise < 0 or (self.crop is not None and self.crop <= 0):
            raise ValueError("corruption parameters must be >= 0")
        if not 0 <= self.drop < 1:
            raise ValueError("drop fraction must be in [0, 1)")
        if self.modality not in ("state", "points", "grid"):
            raise ValueError(f"unknown modality {self.modality!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainProfile":
        return cls(**d)

    def clean(self) -> "DomainProfile":
        return replace(self, jitter=0.0, drop=0.0, crop=None, label_noise=0.0)


SIM_PROFILE = DomainProfile("sim", "points")
HUMAN_PROFILE = DomainProfile("human", "points", jitter=1.0, drop=0.3, crop=30.0, label_noise=1.2, n_demos=30)
ROBOT_PROFILE = DomainProfile("robot", "grid")
PROFILES = {p.domain: p for p in (SIM_PROFILE, HUMAN_PROFILE, ROBOT_PROFILE)}


def _object_points(scene: Scene, n: int, rng: np.random.Generator, config: BenchConfig) -> np.ndarray:
    """Object surface samples, deformed by the task progress."""
    h = config.object_half
    u = rng.uniform(-h, h, (n, 2))
    prog = scene.progress
    if scene.task == "hammer":
        u[:, 1] -= min(prog, 4.0)
    elif scene.task == "knife":
        u[:, 0] += np.sign(u[:, 0]) * min(prog, 12.0) / 4.0
    elif scene.task == "spatula":
        u[:, 1] += min(prog, 8.0)
    else:
        c, s = math.cos(-prog), math.sin(-prog)
        u = u @ np.array([[c, s], [-s, c]])
    return scene.obj + u


def _tool_points(scene: Scene, n: int, rng: np.random.Generator) -> np.ndarray:
    """Handle segment of length 8 from the keypoint plus a small head blob."""
    d = np.array([math.cos(scene.tool_angle), math.sin(scene.tool_angle)])
    n_head = n // 4
    along = rng.uniform(0.0, 8.0, n - n_head)
    handle = scene.tool + along[:, None] * d + 0.3 * rng.standard_normal((n - n_head, 2))
    head = scene.tool + 0.8 * rng.standard_normal((n_head, 2))
    return np.concatenate([head, handle])


def render_points(scene: Scene, profile: DomainProfile, rng: np.random.Generator,
                  config: BenchConfig = DEFAULT_CONFIG) -> np.ndarray:
    """``(N, 4)`` rows (x, y, mask, valid) in the tool frame, scaled by ``1/obs_scale``."""
    tool = _tool_points(scene, config.n_tool_points, rng)
    obj = _object_points(scene, config.n_obj_points, rng, config)
    xy = np.concatenate([tool, obj])
    mask = np.concatenate([np.ones(len(tool)), np.zeros(len(obj))])
    valid = np.ones(len(xy))
    if profile.jitter > 0:
        xy = xy + profile.jitter * rng.standard_normal(xy.shape)
    if profile.drop > 0:
        valid *= rng.random(len(xy)) >= profile.drop
    if profile.crop is not None:
        valid *= np.linalg.norm(xy - scene.tool, axis=1) <= profile.crop
    rel = (xy - scene.tool) / config.obs_scale
    rel[valid == 0] = 0.0
    return np.column_stack([rel, mask, valid]).astype(np.float32)


def render_grid(scene: Scene, profile: DomainProfile, rng: np.random.Generator,
                config: BenchConfig = DEFAULT_CONFIG) -> np.ndarray:
    """``(2, G, G)`` occupancy of tool (channel 0) and object (channel 1) around the tool."""
    g, w = config.grid_size, config.grid_window
    grid = np.zeros((2, g, g), dtype=np.float32)
    pts = render_points(scene, profile, rng, config)
    keep = pts[:, 3] > 0
    cell = ((pts[keep, :2] * config.obs_scale + w) / (2 * w) * g).astype(int)
    inside = np.all((cell >= 0) & (cell < g), axis=1)
    ch = (1 - pts[keep, 2]).astype(int)[inside]
    np.add.at(grid, (ch, cell[inside, 1], cell[inside, 0]), 0.25)
    return np.minimum(grid, 1.0)


def render_state(scene: Scene, config: BenchConfig = DEFAULT_CONFIG) -> np.ndarray:
    rel = (scene.obj - scene.tool) / config.obs_scale
    prog = scene.progress / config.thresholds[scene.task]
    return np.array([rel[0], rel[1], prog, float(scene.engaged), math.cos(scene.tool_angle),
                     math.sin(scene.tool_angle)], dtype=np.float32)


def observe(scene: Scene, profile: DomainProfile, rng: np.random.Generator,
            config: BenchConfig = DEFAULT_CONFIG) -> Observation:
    """Single-frame observation in the profile's modality."""
    if profile.modality == "points":
        return Observation("points", render_points(scene, profile, rng, config)[None])
    if profile.modality == "grid":
        return Observation("grid", render_grid(scene, profile, rng, config)[None])
    state = render_state(scene, config)
    if profile.jitter > 0:
        state[:2] += profile.jitter / config.obs_scale * rng.standard_normal(2)
    return Observation("state", state[None])


def stack_history(frames: Sequence[Observation], history: int) -> Observation:
    """Newest-first stack of the last ``history`` frames, repeating the oldest when short."""
    recent = list(frames[-history:])[::-1]
    recent += [recent[-1]] * (history - len(recent))
    return Observation(recent[0].modality, np.concatenate([f.data for f in recent]))


def obs_feature_shape(modality: str, history: int = 1, config: BenchConfig = DEFAULT_CONFIG) -> tuple:
    """Encoder input shape (without batch) for a modality, matching ``Observation.features``."""
    if modality == "points":
        return (history * (config.n_tool_points + config.n_obj_points), 4)
    if modality == "grid":
        return (history * 2 * config.grid_size * config.grid_size,)
    return (history * 6,)


# -- datasets -----------------------------------------------------------------------------


def train_seed(task: str, index: int, base_seed: int) -> int:
    s = base_seed * 10_000 + index * len(TASKS) + TASKS.index(task)
    if not 0 <= s < TRAIN_SEED_LIMIT:
        raise ValueError(f"training seed {s} outside [0, {TRAIN_SEED_LIMIT})")
    return s


def held_out_seeds(n: int, offset: int = 0) -> list[int]:
    return [TEST_SEED_BASE + offset + i for i in range(n)]


@dataclass
class Dataset:
    episodes: list
    manifest: dict

    def counts(self) -> dict:
        out: dict = {}
        for ep in self.episodes:
            out[ep.task] = out.get(ep.task, 0) + 1
        return out

    def seeds(self) -> set:
        return {ep.seed for ep in self.episodes}


def build_dataset(profile: DomainProfile, tasks: Sequence[str], n_demos: int | None = None, seed: int = 0,
                  config: BenchConfig = DEFAULT_CONFIG) -> Dataset:
    """Expert episodes for every task under one domain profile."""
    n = profile.n_demos if n_demos is None else int(n_demos)
    if n < 1:
        raise ValueError("n_demos must be >= 1")
    episodes = []
    for task in tasks:
        for i in range(n):
            s = train_seed(task, i, seed)
            scene = make_scene(task, s, config)
            rng = np.random.default_rng([s, sum(map(ord, profile.domain))])
            episodes.append(expert_demo(scene, profile, rng, config))
    manifest = {
        "format_version": DATASET_VERSION,
        "domain": profile.domain,
        "profile": profile.to_dict(),
        "tasks": list(tasks),
        "n_demos": n,
        "seed": seed,
        "counts": {t: n for t in tasks},
        "seeds": {t: [train_seed(t, i, seed) for i in range(n)] for t in tasks},
        "bench": config.to_dict(),
    }
    return Dataset(episodes, manifest)


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """Write ``path`` (records) and ``path.json`` (manifest).

    Each record is ``magic | u32 payload length | payload`` where the payload
    is ``u32 header length | JSON header | observation float32 LE | actions float32 LE``.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            for ep in ds.episodes:
                obs = np.stack([o.data for o in ep.observations]).astype("<f4")
                act = np.ascontiguousarray(ep.actions, dtype="<f4")
                header = json.dumps({"task": ep.task, "domain": ep.domain, "seed": ep.seed,
                                     "success": ep.success, "modality": ep.observations[0].modality,
                                     "obs_shape": list(obs.shape), "act_shape": list(act.shape)}).encode()
                payload = struct.pack("<I", len(header)) + header + obs.tobytes() + act.tobytes()
                fh.write(RECORD_MAGIC + struct.pack("<I", len(payload)) + payload)
        manifest = dict(ds.manifest, file=path.name, n_episodes=len(ds.episodes))
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"writing dataset {path}: {exc}") from exc
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
        manifest = json.loads(Path(str(path) + ".json").read_text())
    except OSError as exc:
        raise OSError(f"reading dataset {path}: {exc}") from exc
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"{path}: dataset format {manifest.get('format_version')} != {DATASET_VERSION}")
    episodes, pos = [], 0
    while pos < len(raw):
        if raw[pos:pos + 4] != RECORD_MAGIC:
            raise ValueError(f"{path}: corrupt record at byte {pos}")
        (plen,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + plen]
        (hlen,) = struct.unpack_from("<I", body, 0)
        h = json.loads(body[4:4 + hlen])
        n_obs = int(np.prod(h["obs_shape"]))
        obs = np.frombuffer(body, "<f4", n_obs, 4 + hlen).reshape(h["obs_shape"])
        act = np.frombuffer(body, "<f4", int(np.prod(h["act_shape"])), 4 + hlen + 4 * n_obs).reshape(h["act_shape"])
        episodes.append(Episode(h["task"], h["domain"], h["seed"], [Observation(h["modality"], o) for o in obs],
                                act.astype(np.float64), h["success"]))
        pos += 8 + plen
    return Dataset(episodes, manifest)


def regenerate(manifest: dict) -> Dataset:
    """Rebuild a dataset from its manifest."""
    return build_dataset(DomainProfile.from_dict(manifest["profile"]), manifest["tasks"], manifest["n_demos"],
                         manifest["seed"], BenchConfig.from_dict(manifest["bench"]))
