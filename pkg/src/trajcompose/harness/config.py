"""Run configuration: one serializable record per experiment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..bench import TEST_SEED_BASE
from ..policy import TASKS
from ..schedule import SamplerConfig


@dataclass
class RunConfig:
    name: str = "run"
    out_dir: str = "runs"
    datasets: list = field(default_factory=list)     # dataset file paths
    tasks: list = field(default_factory=lambda: list(TASKS))
    modalities: list = field(default_factory=lambda: ["points"])
    domain: str = "sim"
    policy: dict = field(default_factory=dict)       # PolicyConfig overrides
    train_steps: int = 10_000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    history: int = 1
    log_every: int = 100
    sampler: dict = field(default_factory=dict)      # SamplerConfig fields
    compose: dict | None = None                      # CompositionSpec.to_dict() layout
    eval_profile: str = "sim"
    eval_scenes: int = 50
    eval_repeats: int = 3
    eval_seed_offset: int = 0
    k: int = 4
    horizon: int = 16

    def __post_init__(self):
        if not 1 <= self.k <= self.horizon:
            raise ValueError(f"execution length k={self.k} must be in [1, H={self.horizon}]")
        if self.eval_seed_offset < 0:
            raise ValueError("eval seed offset must be >= 0 (test seeds start at the test base)")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler)

    def eval_seeds(self, repeat: int = 0) -> list[int]:
        start = TEST_SEED_BASE + self.eval_seed_offset + repeat * 100_000
        return list(range(start, start + self.eval_scenes))

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML or JSON config and apply dotted-key overrides."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else (yaml.safe_load(text) or {})
    cfg = RunConfig.from_dict(data)
    return cfg.with_overrides(overrides or {})


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
