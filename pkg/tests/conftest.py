"""Shared fixtures: small untrained policies for unit tests and trained policies for the acceptance suite.

Trained policies are built once per session; each fixture records its
training wall time so acceptance runtimes can include it.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from trajcompose.bench import HUMAN_PROFILE, SIM_PROFILE, build_dataset, obs_feature_shape
from trajcompose.harness.training import bench_bounds, make_windows, train_policy
from trajcompose.policy import TASKS, DiffusionPolicy, PolicyConfig


def small_config(modality="points", **kw) -> PolicyConfig:
    dims = {"points": (12, 4), "grid": (2 * 4 * 4,), "state": (6,)}
    base = dict(modalities=(modality,), obs_dims={modality: dims[modality]}, hidden=32, depth=2, time_dim=8,
                task_dim=4, obs_dim=8, enc_hidden=8, seed=3)
    base.update(kw)
    return PolicyConfig(**base)


def small_policy(modality="points", frozen=True, **kw) -> DiffusionPolicy:
    p = DiffusionPolicy(small_config(modality, **kw), bench_bounds())
    return p.freeze() if frozen else p


def points_obs(rng, n=12, batch=None):
    from trajcompose.policy import Observation
    def one():
        d = np.zeros((1, n, 4), dtype=np.float32)
        d[0, :, :2] = rng.normal(size=(n, 2))
        d[0, :, 2] = rng.random(n) < 0.5
        d[0, :, 3] = 1
        return Observation("points", d)
    return one() if batch is None else [one() for _ in range(batch)]


@dataclass
class Trained:
    policy: DiffusionPolicy
    seconds: float            # dataset generation plus training
    windows: object = None


def _train(profile, tasks, n_demos, steps, domain, **policy_kw) -> Trained:
    t0 = time.perf_counter()
    ds = build_dataset(profile, tasks, n_demos, seed=0)
    bounds = bench_bounds()
    w = make_windows(ds.episodes, 16, bounds, TASKS)
    cfg = PolicyConfig(obs_dims={"points": obs_feature_shape("points")}, domain=domain, **policy_kw)
    r = train_policy([w], cfg, bounds, steps, 64, seed=0, log_every=500)
    return Trained(r.policy, time.perf_counter() - t0, w)


@pytest.fixture(scope="session")
def hammer_sim() -> Trained:
    """Single-task clean-domain hammer policy (200 demos)."""
    return _train(SIM_PROFILE, ["hammer"], 200, 3000, "sim")


@pytest.fixture(scope="session")
def hammer_human() -> Trained:
    """Hammer policy from the weak human-analog domain (few noisy, partially observed demos)."""
    return _train(HUMAN_PROFILE, ["hammer"], None, 3000, "human")


@pytest.fixture(scope="session")
def multitask() -> Trained:
    """Four-task policy with classifier-free task dropout."""
    return _train(SIM_PROFILE, list(TASKS), 200, 15000, "sim")


@pytest.fixture(scope="session")
def overfit() -> Trained:
    """Policy trained on the windows of a single hammer demonstration, without task dropout."""
    t0 = time.perf_counter()
    ds = build_dataset(SIM_PROFILE, ["hammer"], 1, seed=0)
    bounds = bench_bounds()
    w = make_windows(ds.episodes, 16, bounds, TASKS)
    cfg = PolicyConfig(obs_dims={"points": obs_feature_shape("points")}, cfg_drop=0.0, lr=1e-3)
    r = train_policy([w], cfg, bounds, 5000, 32, seed=0, log_every=500)
    return Trained(r.policy, time.perf_counter() - t0, w)


# -- acceptance reporting -----------------------------------------------------------------

ACCEPTANCE_LINES: list = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and print it immediately."""
    def record(number: int, title: str, ok: bool, detail: str, seconds: float, limit: float) -> bool:
        ok_time = seconds < limit
        status = "PASS" if ok and ok_time else "FAIL"
        line = f"{status} criterion {number:>2} {title}: {detail}; runtime {seconds:.1f}s (limit {limit:.0f}s)"
        ACCEPTANCE_LINES.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok and ok_time
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
