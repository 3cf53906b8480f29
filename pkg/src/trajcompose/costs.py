"""Analytic trajectory costs with closed-form gradients.

Actions are per-step displacements, so poses are the cumulative sum of
actions from a start pose. All functions accept a single trajectory
``(H, d)`` or a batch ``(B, H, d)``; costs reduce over the trajectory axes
only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COST_KINDS = ("smoothness", "workspace")


def integrate_actions(actions: np.ndarray, start_pose: np.ndarray) -> np.ndarray:
    """Poses of length H + 1: pose_0 = start, pose_{i+1} = pose_i + a_i."""
    actions = np.asarray(actions, dtype=np.float64)
    start = np.asarray(start_pose, dtype=np.float64)
    start = np.broadcast_to(start[..., None, :], actions.shape[:-2] + (1, actions.shape[-1]))
    return np.concatenate([start, start + np.cumsum(actions, axis=-2)], axis=-2)


def second_difference(traj: np.ndarray) -> np.ndarray:
    traj = np.asarray(traj, dtype=np.float64)
    return traj[..., 2:, :] - 2.0 * traj[..., 1:-1, :] + traj[..., :-2, :]


def smoothness_cost(traj: np.ndarray) -> np.ndarray | float:
    """Sum over interior steps of the squared second difference."""
    traj = np.asarray(traj)
    if traj.shape[-2] < 3:
        raise ValueError(f"smoothness cost needs horizon >= 3, got {traj.shape[-2]}")
    dd = second_difference(traj)
    c = np.sum(dd * dd, axis=(-2, -1))
    return float(c) if np.ndim(c) == 0 else c


def smoothness_grad(traj: np.ndarray) -> np.ndarray:
    traj = np.asarray(traj)
    if traj.shape[-2] < 3:
        raise ValueError(f"smoothness cost needs horizon >= 3, got {traj.shape[-2]}")
    dd = 2.0 * second_difference(traj)
    g = np.zeros(traj.shape, dtype=np.float64)
    g[..., :-2, :] += dd
    g[..., 1:-1, :] -= 2.0 * dd
    g[..., 2:, :] += dd
    return g


def _hinge(poses, lo, hi):
    return np.maximum(lo - poses, 0.0), np.maximum(poses - hi, 0.0)


def workspace_cost(actions: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                   start_pose: np.ndarray) -> np.ndarray | float:
    """Squared hinge violation of the integrated poses outside ``[lo, hi]``."""
    poses = integrate_actions(actions, start_pose)
    below, above = _hinge(poses, np.asarray(lo, float), np.asarray(hi, float))
    c = np.sum(below * below + above * above, axis=(-2, -1))
    return float(c) if np.ndim(c) == 0 else c


def workspace_grad(actions: np.ndarray, lo: np.ndarray, hi: np.ndarray, start_pose: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. actions: pose gradients pulled back through the cumulative sum."""
    poses = integrate_actions(actions, start_pose)
    below, above = _hinge(poses, np.asarray(lo, float), np.asarray(hi, float))
    g_pose = 2.0 * (above - below)[..., 1:, :]
    # d pose_j / d a_i = 1 for j > i: reverse cumulative sum
    return np.flip(np.cumsum(np.flip(g_pose, axis=-2), axis=-2), axis=-2)


def pose_violation(poses: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Per-pose squared hinge violation, shape ``poses.shape[:-1]``."""
    below, above = _hinge(np.asarray(poses, float), np.asarray(lo, float), np.asarray(hi, float))
    return np.sum(below * below + above * above, axis=-1)


@dataclass
class CostFunction:
    """A behavior cost on raw (environment-unit) action trajectories."""

    kind: str
    weight: float = 0.1
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    start_pose: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("cost weight must be >= 0")
        if self.kind == "workspace":
            if self.lo is None or self.hi is None:
                raise ValueError("workspace cost needs pose bounds")
            self.lo = np.asarray(self.lo, dtype=np.float64)
            self.hi = np.asarray(self.hi, dtype=np.float64)
            if not np.all(self.lo < self.hi):
                raise ValueError("workspace bounds need lo < hi elementwise")
            if self.start_pose is None:
                self.start_pose = np.zeros_like(self.lo)

    def _start(self, start_pose):
        return self.start_pose if start_pose is None else start_pose

    def cost(self, actions: np.ndarray, start_pose: np.ndarray | None = None):
        if self.kind == "smoothness":
            return smoothness_cost(actions)
        return workspace_cost(actions, self.lo, self.hi, self._start(start_pose))

    def grad(self, actions: np.ndarray, start_pose: np.ndarray | None = None) -> np.ndarray:
        if self.kind == "smoothness":
            return smoothness_grad(actions)
        return workspace_grad(actions, self.lo, self.hi, self._start(start_pose))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "weight": self.weight}
        if self.kind == "workspace":
            d.update(lo=self.lo.tolist(), hi=self.hi.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostFunction":
        return cls(kind=d["kind"], weight=float(d.get("weight", 0.1)), lo=d.get("lo"), hi=d.get("hi"))
