"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle re-derives its answer from
first principles (finite differences, closed forms, brute-force enumeration).
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def central_difference(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64, perturbs in place and restores)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error, guarded for near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def mlp_by_hand(x, w1, b1, w2, b2, act):
    """W2 . act(W1 x + b1) + b2, one row at a time with explicit loops."""
    out = []
    for row in np.atleast_2d(x):
        h = [act(sum(row[i] * w1[i, j] for i in range(w1.shape[0])) + b1[j]) for j in range(w1.shape[1])]
        out.append([sum(h[j] * w2[j, k] for j in range(w2.shape[0])) + b2[k] for k in range(w2.shape[1])])
    return np.array(out)


def cosine_alpha_bar(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Capped squared-cosine cumulative products, computed step by step."""
    f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    out, prod = [], 1.0
    for i in range(T):
        beta = min(1 - f((i + 1) / T) / f(i / T), max_beta)
        prod *= 1 - beta
        out.append(prod)
    return np.array(out)


def gaussian_product(m1, v1, m2, v2):
    """Mean and variance of the normalized product of two 1-d Gaussian densities."""
    v = 1.0 / (1.0 / v1 + 1.0 / v2)
    return v * (m1 / v1 + m2 / v2), v


def discretized_product_tv(samples, m1, v1, m2, v2, lo=-4.0, hi=5.0, bins=60) -> float:
    """Total variation between a sample histogram and the binned product of two Gaussians."""
    edges = np.linspace(lo, hi, bins + 1)
    fine = np.linspace(lo, hi, bins * 50 + 1)
    dens = np.exp(-(fine - m1) ** 2 / (2 * v1) - (fine - m2) ** 2 / (2 * v2))
    mass = np.array([dens[(fine >= a) & (fine < b)].sum() for a, b in zip(edges[:-1], edges[1:])])
    mass /= mass.sum()
    hist, _ = np.histogram(np.clip(samples, lo, hi - 1e-9), bins=edges)
    return 0.5 * float(np.abs(hist / hist.sum() - mass).sum())


def joint_conditional_by_enumeration(prior, lik_a, lik_b):
    """p(tau | A, B) for binary A, B that are independent given tau, by summing the full joint.

    ``lik_a[tau]`` = p(A=1 | tau), likewise ``lik_b``. Builds p(tau, a, b)
    over every (tau, a, b) triple and conditions on a = b = 1.
    """
    joint = {}
    for tau, a, b in itertools.product(range(len(prior)), (0, 1), (0, 1)):
        pa = lik_a[tau] if a else 1 - lik_a[tau]
        pb = lik_b[tau] if b else 1 - lik_b[tau]
        joint[(tau, a, b)] = prior[tau] * pa * pb
    num = np.array([joint[(tau, 1, 1)] for tau in range(len(prior))])
    return num / num.sum()


def second_difference_sum(traj) -> float:
    """sum_t ||a_{t+1} - 2 a_t + a_{t-1}||^2 with explicit loops."""
    traj = np.atleast_2d(np.asarray(traj, dtype=float))
    if traj.shape[0] == 1 and traj.ndim == 2 and traj.size > 1:
        traj = traj.T
    total = 0.0
    for t in range(1, len(traj) - 1):
        d = traj[t + 1] - 2 * traj[t] + traj[t - 1]
        total += float(np.dot(d, d))
    return total
