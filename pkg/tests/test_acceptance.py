"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its runtime.

Runtimes of criteria that need trained policies include the time to
generate their data and train them (shared fixtures are counted once per
criterion that uses them).
"""

import time

import numpy as np
import pytest

from trajcompose.bench import SIM_PROFILE, obs_feature_shape
from trajcompose.compose import (AnalyticGaussianPolicy, CompositionSpec, DomainPolicy, composed_sample,
                                 discrete_product, task_score)
from trajcompose.costs import smoothness_cost, smoothness_grad, workspace_cost, workspace_grad
from trajcompose.harness.config import RunConfig
from trajcompose.harness.experiments import EvalSettings, behavior_table, domain_figure, run_protocol, task_figure
from trajcompose.harness.rollout import PolicyController, evaluate
from trajcompose.harness.training import bench_bounds
from trajcompose.policy import NULL_TASK, TASKS, DiffusionPolicy, TaskLabel, save_checkpoint
from trajcompose.schedule import SamplerConfig

import frozen
from conftest import points_obs, small_config, small_policy
from oracles import central_difference, discretized_product_tv, joint_conditional_by_enumeration, relative_error
from test_ndnet import OP_CASES, _build, _check_grads

pytestmark = [pytest.mark.acceptance]

EVAL = dict(n_scenes=50, repeats=3)


def test_guidance_identities(verdict):
    t0 = time.perf_counter()
    p = small_policy()
    obs = points_obs(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    worst = 0.0
    task = TaskLabel("hammer")
    for _ in range(100):
        x, t = rng.normal(size=(16, 2)), int(rng.integers(0, 100))
        worst = max(worst, np.abs(task_score(p, x, t, obs, task, 1.0) - p.predict_noise(x, t, obs, task)).max(),
                    np.abs(task_score(p, x, t, obs, task, 0.0) - p.predict_noise(x, t, obs, NULL_TASK)).max())
    ok = worst < frozen.IDENTITY_ATOL
    assert verdict(1, "guidance identities", ok, f"max |delta| {worst:.2e} over 100 pairs",
                   time.perf_counter() - t0, 1)


def test_product_of_gaussians(verdict):
    t0 = time.perf_counter()
    cfg = SamplerConfig(mode="langevin", n_steps=100, clip_sample=False, langevin_inner=2)
    spec = CompositionSpec(DomainPolicy(AnalyticGaussianPolicy(0.0)),
                           [DomainPolicy(AnalyticGaussianPolicy(1.0), gamma_d=1.0)], cfg)
    s = composed_sample(spec, None, np.random.default_rng(0), n=10_000).reshape(-1)
    tv = discretized_product_tv(s, 0.0, 1.0, 1.0, 1.0)
    m_lo, m_hi = frozen.POE["mean_range"]
    v_lo, v_hi = frozen.POE["var_range"]
    ok = m_lo <= s.mean() <= m_hi and v_lo <= s.var() <= v_hi and tv < frozen.POE["tv_max"]
    assert verdict(2, "product of Gaussians", ok, f"mean {s.mean():.3f}, var {s.var():.3f}, TV {tv:.3f}",
                   time.perf_counter() - t0, 30)


def test_discrete_product(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    prior = rng.random(20) + 0.05
    prior /= prior.sum()
    lik_a, lik_b = rng.uniform(0.05, 0.95, 20), rng.uniform(0.05, 0.95, 20)
    prod = discrete_product(discrete_product(prior, lik_a), discrete_product(prior, lik_b))
    joint = joint_conditional_by_enumeration(prior, lik_a, lik_b)
    want = joint * prior / np.sum(joint * prior)
    err = float(np.abs(prod - want).max())
    assert verdict(3, "discrete product", err < frozen.DISCRETE_ATOL, f"max error {err:.1e} on 20 states",
                   time.perf_counter() - t0, 1)


def test_behavior_composition(verdict, hammer_sim):
    t0 = time.perf_counter()
    s = EvalSettings(tasks=["hammer"], k=16, **EVAL)
    table = behavior_table(hammer_sim.policy, s)
    succ, smooth, ws = table.column("success"), table.column("smoothness"), table.column("workspace")
    d_smooth = 1 - smooth["+smoothness"] / smooth["normal"]
    d_succ = succ["normal"] - succ["+smoothness"]
    d_ws = 1 - ws["+workspace"] / ws["normal"]
    ok = d_smooth >= 0.2 and d_succ <= 0.10 and d_ws >= 0.2
    detail = (f"smoothness {smooth['normal']:.4f} -> {smooth['+smoothness']:.4f} (-{d_smooth:.0%}), "
              f"success {succ['normal']:.3f} -> {succ['+smoothness']:.3f}, "
              f"workspace {ws['normal']:.4f} -> {ws['+workspace']:.4f} (-{d_ws:.0%})")
    print(table.to_text())
    assert verdict(4, "behavior composition", ok, detail, hammer_sim.seconds + time.perf_counter() - t0, 300)


def test_task_composition(verdict, multitask):
    t0 = time.perf_counter()
    s = EvalSettings(tasks=list(TASKS), k=4, **EVAL)
    table = task_figure(multitask.policy, s, alpha=1.5)
    succ = table.column("success")
    unc, cond, comp = succ["unconditioned"], succ["conditioned"], succ["composition alpha=1.5"]
    ok = comp >= unc and comp >= cond - 0.05
    print(table.to_text())
    assert verdict(5, "task composition", ok,
                   f"alpha=1.5 {comp:.3f} vs unconditioned {unc:.3f}, conditioned {cond:.3f}",
                   multitask.seconds + time.perf_counter() - t0, 600)


def test_domain_composition(verdict, hammer_human, hammer_sim):
    t0 = time.perf_counter()
    s = EvalSettings(tasks=["hammer"], k=4, profile=SIM_PROFILE, **EVAL)
    table = domain_figure(hammer_human.policy, hammer_sim.policy, s, gamma=0.1)
    succ = table.column("success")
    alone, comp = succ["human alone"], succ["human + sim"]
    ok = comp - alone >= 0.10
    print(table.to_text())
    assert verdict(6, "domain composition", ok,
                   f"human {alone:.3f} -> human + sim {comp:.3f} (+{comp - alone:.3f}); "
                   f"human + itself {succ['human + itself']:.3f}",
                   hammer_human.seconds + hammer_sim.seconds + time.perf_counter() - t0, 600)


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for op in OP_CASES:
        rng = np.random.default_rng(100 + OP_CASES.index(op))
        worst[op] = max(_check_grads(*_build(op, rng)) for _ in range(100))
    rng = np.random.default_rng(7)
    for name, cost, grad in (("smoothness", smoothness_cost, smoothness_grad),
                             ("workspace", workspace_cost, workspace_grad)):
        errs = []
        for _ in range(100):
            h, d = int(rng.integers(3, 17)), int(rng.integers(1, 4))
            x = rng.normal(size=(h, d))
            if name == "smoothness":
                args = ()
            else:
                args = (-np.full(d, 2.0), np.full(d, 2.0), rng.normal(size=d))
            num = central_difference(lambda: cost(x, *args), x)
            errs.append(relative_error(grad(x, *args), num))
        worst[name] = max(errs)
    top = max(worst, key=worst.get)
    ok = worst[top] < frozen.FD_RTOL
    assert verdict(7, "gradient suite", ok, f"{len(worst)} kinds x 100 instances, worst {top} {worst[top]:.1e}",
                   time.perf_counter() - t0, 30)


def test_reconstruction(verdict, overfit):
    t0 = time.perf_counter()
    p, w = overfit.policy, overfit.windows
    cfg = SamplerConfig(mode="implicit", n_steps=16, eta=0.0)
    x = p.sample(w.obs.take([0]), TaskLabel("hammer"), cfg, np.random.default_rng(0))
    rmse = float(np.sqrt(np.mean((x[0] - w.traj[0]) ** 2)))
    all_x = p.sample(w.obs, TaskLabel("hammer"), cfg, np.random.default_rng(0))
    mean_rmse = float(np.mean(np.sqrt(np.mean((all_x - w.traj) ** 2, axis=(1, 2)))))
    ok = rmse < frozen.RECON_RMSE
    assert verdict(8, "reconstruction", ok,
                   f"RMSE {rmse:.3f} on the demo (mean {mean_rmse:.3f} over its {len(w)} windows)",
                   overfit.seconds + time.perf_counter() - t0, 120)


def test_rollout_ablation(verdict, hammer_sim):
    t0 = time.perf_counter()
    ctl = PolicyController(hammer_sim.policy, SIM_PROFILE)
    closed = evaluate(ctl, ["hammer"], k=4, **EVAL)
    open_loop = evaluate(ctl, ["hammer"], k=16, **EVAL)
    ok = closed.success >= open_loop.success
    assert verdict(9, "rollout ablation", ok, f"k=4 {closed.success:.3f} vs k=H {open_loop.success:.3f}",
                   hammer_sim.seconds + time.perf_counter() - t0, 300)


def _protocol_checkpoints(tmp_path) -> dict:
    def make(modalities, seed):
        dims = {m: obs_feature_shape(m) for m in modalities}
        return DiffusionPolicy(small_config(modalities[0], modalities=modalities, obs_dims=dims, seed=seed),
                               bench_bounds()).freeze()
    pols = {"policy": make(("points",), 1), "multitask": make(("points",), 2), "human": make(("points",), 3),
            "sim": make(("points",), 4), "robot": make(("grid",), 5), "pooled": make(("points", "grid"), 6)}
    pols.update({f"single_{t}": make(("points",), 10 + i) for i, t in enumerate(TASKS)})
    return {k: str(save_checkpoint(v, tmp_path / f"{k}.ckpt")) for k, v in pols.items()}


def test_degeneration_and_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    p = small_policy()
    obs = points_obs(np.random.default_rng(3), batch=8)
    exact = True
    for cfg in (SamplerConfig(mode="implicit"), SamplerConfig(mode="ancestral"), SamplerConfig(eta=0.5)):
        a = p.sample(obs, TaskLabel("knife"), cfg, np.random.default_rng(4))
        b = composed_sample(CompositionSpec(DomainPolicy(p, task=TaskLabel("knife")), [], cfg), [obs],
                            np.random.default_rng(4))
        exact &= bool(np.array_equal(a, b))
    ckpts = _protocol_checkpoints(tmp_path)
    cfg = RunConfig(tasks=["hammer", "wrench"], eval_scenes=3, eval_repeats=2, sampler={"n_steps": 4})
    reproduced = []
    for protocol in ("behavior_table", "task_figure", "domain_figure", "domain_sweep", "multitask_table",
                     "ablation"):
        outs = []
        for _ in range(2):
            s = EvalSettings(tasks=list(cfg.tasks), n_scenes=cfg.eval_scenes, repeats=cfg.eval_repeats, k=cfg.k,
                             seed=cfg.seed, sampler=cfg.sampler_config(), fingerprint=cfg.fingerprint())
            outs.append(run_protocol(protocol, ckpts, s).to_csv())
        reproduced.append(outs[0] == outs[1])
    ok = exact and all(reproduced)
    assert verdict(10, "degeneration and determinism", ok,
                   f"bit-exact degeneration {exact}, {sum(reproduced)}/6 protocols reproduced",
                   time.perf_counter() - t0, 60)
