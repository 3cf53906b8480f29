"""Comparison protocols: each returns a Table of evaluation results across variants."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..bench import DEFAULT_CONFIG, ROBOT_PROFILE, SIM_PROFILE, BenchConfig, DomainProfile
from ..compose import Behavior, CompositionSpec, DomainPolicy, TaskGuidance
from ..costs import CostFunction
from ..policy import DiffusionPolicy, TaskLabel, TASKS, load_checkpoint
from ..schedule import SamplerConfig
from .reporting import Table
from .rollout import ComposedController, EvalReport, PolicyController, evaluate

PROTOCOLS = ("behavior_table", "task_figure", "domain_figure", "domain_sweep", "multitask_table", "ablation")

# variants each protocol needs, by checkpoint name
REQUIRED = {
    "behavior_table": ("policy",),
    "task_figure": ("multitask",),
    "domain_figure": ("human", "sim"),
    "domain_sweep": ("human", "sim"),
    "multitask_table": ("multitask",) + tuple(f"single_{t}" for t in TASKS),
    "ablation": ("sim", "robot", "pooled"),
}


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class EvalSettings:
    tasks: list = field(default_factory=lambda: list(TASKS))
    n_scenes: int = 50
    repeats: int = 3
    k: int = 4
    seed: int = 0
    seed_offset: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    profile: DomainProfile = SIM_PROFILE
    bench: BenchConfig = DEFAULT_CONFIG
    fingerprint: str = ""

    def run(self, controller, tasks: Sequence[str] | None = None, k: int | None = None) -> EvalReport:
        return evaluate(controller, tasks or self.tasks, self.n_scenes, self.repeats, k or self.k, self.seed,
                        self.seed_offset, self.fingerprint, config=self.bench)


def _row(table: Table, label: str, rep: EvalReport) -> None:
    table.add(label, rep.success, rep.stderr, rep.smoothness, rep.workspace, rep.episodes)


REPORT_COLUMNS = ["success", "stderr", "smoothness", "workspace", "episodes"]


def _spec_controller(build, profiles, s: EvalSettings) -> ComposedController:
    return ComposedController(build, profiles, config=s.bench)


def behavior_table(policy: DiffusionPolicy, s: EvalSettings, gamma_smooth: float = 0.02,
                   gamma_workspace: float = 0.1, task: str = "hammer") -> Table:
    """Rows normal / +smoothness / +workspace on one task."""
    box = s.bench.safety_box
    variants = {
        "normal": [],
        "+smoothness": [Behavior(CostFunction("smoothness", gamma_smooth))],
        "+workspace": [Behavior(CostFunction("workspace", gamma_workspace, lo=[-box, -box], hi=[box, box]))],
    }
    table = Table(f"behavior composition ({task}, k={s.k})", REPORT_COLUMNS)
    for label, terms in variants.items():
        ctl = _spec_controller(
            lambda t, terms=terms: CompositionSpec(DomainPolicy(policy, task=TaskLabel(t)), terms, s.sampler),
            [s.profile] + [None] * len(terms), s)
        _row(table, label, s.run(ctl, [task]))
    return table


def task_figure(multitask: DiffusionPolicy, s: EvalSettings, alpha: float = 1.5) -> Table:
    """Unconditioned vs conditioned vs task-composed multitask sampling."""
    table = Table("task composition (multitask policy)", REPORT_COLUMNS)
    _row(table, "unconditioned", s.run(PolicyController(multitask, s.profile, s.sampler, conditioned=False,
                                                         config=s.bench)))
    _row(table, "conditioned", s.run(PolicyController(multitask, s.profile, s.sampler, config=s.bench)))
    ctl = _spec_controller(lambda t: CompositionSpec(TaskGuidance(multitask, TaskLabel(t), alpha), [], s.sampler),
                           [s.profile], s)
    _row(table, f"composition alpha={alpha}", s.run(ctl))
    return table


def _domain_controller(human, other, gamma, s: EvalSettings, profiles=None):
    profiles = profiles or [s.profile, s.profile]

    def build(t):
        terms = [DomainPolicy(other, task=TaskLabel(t), gamma_d=gamma)] if gamma > 0 else []
        return CompositionSpec(DomainPolicy(human, task=TaskLabel(t)), terms, s.sampler)
    return _spec_controller(build, profiles[:1] if gamma <= 0 else profiles, s)


def domain_figure(human: DiffusionPolicy, sim: DiffusionPolicy, s: EvalSettings, gamma: float = 0.1) -> Table:
    """Weak domain policy alone, the clean-domain policy alone, and their composition.

    The self-composition row (the weak policy added to itself with the same
    weight) separates the information contributed by the second policy from
    the sharpening effect of scaling one score.
    """
    table = Table(f"domain composition (gamma_D={gamma}, evaluated on {s.profile.domain})", REPORT_COLUMNS)
    _row(table, f"{human.config.domain} alone", s.run(_domain_controller(human, None, 0.0, s)))
    _row(table, f"{sim.config.domain} alone", s.run(_domain_controller(sim, None, 0.0, s)))
    _row(table, f"{human.config.domain} + {sim.config.domain}", s.run(_domain_controller(human, sim, gamma, s)))
    _row(table, f"{human.config.domain} + itself", s.run(_domain_controller(human, human, gamma, s)))
    return table


def domain_sweep(human: DiffusionPolicy, sim: DiffusionPolicy, s: EvalSettings,
                 gammas: Sequence[float] = (0.0, 0.05, 0.1, 0.2, 0.5)) -> Table:
    table = Table("domain composition scale sweep", ["gamma_D"] + REPORT_COLUMNS)
    for g in gammas:
        rep = s.run(_domain_controller(human, sim, g, s))
        table.add(f"gamma_D={g}", g, rep.success, rep.stderr, rep.smoothness, rep.workspace, rep.episodes)
    return table


def multitask_table(singles: Mapping[str, DiffusionPolicy], multitask: DiffusionPolicy, s: EvalSettings,
                    alphas: Sequence[float] = (0.1, 2.0)) -> Table:
    """Per-task success for single-task policies and multitask variants, with both spread decompositions."""
    cols = list(s.tasks) + ["mean", "task_spread", "repeat_spread"]
    table = Table("multitask comparison", cols)

    def add(label, reports):
        rates = [reports[t].tasks[t]["success"] for t in s.tasks]
        reps = np.array([reports[t].task_repeats[t] for t in s.tasks])
        table.add(label, *rates, float(np.mean(rates)), float(np.std(rates)), float(np.std(reps.mean(axis=0))))

    add("single-task", {t: s.run(PolicyController(singles[t], s.profile, s.sampler, config=s.bench), [t])
                        for t in s.tasks})
    unc = s.run(PolicyController(multitask, s.profile, s.sampler, conditioned=False, config=s.bench))
    add("MT unconditioned", {t: unc for t in s.tasks})
    cond = s.run(PolicyController(multitask, s.profile, s.sampler, config=s.bench))
    add("MT conditioned", {t: cond for t in s.tasks})
    for a in alphas:
        ctl = _spec_controller(lambda t, a=a: CompositionSpec(TaskGuidance(multitask, TaskLabel(t), a), [],
                                                              s.sampler), [s.profile], s)
        rep = s.run(ctl)
        add(f"MT composition alpha={a}", {t: rep for t in s.tasks})
    table.notes.append("task_spread: std over tasks of per-task rates; repeat_spread: std over repeats "
                       "of the task-averaged rate")
    return table


def ablation(sim: DiffusionPolicy, robot: DiffusionPolicy, pooled: DiffusionPolicy, s: EvalSettings,
             gamma: float = 0.1) -> Table:
    """Cross-modality composition against a pooled two-encoder policy and against open-loop execution.

    Scenes are observed by both sensors: the robot-analog policy reads grids,
    the sim-analog policy reads point sets.
    """
    grid, points = ROBOT_PROFILE, s.profile
    table = Table("ablations", REPORT_COLUMNS)
    comp = _domain_controller(robot, sim, gamma, s, [grid, points])
    _row(table, "composition", s.run(comp))
    _row(table, "data pooling (grid)", s.run(PolicyController(pooled, grid, s.sampler, config=s.bench)))
    _row(table, "data pooling (points)", s.run(PolicyController(pooled, points, s.sampler, config=s.bench)))
    _row(table, "no rollout (k=H)", s.run(comp, k=robot.horizon))
    return table


def load_variants(checkpoints: Mapping[str, str], protocol: str) -> dict[str, DiffusionPolicy]:
    """Load the checkpoints a protocol needs; missing ones are reported together."""
    if protocol not in REQUIRED:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    missing = [v for v in REQUIRED[protocol] if v not in checkpoints or not Path(checkpoints[v]).exists()]
    if missing:
        raise MissingCheckpoint(f"{protocol}: missing checkpoints for variants {missing}")
    return {v: load_checkpoint(checkpoints[v]) for v in REQUIRED[protocol]}


def run_protocol(protocol: str, checkpoints: Mapping[str, str], s: EvalSettings, **kw) -> Table:
    p = load_variants(checkpoints, protocol)
    if protocol == "behavior_table":
        return behavior_table(p["policy"], s, **kw)
    if protocol == "task_figure":
        return task_figure(p["multitask"], s, **kw)
    if protocol == "domain_figure":
        return domain_figure(p["human"], p["sim"], s, **kw)
    if protocol == "domain_sweep":
        return domain_sweep(p["human"], p["sim"], s, **kw)
    if protocol == "multitask_table":
        return multitask_table({t: p[f"single_{t}"] for t in TASKS}, p["multitask"], s, **kw)
    return ablation(p["sim"], p["robot"], p["pooled"], s, **kw)
