"""Command line entry point: ``trajcompose <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..bench import PROFILES, build_dataset, save_dataset
from ..compose import CompositionSpec
from ..policy import TASKS, load_checkpoint
from .config import RunConfig, load_config
from .experiments import PROTOCOLS, EvalSettings, run_protocol
from .reporting import plot_curve
from .rollout import ComposedController, PolicyController
from .training import train

log = logging.getLogger("trajcompose")


def _parse_sets(items) -> dict:
    """``key=value`` pairs; values parsed as YAML scalars/lists."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


def _run_config(args) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    for flag, key in (("scenes", "eval_scenes"), ("repeats", "eval_repeats"), ("k", "k")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "tasks", None):
        overrides["tasks"] = args.tasks
    return load_config(args.config, overrides)


def _settings(cfg: RunConfig, profile: str) -> EvalSettings:
    return EvalSettings(tasks=list(cfg.tasks), n_scenes=cfg.eval_scenes, repeats=cfg.eval_repeats, k=cfg.k,
                        seed=cfg.seed, seed_offset=cfg.eval_seed_offset, sampler=cfg.sampler_config(),
                        profile=PROFILES[profile], fingerprint=cfg.fingerprint())


def cmd_gen_data(args) -> int:
    profile = PROFILES[args.profile]
    ds = build_dataset(profile, args.tasks or list(TASKS), args.n_demos, args.seed)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds.episodes)} episodes to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ckpt = train(cfg)
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    s = _settings(cfg, args.profile)
    policy = load_checkpoint(args.checkpoint)
    rep = s.run(PolicyController(policy, s.profile, s.sampler, conditioned=not args.unconditioned, config=s.bench))
    _emit(rep.to_json(), args.out)
    return 0


def cmd_compose_eval(args) -> int:
    cfg = _run_config(args)
    if not cfg.compose:
        raise ValueError("config has no 'compose' section")
    s = _settings(cfg, args.profile)
    profiles = [PROFILES[p] if p else None for p in cfg.compose.get("profiles", [])]
    cache: dict = {}

    def build(task):
        d = json.loads(json.dumps(cfg.compose))
        for e in [d["base"]] + d.get("terms", []):
            if e.get("type") != "behavior" and e.get("task", "scene") == "scene":
                e["task"] = task
        d.setdefault("sampler", cfg.sampler)
        spec = CompositionSpec.from_dict(d, loader=lambda p: cache.setdefault(p, load_checkpoint(p)))
        return spec

    n_terms = 1 + len(cfg.compose.get("terms", []))
    if not profiles:
        profiles = [s.profile] * n_terms
    rep = s.run(ComposedController(build, profiles, config=s.bench, horizon=cfg.horizon))
    _emit(rep.to_json(), args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    s = _settings(cfg, args.profile)
    table = run_protocol("domain_sweep", {"human": args.human, "sim": args.sim}, s, gammas=args.gammas)
    out = Path(args.out)
    table.save(out, "domain_sweep")
    plot_curve(args.gammas, [r[2] for r in table.rows], [r[3] for r in table.rows], out / "domain_sweep.svg",
               title="success vs domain weight")
    print(table.to_text())
    return 0


def cmd_report(args) -> int:
    cfg = _run_config(args)
    s = _settings(cfg, args.profile)
    ckpts = dict(item.split("=", 1) for item in args.ckpt or [])
    table = run_protocol(args.protocol, ckpts, s)
    paths = table.save(args.out, args.protocol)
    (Path(args.out) / f"{args.protocol}.json").write_text(
        json.dumps(dict(table.to_dict(), fingerprint=cfg.fingerprint()), indent=2))
    print(table.to_text())
    log.info("wrote %s", ", ".join(map(str, paths)))
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajcompose", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--tasks", nargs="+", choices=TASKS)
        sp.add_argument("--scenes", type=int, help="evaluation scenes per task and repeat")
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--k", type=int, help="actions executed per plan")
        sp.add_argument("--profile", default="sim", choices=sorted(PROFILES), help="evaluation domain")

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--profile", default="sim", choices=sorted(PROFILES))
    g.add_argument("--tasks", nargs="+", choices=TASKS)
    g.add_argument("--n-demos", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy from dataset files")
    with_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one checkpoint")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--unconditioned", action="store_true", help="sample with the null task")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compose-eval", help="evaluate the composition in the config")
    with_config(c)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compose_eval)

    s = sub.add_parser("sweep", help="domain weight sweep with an SVG curve")
    with_config(s)
    s.add_argument("--human", required=True, help="weak-domain checkpoint")
    s.add_argument("--sim", required=True, help="clean-domain checkpoint")
    s.add_argument("--gammas", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.5])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="run a comparison protocol")
    with_config(r)
    r.add_argument("--protocol", required=True, choices=PROTOCOLS)
    r.add_argument("--ckpt", action="append", metavar="VARIANT=PATH")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # any protocol error -> nonzero exit with a one-line diagnostic
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
