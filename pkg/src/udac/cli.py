"""Command-line entry points: gen-data, train, eval, export-traj, ablate-lambda."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .actor import DistortionSpec
from .dataset import generate_mixture, load_dataset, save_dataset
from .envs import RiskyPointMassConfig, load_env_config
from .evaluation import ablate_lambda, evaluate, export_trajectories, udac_policy, write_reports
from .trainer import TrainerConfig, Trainer, load_models, load_trainer_config


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _env_config(path: str | None) -> RiskyPointMassConfig:
    return load_env_config(path) if path else RiskyPointMassConfig()


def _trainer_config(args: argparse.Namespace) -> TrainerConfig:
    cfg = load_trainer_config(args.config) if args.config else TrainerConfig()
    actor = cfg.actor
    if args.lam is not None:
        actor = replace(actor, lam=args.lam)
    if args.distortion is not None:
        actor = replace(actor, distortion=DistortionSpec.parse(args.distortion))
    guidance = cfg.guidance
    if args.guidance_scale is not None:
        guidance = replace(guidance, guidance_scale=args.guidance_scale)
    if args.no_guidance:
        guidance = replace(guidance, enabled=False)
    updates = {"actor": actor, "guidance": guidance}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.diffusion_steps is not None:
        updates["diffusion_steps"] = args.diffusion_steps
    if args.steps is not None:
        updates["gradient_steps"] = args.steps
    if args.freeze_taus:
        updates["freeze_taus"] = True
    if args.target_actor_bootstrap:
        updates["target_actor_bootstrap"] = True
    return replace(cfg, **updates)


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset file written by gen-data")
    p.add_argument("--config", help="trainer config JSON")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--distortion", help="cvar:0.1 | mean | wang:-0.75 | cpw:0.71")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="gradient steps (overrides the config)")
    p.add_argument("--diffusion-steps", type=int)
    p.add_argument("--guidance-scale", type=float)
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--freeze-taus", action="store_true")
    p.add_argument("--target-actor-bootstrap", action="store_true")


def cmd_gen_data(args: argparse.Namespace) -> int:
    env = _env_config(args.env_config)
    ds = generate_mixture(env, args.episodes, _floats(args.mixture), seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}: {json.dumps(ds.source_manifest)}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    ds = load_dataset(args.data)
    cfg = _trainer_config(args)
    trainer = Trainer(ds, cfg)
    trainer.run(checkpoint_dir=args.out)
    trainer.save(args.out)
    last = trainer.log.records[-1] if trainer.log.records else None
    print(f"trained {trainer.step_count} steps into {args.out}" + (f"; last {last}" if last else ""))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    models, cfg = load_models(args.model)
    env = _env_config(args.env_config)
    lam = cfg.actor.lam if args.lam is None else args.lam
    policy = udac_policy(models, lam, cfg.guidance)
    rows = [({"seed": str(s)}, evaluate(policy, env, args.episodes, (s,))) for s in range(args.seeds)]
    rows.append(({"seed": "all"}, evaluate(policy, env, args.episodes, tuple(range(args.seeds)))))
    if args.out:
        write_reports(rows, args.out)
    print(json.dumps(rows[-1][1].summary(), indent=2))
    return 0


def cmd_export_traj(args: argparse.Namespace) -> int:
    models, cfg = load_models(args.model)
    env = _env_config(args.env_config)
    n = export_trajectories(udac_policy(models, cfg.actor.lam, cfg.guidance), env, args.episodes, args.out, args.seed)
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    ds = load_dataset(args.data)
    cfg = _trainer_config(args)
    env = _env_config(args.env_config)
    rows = ablate_lambda(
        ds, cfg, _floats(args.grid), env, seeds=range(args.seeds), episodes=args.episodes,
        share_behavior_steps=args.share_behavior_steps, out=args.out,
        on_row=lambda r: print(f"lambda={r.lam:g} seed={r.seed} cvar10={r.report.cvar10_return:.3f}", flush=True),
    )
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll out the scripted behaviour mixture")
    p.add_argument("--env-config")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--mixture", default="0.4,0.4,0.2", help="direct,detour,noisy proportions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint directory")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the risky environment")
    p.add_argument("--model", required=True)
    p.add_argument("--env-config")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-traj", help="dump evaluation trajectories as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--env-config")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_traj)

    p = sub.add_parser("ablate-lambda", help="train and evaluate across a lambda grid")
    _add_training_flags(p)
    p.add_argument("--env-config")
    p.add_argument("--grid", default="0.01,0.25,0.5,0.75,1.0")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--share-behavior-steps", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"udac {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
