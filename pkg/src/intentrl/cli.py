"""Command-line front end.

Exit codes: 0 success, 1 config/validation errors, 2 runtime failures.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import agents, bench, data, guidance, heatmap, icvf
from .envs import GridMaze
from .errors import ConfigError, DatasetParseError, IntentRlError, VersionError


def _add_env_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--env-kind", default="grid", choices=["grid", "point_mass"])
    parser.add_argument("--style", default="u_maze", choices=["u_maze", "rooms", "corridor"])
    parser.add_argument("--width", type=int, default=11)
    parser.add_argument("--height", type=int, default=11)
    parser.add_argument("--env-seed", type=int, default=0)
    parser.add_argument("--horizon", type=int, default=100)
    parser.add_argument("--gamma", type=float, default=0.98)


def _env_from_args(args) -> dict:
    return {
        "kind": args.env_kind, "style": args.style, "width": args.width,
        "height": args.height, "seed": args.env_seed, "horizon": args.horizon,
        "gamma": args.gamma,
    }


def cmd_generate_data(args) -> int:
    env = bench.make_env(_env_from_args(args))
    ds_cfg = {
        "collector": args.collector, "n_trajectories": args.n, "seed": args.seed,
        "sigma": args.sigma, "per_cell": args.per_cell,
        "corrupt_radius": args.corrupt_radius,
        "filter_successes": args.filter_successes,
    }
    dataset = bench.build_dataset(ds_cfg, env)
    data.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} trajectories ({dataset.n_frames} frames) to {args.out}")
    return 0


def cmd_train_icvf(args) -> int:
    dataset = data.load_dataset(args.data)
    sampler = data.SamplerConfig(
        p_randomgoal=args.p_randomgoal, p_trajgoal=args.p_trajgoal,
        p_currgoal=args.p_currgoal, p_samegoal=args.p_samegoal,
        intent_sametraj=not args.no_intent_sametraj, p_future=args.p_future,
    )
    config = icvf.IcvfTrainConfig(
        discount=args.gamma, expectile=args.expectile, learning_rate=args.lr,
        epsilon=args.adam_epsilon, tau=args.tau, batch_size=args.batch_size,
        steps=args.steps, sampler=sampler, seed=args.seed,
    )
    grid_shape = None
    tag = dataset.env_tag
    if tag.get("kind") == "grid":
        grid_shape = (tag["width"], tag["height"])
    init = args.init_from if args.init_from else "fresh"
    model, curve = icvf.train(dataset, config, init=init, head_kind=args.head,
                              grid_shape=grid_shape,
                              head_options={} if args.head == "tabular"
                              else {"hidden_dims": tuple(args.hidden_dims)})
    icvf.save_model(model, args.out, config={"head": args.head, "steps": args.steps,
                                             "seed": args.seed})
    if curve:
        bench._write_curve(curve, str(args.out) + ".curve.csv")
    print(f"trained {args.head} model for {args.steps} steps; final loss "
          f"{curve[-1][1]:.6f}" if curve else "trained 0 steps")
    return 0


def cmd_train_agent(args) -> int:
    env = bench.make_env(_env_from_args(args))
    offline = data.load_dataset(args.data) if args.data else None
    gcfg = guidance.GuidanceConfig(mode="none")
    if args.guidance_ckpt:
        model = icvf.load_model(args.guidance_ckpt)
        gcfg = guidance.GuidanceConfig(mode=args.guidance_mode, lam=args.lam,
                                       goal=env.goal_features(), model=model,
                                       gamma=args.gamma)
    acfg = agents.AgentConfig(
        algo=args.algo, offline_ratio=args.offline_ratio, batch_size=args.batch_size,
        start_training=args.start_training, utd=args.utd, discount=args.gamma,
        learning_rate=args.lr, eval_interval=args.eval_interval, seed=args.seed,
    )
    policy, metrics = agents.train_online(env, offline, acfg, gcfg, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    import csv

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["env_step", "eval_return_mean", "eval_return_std", "success_rate"])
        for row in metrics:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    if isinstance(policy, agents.TabularQPolicy):
        policy.save(out / "policy.json")
    else:
        policy.save(out / "policy.ckpt")
    if metrics:
        print(f"final: step={metrics[-1][0]} return={metrics[-1][1]:.3f} "
              f"success={metrics[-1][3]:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    env = bench.make_env(_env_from_args(args))
    path = Path(args.policy)
    if path.suffix == ".json":
        policy = agents.TabularQPolicy.load(path)
    else:
        policy = agents.DqnPolicy.load(path)
    mean_ret, std_ret, success = agents.evaluate(policy, env, n_episodes=args.episodes,
                                                 seed=args.seed)
    print(f"return_mean={mean_ret} return_std={std_ret} success_rate={success}")
    return 0


def cmd_heatmap(args) -> int:
    env = bench.make_env(_env_from_args(args))
    if not isinstance(env, GridMaze):
        raise ConfigError("heatmaps need a grid environment")
    model = icvf.load_model(args.ckpt)
    grid = icvf.value_heatmap(model, env)
    if args.format == "svg":
        heatmap.emit_heatmap(grid, env.layout, args.out, title=Path(args.ckpt).stem)
    else:
        heatmap.emit_heatmap_pgm(grid, env.layout, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_experiment(args) -> int:
    cfg = bench.load_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    out_dir = bench.run_experiment(cfg, out=args.out, force=args.force,
                                   workers=args.workers)
    print(f"experiment artifacts in {out_dir}")
    return 0


def cmd_aggregate(args) -> int:
    path = bench.aggregate_dir(args.dir)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intentrl",
                                     description="Value-guided sparse-reward RL lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="collect a trajectory dataset")
    _add_env_args(p)
    p.add_argument("--collector", default="random",
                   choices=["random", "random_starts", "noisy_expert", "passive_sweep"])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--per-cell", type=int, default=2)
    p.add_argument("--corrupt-radius", type=float, default=None)
    p.add_argument("--filter-successes", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-icvf", help="train a value model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--head", default="monolithic",
                   choices=["tabular", "monolithic", "multilinear"])
    p.add_argument("--steps", type=int, default=30000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--adam-epsilon", type=float, default=1e-8)
    p.add_argument("--expectile", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=0.98)
    p.add_argument("--tau", type=float, default=0.005)
    p.add_argument("--hidden-dims", type=int, nargs="+", default=[64, 64])
    p.add_argument("--p-randomgoal", type=float, default=0.2)
    p.add_argument("--p-trajgoal", type=float, default=0.7)
    p.add_argument("--p-currgoal", type=float, default=0.1)
    p.add_argument("--p-samegoal", type=float, default=0.5)
    p.add_argument("--p-future", type=float, default=0.15)
    p.add_argument("--no-intent-sametraj", action="store_true")
    p.add_argument("--init-from", default=None, help="checkpoint to finetune from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_icvf)

    p = sub.add_parser("train-agent", help="run online RL with optional guidance")
    _add_env_args(p)
    p.add_argument("--data", default=None, help="offline dataset for batch mixing")
    p.add_argument("--guidance-ckpt", default=None)
    p.add_argument("--guidance-mode", default="additive_value",
                   choices=["none", "additive_value", "potential"])
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--algo", default="tabular_q", choices=["tabular_q", "dqn_lite"])
    p.add_argument("--offline-ratio", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--start-training", type=int, default=1000)
    p.add_argument("--utd", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--eval-interval", type=int, default=5000)
    p.add_argument("--steps", type=int, default=30000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("evaluate", help="greedy evaluation of a saved policy")
    _add_env_args(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="render V(s, g, g) over the maze")
    _add_env_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--format", default="svg", choices=["svg", "pgm"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("experiment", help="run a config-driven experiment suite")
    p.add_argument("config", help="TOML or JSON experiment config")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None,
                   help="override: run only this single seed")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("aggregate", help="recompute aggregates from per-run CSVs")
    p.add_argument("dir")
    p.set_defaults(func=cmd_aggregate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetParseError, VersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IntentRlError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
