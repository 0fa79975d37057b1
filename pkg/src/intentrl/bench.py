"""Config-driven experiment runner.

An experiment config (TOML or JSON, identical schema) resolves to a set of
(arm x seed) runs. Value models train once per arm in a first phase; RL runs
then execute against the frozen checkpoints, each writing its own metrics
CSV. The coordinator aggregates only after all runs settle. Datasets are
regenerated deterministically from the recipe inside every job, so runs are
reproducible from (config, seed) alone.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import platform
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, agents, data, guidance, heatmap, icvf
from .envs import GridMaze, MazeLayout, PointMass, generate_maze, MAZE_STYLES
from .errors import ConfigError, ValidationError

EXPERIMENT_KINDS = (
    "corrupted_generalization",
    "data_scaling",
    "pretrain_ablation",
    "baseline_suite",
    "head_comparison",
)

METRIC_FIELDS = ("run_id", "arm", "seed", "env_step",
                 "eval_return_mean", "eval_return_std", "success_rate")

DEFAULTS = {
    "seeds": [0, 1, 2, 3, 4, 5, 6, 7],
    "env": {"kind": "grid", "style": "u_maze", "width": 11, "height": 11,
            "seed": 0, "horizon": 100, "gamma": 0.98},
    "dataset": {"collector": "random_starts", "n_trajectories": 400, "seed": 11,
                "corrupt_radius": None, "filter_successes": False, "sigma": 0.3,
                "per_cell": 2},
    "icvf": {"head": "monolithic", "steps": 30000, "batch_size": 64,
             "learning_rate": 3e-4, "epsilon": 1e-8, "expectile": 0.9,
             "discount": 0.98, "tau": 0.005, "hidden_dims": [64, 64],
             "latent_dim": 16, "seed": 3,
             "sampler": {"p_randomgoal": 0.2, "p_trajgoal": 0.7, "p_currgoal": 0.1,
                         "p_samegoal": 0.5, "intent_sametraj": True, "p_future": 0.15}},
    "agent": {"algo": "tabular_q", "total_env_steps": 30000, "offline_ratio": 0.5,
              "batch_size": 128, "start_training": 1000, "utd": 4,
              "learning_rate": 0.5, "discount": 0.98, "tau": 0.005,
              "q_ensemble": 1, "soft_backup": False, "temperature": 0.1,
              "eval_interval": 5000, "eval_episodes": 10,
              "epsilon_start": 1.0, "epsilon_end": 0.05, "epsilon_fraction": 0.2,
              "replay_capacity": 100000, "hidden_dims": [64, 64]},
    "guidance": {"mode": "additive_value", "lam": 0.001},
    "fractions": [0.1, 0.5, 1.0],
    "pretrain": {"n_layouts": 8, "per_cell": 1, "seed": 101, "steps": 30000},
    "bc": {"epochs": 20, "seed": 5},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Read a TOML or JSON experiment config by file extension."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml_mod  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as toml_mod
        return toml_mod.loads(text)
    raise ConfigError(f"unsupported config extension {path.suffix!r} (use .toml or .json)")


def resolve_config(cfg: dict) -> dict:
    resolved = _deep_merge(DEFAULTS, cfg)
    if "kind" not in resolved:
        resolved["kind"] = None
    return resolved


def validate_config(cfg: dict) -> list:
    """Collect every violation instead of stopping at the first."""
    problems = []
    kind = cfg.get("kind")
    if kind not in EXPERIMENT_KINDS:
        problems.append(f"kind={kind!r} not one of {EXPERIMENT_KINDS}")
    if not cfg.get("seeds"):
        problems.append("seeds must be a non-empty list")
    env = cfg.get("env", {})
    if env.get("kind") not in ("grid", "point_mass"):
        problems.append(f"env.kind={env.get('kind')!r} not grid or point_mass")
    if env.get("style") not in MAZE_STYLES:
        problems.append(f"env.style={env.get('style')!r} not one of {MAZE_STYLES}")
    if env.get("width", 0) < 5 or env.get("height", 0) < 5:
        problems.append("env.width and env.height must be >= 5")
    if not 0 < env.get("gamma", 0.98) < 1:
        problems.append("env.gamma must lie in (0, 1)")
    ds = cfg.get("dataset", {})
    if ds.get("collector") not in ("random", "random_starts", "noisy_expert", "passive_sweep"):
        problems.append(f"dataset.collector={ds.get('collector')!r} unknown")
    elif env.get("kind") == "point_mass" and ds.get("collector") in ("random_starts",
                                                                     "passive_sweep"):
        problems.append(f"dataset.collector={ds.get('collector')!r} needs a grid env")
    if env.get("kind") == "point_mass" and cfg.get("agent", {}).get("algo") == "tabular_q":
        problems.append("agent.algo=tabular_q needs a grid env (use dqn_lite)")
    ic = cfg.get("icvf", {})
    if ic.get("head") not in icvf.HEAD_KINDS:
        problems.append(f"icvf.head={ic.get('head')!r} not one of {icvf.HEAD_KINDS}")
    if not 0.5 <= ic.get("expectile", 0.9) < 1:
        problems.append("icvf.expectile must lie in [0.5, 1)")
    if ic.get("steps", 1) < 0:
        problems.append("icvf.steps must be >= 0")
    ag = cfg.get("agent", {})
    if ag.get("algo") not in ("tabular_q", "dqn_lite"):
        problems.append(f"agent.algo={ag.get('algo')!r} unknown")
    if ag.get("total_env_steps", 1) < 0:
        problems.append("agent.total_env_steps must be >= 0")
    if not 0 <= ag.get("offline_ratio", 0.5) <= 1:
        problems.append("agent.offline_ratio must lie in [0, 1]")
    gd = cfg.get("guidance", {})
    if gd.get("mode") not in guidance.GUIDANCE_MODES:
        problems.append(f"guidance.mode={gd.get('mode')!r} unknown")
    if gd.get("lam", 0.0) < 0:
        problems.append("guidance.lam must be >= 0")
    if kind in ("data_scaling", "pretrain_ablation"):
        fr = cfg.get("fractions", [])
        if not fr:
            problems.append("fractions must be non-empty for scaling/ablation kinds")
        bad = [f for f in fr if not 0 <= f <= 1 or (f == 0 and kind == "data_scaling")]
        if bad:
            problems.append(f"fractions {bad} outside the valid range")
    return problems


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def make_env(env_cfg: dict):
    layout = generate_maze(env_cfg["seed"], env_cfg["width"], env_cfg["height"],
                           env_cfg["style"])
    if env_cfg["kind"] == "grid":
        return GridMaze(layout, horizon=env_cfg["horizon"], gamma=env_cfg["gamma"])
    return PointMass.from_layout(layout, horizon=env_cfg["horizon"],
                                 gamma=env_cfg["gamma"])


def build_dataset(ds_cfg: dict, env) -> data.TrajectoryDataset:
    collector = ds_cfg["collector"]
    if collector == "random":
        dataset = data.collect_random(env, ds_cfg["n_trajectories"], ds_cfg["seed"])
    elif collector == "random_starts":
        dataset = data.collect_random_starts(env, ds_cfg["n_trajectories"], ds_cfg["seed"])
    elif collector == "noisy_expert":
        dataset = data.collect_noisy_expert(env, ds_cfg["sigma"],
                                            ds_cfg["n_trajectories"], ds_cfg["seed"])
    else:
        dataset = data.collect_passive_sweep(env, ds_cfg["per_cell"], ds_cfg["seed"])
    if ds_cfg.get("filter_successes"):
        dataset = data.filter_successes(dataset, env)
    radius = ds_cfg.get("corrupt_radius")
    if radius is not None:
        dataset = data.corrupt_near_goal(dataset, env, radius)
    return dataset


def pretrain_pool(cfg: dict, env) -> data.TrajectoryDataset:
    """Pooled passive random walks from procedurally distinct off-task layouts."""
    pre = cfg["pretrain"]
    envc = cfg["env"]
    styles = ("rooms", "corridor")
    parts = []
    for k in range(pre["n_layouts"]):
        layout = generate_maze(pre["seed"] + k, envc["width"], envc["height"],
                               styles[k % len(styles)])
        sub = GridMaze(layout, horizon=envc["horizon"], gamma=envc["gamma"])
        parts.append(data.collect_passive_sweep(sub, pre["per_cell"],
                                                seed=pre["seed"] * 7 + k))
    return data.merge(parts)


def _icvf_config(cfg: dict, seed_shift: int = 0) -> icvf.IcvfTrainConfig:
    ic = cfg["icvf"]
    return icvf.IcvfTrainConfig(
        discount=ic["discount"], expectile=ic["expectile"],
        learning_rate=ic["learning_rate"], epsilon=ic["epsilon"], tau=ic["tau"],
        batch_size=ic["batch_size"], steps=ic["steps"],
        sampler=data.SamplerConfig(**ic["sampler"]), seed=ic["seed"] + seed_shift,
    )


def _head_options(cfg: dict) -> dict:
    ic = cfg["icvf"]
    if ic["head"] == "multilinear":
        return {"hidden_dims": tuple(ic["hidden_dims"]), "latent_dim": ic["latent_dim"]}
    if ic["head"] == "monolithic":
        return {"hidden_dims": tuple(ic["hidden_dims"])}
    return {}


def _write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "mean_advantage_positive_fraction"])
        for step, loss, frac in curve:
            writer.writerow([step, repr(loss), repr(frac)])


def train_value_model(cfg: dict, out_dir: Path, arm_name: str, fraction: float = 1.0,
                      use_pretrain: bool = False) -> Path:
    """Phase-1 job: train (optionally pretrained then finetuned) value model."""
    env = make_env(cfg["env"])
    target = build_dataset(cfg["dataset"], env)
    if fraction < 1.0:
        target = data.subset(target, fraction)
    head = cfg["icvf"]["head"]
    grid_shape = (cfg["env"]["width"], cfg["env"]["height"])
    model = None
    if use_pretrain:
        pool = pretrain_pool(cfg, env)
        pre_cfg = _icvf_config(cfg)
        pre_cfg = dataclasses.replace(pre_cfg, steps=cfg["pretrain"]["steps"])
        model, pre_curve = icvf.train(pool, pre_cfg, head_kind=head,
                                      grid_shape=grid_shape,
                                      head_options=_head_options(cfg))
        _write_curve(pre_curve, out_dir / f"curve_pretrain_{arm_name}.csv")
    curve = []
    if fraction > 0.0 and len(target) > 0:
        fin_cfg = _icvf_config(cfg, seed_shift=1)
        model, curve = icvf.train(target, fin_cfg, head_kind=head,
                                  grid_shape=grid_shape, model=model,
                                  head_options=_head_options(cfg))
    elif model is None:
        model = icvf.create_icvf(head, feature_dim=env.feature_dim,
                                 grid_shape=grid_shape, seed=cfg["icvf"]["seed"],
                                 **_head_options(cfg))
    path = out_dir / f"model_{arm_name}.ckpt"
    icvf.save_model(model, path, config={"arm": arm_name, "fraction": fraction,
                                         "pretrained": use_pretrain})
    if curve:
        _write_curve(curve, out_dir / f"curve_{arm_name}.csv")
    if isinstance(env, GridMaze):
        grid = icvf.value_heatmap(model, env)
        heatmap.emit_heatmap(grid, env.layout, out_dir / f"heatmap_{arm_name}.svg",
                             title=arm_name)
    return path


def _run_rl(cfg: dict, arm: dict, seed: int):
    """Phase-2 job body: one (arm, seed) online RL run."""
    env = make_env(cfg["env"])
    dataset = build_dataset(cfg["dataset"], env)
    fraction = arm.get("fraction", 1.0)
    if fraction < 1.0:
        dataset = data.subset(dataset, fraction)
    offline = dataset if arm.get("offline_ratio", cfg["agent"]["offline_ratio"]) > 0 else None
    gcfg = guidance.GuidanceConfig(mode="none")
    if arm.get("model_path"):
        model = icvf.load_model(arm["model_path"])
        gcfg = guidance.GuidanceConfig(
            mode=arm.get("guidance_mode", cfg["guidance"]["mode"]),
            lam=arm.get("lam", cfg["guidance"]["lam"]),
            goal=env.goal_features(), model=model, gamma=cfg["env"]["gamma"],
        )
    ag = cfg["agent"]
    acfg = agents.AgentConfig(
        algo=ag["algo"], offline_ratio=arm.get("offline_ratio", ag["offline_ratio"]),
        replay_capacity=ag["replay_capacity"], batch_size=ag["batch_size"],
        start_training=ag["start_training"], utd=ag["utd"], discount=ag["discount"],
        learning_rate=ag["learning_rate"], tau=ag["tau"], q_ensemble=ag["q_ensemble"],
        soft_backup=ag["soft_backup"], temperature=ag["temperature"],
        epsilon_start=ag["epsilon_start"], epsilon_end=ag["epsilon_end"],
        epsilon_fraction=ag["epsilon_fraction"], eval_interval=ag["eval_interval"],
        eval_episodes=ag["eval_episodes"], hidden_dims=tuple(ag["hidden_dims"]),
        seed=seed,
    )
    prior = None
    if arm.get("jsrl"):
        if offline is None:
            offline = dataset
        prior = agents.bc_train(offline, epochs=cfg["bc"]["epochs"],
                                seed=cfg["bc"]["seed"], n_actions=env.n_actions)
        if acfg.offline_ratio == 0:
            offline = None
    _, metrics = agents.train_online(env, offline, acfg, gcfg,
                                     ag["total_env_steps"], jsrl_prior=prior)
    return metrics


def run_single_job(job: dict) -> dict:
    """Top-level entry so jobs can cross a process pool boundary."""
    cfg = job["cfg"]
    arm = job["arm"]
    seed = job["seed"]
    run_dir = Path(job["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    run_id = f"{arm['name']}-s{seed}"
    try:
        metrics = _run_rl(cfg, arm, seed)
    except Exception as exc:  # partial failures recorded, suite continues
        (run_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        return {"run_id": run_id, "ok": False, "error": str(exc)}
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for step, ret_mean, ret_std, success in metrics:
            writer.writerow([run_id, arm["name"], seed, step,
                             repr(ret_mean), repr(ret_std), repr(success)])
    return {"run_id": run_id, "ok": True}


def _arms_for(cfg: dict) -> list:
    kind = cfg["kind"]
    gmode = cfg["guidance"]["mode"]
    if gmode == "none":
        gmode = "additive_value"  # value arms always carry guidance
    if kind in ("corrupted_generalization", "baseline_suite"):
        arms = [
            {"name": "viva", "guidance_mode": gmode, "model": "scratch"},
            {"name": "rlpd", "guidance_mode": "none"},
            {"name": "jsrl", "guidance_mode": "none", "jsrl": True, "offline_ratio": 0.0},
            {"name": "vanilla", "guidance_mode": "none", "offline_ratio": 0.0},
        ]
        if kind == "baseline_suite":
            arms[0] = {"name": "viva", "guidance_mode": gmode, "model": "pretrained"}
            arms.insert(1, {"name": "viva_no_pretrain", "guidance_mode": gmode,
                            "model": "scratch"})
        return arms
    if kind == "data_scaling":
        return [
            {"name": f"frac_{f:g}", "guidance_mode": gmode, "model": "scratch",
             "fraction": f}
            for f in cfg["fractions"]
        ]
    if kind == "pretrain_ablation":
        arms = []
        for f in cfg["fractions"]:
            if f == 0:
                arms.append({"name": "pretrained_f0", "guidance_mode": gmode,
                             "model": "pretrained", "fraction": 0.0,
                             "offline_ratio": 0.0})
            else:
                arms.append({"name": f"pretrained_f{f:g}", "guidance_mode": gmode,
                             "model": "pretrained", "fraction": f})
                arms.append({"name": f"scratch_f{f:g}", "guidance_mode": gmode,
                             "model": "scratch", "fraction": f})
        return arms
    return []


def _aggregate_rows(metric_rows: list) -> tuple:
    """(aggregate rows, summary rows) from flat per-run metric dicts."""
    by_arm_step = {}
    for row in metric_rows:
        by_arm_step.setdefault((row["arm"], int(row["env_step"])), []).append(row)
    agg = []
    for (arm, step) in sorted(by_arm_step, key=lambda k: (k[0], k[1])):
        rows = by_arm_step[(arm, step)]
        rets = np.array([float(r["eval_return_mean"]) for r in rows])
        succ = np.array([float(r["success_rate"]) for r in rows])
        agg.append({
            "arm": arm, "env_step": step, "n_seeds": len(rows),
            "return_mean": float(rets.mean()), "return_std": float(rets.std()),
            "success_mean": float(succ.mean()), "success_std": float(succ.std()),
        })
    summary = []
    arms = sorted({a for (a, _) in by_arm_step})
    for arm in arms:
        steps = sorted(s for (a, s) in by_arm_step if a == arm)
        if not steps:
            continue
        final_step = steps[-1]
        halfway_step = min(steps, key=lambda s: abs(s - final_step / 2))
        for phase, step in (("halfway", halfway_step), ("final", final_step)):
            rows = by_arm_step[(arm, step)]
            rets = np.array([float(r["eval_return_mean"]) for r in rows])
            succ = np.array([float(r["success_rate"]) for r in rows])
            summary.append({
                "arm": arm, "phase": phase, "env_step": step, "n_seeds": len(rows),
                "return_mean": float(rets.mean()), "return_std": float(rets.std()),
                "success_mean": float(succ.mean()), "success_std": float(succ.std()),
            })
    return agg, summary


def _write_dict_csv(rows: list, fields: tuple, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([
                repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields
            ])


AGG_FIELDS = ("arm", "env_step", "n_seeds", "return_mean", "return_std",
              "success_mean", "success_std")
SUMMARY_FIELDS = ("arm", "phase", "env_step", "n_seeds", "return_mean", "return_std",
                  "success_mean", "success_std")


def read_run_metrics(out_dir: Path) -> list:
    rows = []
    for path in sorted(Path(out_dir).glob("runs/*/seed_*/metrics.csv")):
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def aggregate_dir(out_dir) -> Path:
    """Recompute aggregate.csv and summary.csv from the per-run CSVs."""
    out_dir = Path(out_dir)
    rows = read_run_metrics(out_dir)
    agg, summary = _aggregate_rows(rows)
    _write_dict_csv(agg, AGG_FIELDS, out_dir / "aggregate.csv")
    _write_dict_csv(summary, SUMMARY_FIELDS, out_dir / "summary.csv")
    return out_dir / "aggregate.csv"


def _transfer_comparison(cfg: dict, summary: list, out_dir: Path) -> None:
    """Fig.6-style comparison of pretrained vs scratch arms across fractions."""
    fractions = sorted(f for f in cfg["fractions"] if f > 0)
    rows = []
    for f in fractions:
        for kind in ("pretrained", "scratch"):
            arm = f"{kind}_f{f:g}"
            hit = [r for r in summary if r["arm"] == arm and r["phase"] == "final"]
            if hit:
                rows.append({"fraction": f, "arm": kind,
                             "final_success_mean": hit[0]["success_mean"],
                             "final_success_std": hit[0]["success_std"],
                             "n_seeds": hit[0]["n_seeds"]})
    zero = [r for r in summary if r["arm"] == "pretrained_f0" and r["phase"] == "final"]
    if zero:
        rows.append({"fraction": 0.0, "arm": "pretrained",
                     "final_success_mean": zero[0]["success_mean"],
                     "final_success_std": zero[0]["success_std"],
                     "n_seeds": zero[0]["n_seeds"]})
    _write_dict_csv(rows, ("fraction", "arm", "final_success_mean",
                           "final_success_std", "n_seeds"),
                    out_dir / "comparison.csv")
    if fractions:
        low = fractions[0]
        pre = next((r for r in rows if r["fraction"] == low and r["arm"] == "pretrained"), None)
        scr = next((r for r in rows if r["fraction"] == low and r["arm"] == "scratch"), None)
        if pre and scr:
            pooled = float(np.sqrt((pre["final_success_std"] ** 2
                                    + scr["final_success_std"] ** 2) / 2.0))
            diff = pre["final_success_mean"] - scr["final_success_mean"]
            ratio = (float("inf") if scr["final_success_mean"] == 0
                     else pre["final_success_mean"] / scr["final_success_mean"])
            (out_dir / "transfer_summary.json").write_text(json.dumps({
                "lowest_fraction": low,
                "pretrained_mean": pre["final_success_mean"],
                "scratch_mean": scr["final_success_mean"],
                "ratio": None if ratio == float("inf") else ratio,
                "scratch_is_zero": scr["final_success_mean"] == 0,
                "pooled_std": pooled,
                "within_noise": bool(abs(diff) <= pooled),
            }, sort_keys=True, indent=2))


def _head_comparison(cfg: dict, out_dir: Path) -> None:
    """Train both network heads and emit value curves along a fixed trajectory."""
    env = make_env(cfg["env"])
    dataset = build_dataset(cfg["dataset"], env)
    expert = data.collect_noisy_expert(env, 0.0, 1, seed=0).trajectories[0]
    states = expert.states
    anchors = {"start": states[0], "middle": states[len(states) // 2], "end": states[-1]}
    rows = []
    for head in ("monolithic", "multilinear"):
        head_cfg = dict(cfg)
        head_cfg["icvf"] = dict(cfg["icvf"], head=head)
        model, curve = icvf.train(dataset, _icvf_config(head_cfg), head_kind=head,
                                  grid_shape=(cfg["env"]["width"], cfg["env"]["height"]),
                                  head_options=_head_options(head_cfg))
        _write_curve(curve, out_dir / f"curve_{head}.csv")
        icvf.save_model(model, out_dir / f"model_{head}.ckpt")
        for tag, anchor in anchors.items():
            goals = np.tile(anchor, (len(states), 1))
            vals = model.value_batch(states, goals, goals)
            for t, v in enumerate(vals):
                rows.append({"head": head, "goal": tag, "t": t, "value": float(v)})
        if isinstance(env, GridMaze):
            heatmap.emit_heatmap(icvf.value_heatmap(model, env), env.layout,
                                 out_dir / f"heatmap_{head}.svg", title=head)
    _write_dict_csv(rows, ("head", "goal", "t", "value"),
                    out_dir / "head_value_curves.csv")


def run_experiment(cfg: dict, out=None, force: bool = False, workers: int = 1) -> Path:
    """Execute all (arm x seed) runs and write the artifact directory."""
    cfg = resolve_config(cfg)
    problems = validate_config(cfg)
    if problems:
        raise ValidationError(problems)
    out_dir = Path(out if out is not None else cfg.get("out", "runs/experiment"))
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} exists; pass force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2))
    (out_dir / "manifest.json").write_text(json.dumps({
        "config_hash": config_hash(cfg),
        "kind": cfg["kind"],
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }, sort_keys=True, indent=2))

    if cfg["kind"] == "head_comparison":
        _head_comparison(cfg, out_dir)
        return out_dir

    arms = _arms_for(cfg)
    # Phase 1: value models, one per distinct (model source, fraction).
    model_paths = {}
    for arm in arms:
        source = arm.get("model")
        if source is None:
            continue
        key = (source, arm.get("fraction", 1.0))
        if key not in model_paths:
            tag = f"{source}_f{arm.get('fraction', 1.0):g}"
            model_paths[key] = train_value_model(
                cfg, out_dir, tag, fraction=arm.get("fraction", 1.0),
                use_pretrain=source == "pretrained")
        arm["model_path"] = str(model_paths[key])

    jobs = [
        {"cfg": cfg, "arm": arm, "seed": seed,
         "run_dir": str(out_dir / "runs" / arm["name"] / f"seed_{seed}")}
        for arm in arms
        for seed in cfg["seeds"]
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_single_job, jobs))
    else:
        results = [run_single_job(job) for job in jobs]
    failures = [r for r in results if not r["ok"]]
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2))

    rows = read_run_metrics(out_dir)
    agg, summary = _aggregate_rows(rows)
    _write_dict_csv(agg, AGG_FIELDS, out_dir / "aggregate.csv")
    _write_dict_csv(summary, SUMMARY_FIELDS, out_dir / "summary.csv")
    if cfg["kind"] == "pretrain_ablation":
        _transfer_comparison(cfg, summary, out_dir)
    return out_dir


def pretrain_transfer_pipeline(cfg: dict, out=None, force: bool = False,
                               workers: int = 1) -> Path:
    """Three-phase pipeline: pooled off-layout pretraining, per-fraction
    finetuning, guided online RL with and without the pretraining phase."""
    cfg = dict(cfg)
    cfg["kind"] = "pretrain_ablation"
    return run_experiment(cfg, out=out, force=force, workers=workers)
