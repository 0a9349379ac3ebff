"""Command-line entry point: ``fusedmpc solve | bench | train | eval``.

All commands share one YAML configuration with per-section defaults; any
leaf can be overridden on the command line with dotted flags, e.g.
``--solver.T 5 --train.total_steps 20000``. The effective configuration is
echoed to the output directory. Exit codes: 0 success, 1 runtime failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import statistics
import sys

import numpy as np
import torch
import yaml

from . import batchexec, policy as policy_mod, raceenv
from . import config as cfgmod
from .batchexec import WorkerPool
from .errors import ConfigError
from .policy import MpcSolver, PolicyBundle, load_checkpoint, save_checkpoint
from .raceenv import RaceEnv
from .trainer import Trainer

LAPS_CSV_HEADER = ["mode", "T", "K", "episode", "completed", "lap_time_s"]


def _parse_overrides(leftover):
    overrides = []
    i = 0
    while i < len(leftover):
        token = leftover[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument: {token}")
        if "=" in token:
            key, value = token[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(leftover):
                raise ConfigError(f"override {token} is missing a value")
            key, value = token[2:], leftover[i + 1]
            i += 2
        overrides.append((key, value))
    return overrides


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def cmd_solve(cfg) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    cfgmod.echo_config(cfg, out)
    scenario = cfg["solve"]["scenario"]
    if scenario != "hover":
        raise ConfigError(f"unknown solve scenario: {scenario!r}")
    mode = cfg["solve"]["mode"]
    s = cfg["solver"]
    prob = batchexec.make_hover_problem(
        int(cfg["solve"]["B"]), int(s["T"]),
        settings_kw={
            "K_max": int(s["K_max"]), "alphas": tuple(s["alphas"]),
            "conv_tol": float(s["conv_tol"]),
            "boxqp_max_iter": int(s["boxqp_max_iter"]),
            "boxqp_tol": float(s["boxqp_tol"]),
        },
        seed=int(cfg["seed"]),
    )
    pool = WorkerPool(int(cfg["workers"]))
    results, stats = batchexec.solve_batch(prob, mode, pool)
    r = results[0]
    dt = prob.model.dt
    rows = []
    T = prob.settings.T
    for t in range(T + 1):
        u = r.traj.U[min(t, T - 1)]
        rows.append(raceenv.trajectory_row(t * dt, r.traj.X[t], u, -1, 0.0))
    raceenv.write_trajectory_csv(os.path.join(out, "trajectory.csv"), rows)
    summary = {
        "cost": float(r.cost),
        "iterations": int(r.iterations),
        "converged": bool(r.converged),
        "failed": bool(r.failed),
        "alpha_history": [float(a) for a in r.alpha_history],
        "clamped_controls": int(r.clamped_mask.sum()),
    }
    with open(os.path.join(out, "summary.yaml"), "w") as f:
        yaml.safe_dump(summary, f, sort_keys=True)
    stats_doc = {
        "mode": mode,
        "total_dispatches": int(stats.total_dispatches),
        "dispatches_per_iteration": int(stats.dispatches_per_iteration),
        "forward_ms": float(1e3 * stats.wall_time_forward),
    }
    with open(os.path.join(out, "stats.yaml"), "w") as f:
        yaml.safe_dump(stats_doc, f, sort_keys=True)
    print(f"solve: cost={r.cost:.6f} iterations={r.iterations} converged={r.converged}")
    return 1 if r.failed else 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(cfg) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    cfgmod.echo_config(cfg, out)
    b = cfg["bench"]
    pool = WorkerPool(int(cfg["workers"]))
    rows = batchexec.latency_probe(
        list(b["B"]), list(b["T"]), reps=int(b["reps"]), K=int(b["K"]),
        pool=pool, seed=int(cfg["seed"]),
    )
    path = os.path.join(out, "bench.csv")
    batchexec.write_latency_csv(rows, path)
    header = f"{'mode':>6} {'B':>5} {'T':>4} {'K':>4} {'forward_ms':>12} {'backward_ms':>12} {'dispatches':>11}"
    print(header)
    for row in rows:
        print(
            f"{row['mode']:>6} {row['B']:>5} {row['T']:>4} {row['K']:>4} "
            f"{row['forward_ms']:>12.3f} {row['backward_ms']:>12.3f} {row['dispatches']:>11}"
        )
    print(f"bench grid written to {path}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _make_envs(cfg, model, num_envs, seed):
    track = cfgmod.build_track(cfg)
    reward = cfgmod.build_reward(cfg)
    noise = float(cfg["env"]["reset_noise"])
    return [
        RaceEnv(track, model, reward, seed=seed * 9973 + rank, reset_noise=noise)
        for rank in range(num_envs)
    ]


def _train_one(cfg, T, K, out_dir, resume=None) -> int:
    seed = int(cfg["seed"])
    torch.manual_seed(seed)
    mode = cfg["train"]["mode"]
    model = cfgmod.build_model(cfg)
    settings = cfgmod.build_settings(cfg, T=T, K=K)
    train_cfg = cfgmod.build_train_config(cfg)
    pool = WorkerPool(int(cfg["workers"]))
    scaling = cfgmod.build_scaling(cfg, model)
    hidden = tuple(cfg["policy"]["hidden"])
    start_step = 0
    if resume is not None:
        bundle, start_step, meta, opt_arrays = load_checkpoint(resume, model, settings)
        if bundle.mode != mode:
            raise ConfigError(
                f"checkpoint mode {bundle.mode} does not match configured mode {mode}"
            )
    else:
        bundle = PolicyBundle(
            mode, raceenv.OBS_DIM, model, settings, scaling, hidden=hidden,
            sigma_init_scale=float(cfg["policy"]["sigma_init_scale"]),
        )
        opt_arrays = {}
    envs = _make_envs(cfg, model, train_cfg.num_envs, seed)
    solver = MpcSolver(model, settings, pool) if mode == "ac_mpc" else None
    drop = ("solver",) if mode == "ac_mlp" else ()
    cfgmod.echo_config(cfg, out_dir, drop=drop)
    tr = Trainer(train_cfg, bundle, envs, solver, out_dir, seed=seed,
                 config_echo={k: v for k, v in cfg.items() if k not in drop},
                 start_step=start_step)
    if opt_arrays:
        policy_mod.restore_optimizer(tr.optimizer, opt_arrays)
    ckpt, metrics = tr.train()
    rewards = [m["mean_reward"] for m in metrics if not math.isnan(m["mean_reward"])]
    last = rewards[-1] if rewards else float("nan")
    print(f"train[{mode} T={T} K={K}]: {tr.step} steps, {tr.update_idx} updates, "
          f"last mean reward {last:.2f}, checkpoint {ckpt}")
    return 0


def cmd_train(cfg, resume=None) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    t = cfg["train"]
    grid_T, grid_K = t["grid_T"], t["grid_K"]
    if t["mode"] == "ac_mpc" and grid_T and grid_K:
        if resume is not None:
            raise ConfigError("resume is only supported for single-cell training")
        for T in grid_T:
            for K in grid_K:
                cell_dir = os.path.join(out, f"T{T}_K{K}")
                os.makedirs(cell_dir, exist_ok=True)
                _train_one(cfg, int(T), int(K), cell_dir)
        return 0
    return _train_one(cfg, None, None, out, resume=resume)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _peek_checkpoint_meta(path):
    import json

    with np.load(path) as data:
        return json.loads(bytes(data["__meta__"]).decode())


def cmd_eval(cfg, checkpoint=None) -> int:
    path = checkpoint or cfg["eval"]["checkpoint"]
    if not path:
        raise ConfigError("eval requires --checkpoint or eval.checkpoint")
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    cfgmod.echo_config(cfg, out)
    meta = _peek_checkpoint_meta(path)
    model = cfgmod.build_model(cfg)
    settings = cfgmod.build_settings(cfg, T=meta["T"], K=cfg["solver"]["K_max"])
    bundle, _, meta, _ = load_checkpoint(path, model, settings)
    track = cfgmod.build_track(cfg)
    reward = cfgmod.build_reward(cfg)
    pool = WorkerPool(int(cfg["workers"]))
    solver = MpcSolver(model, settings, pool)
    rng = np.random.default_rng(int(cfg["seed"]))
    episodes = int(cfg["eval"]["episodes"])
    seed = int(cfg["seed"])
    lap_rows = []
    K_used = settings.K_max if bundle.mode == "ac_mpc" else "-"
    T_used = settings.T if bundle.mode == "ac_mpc" else "-"
    for ep in range(episodes):
        env = RaceEnv(track, model, reward, seed=seed * 7919 + ep,
                      reset_noise=float(cfg["env"]["reset_noise"]))
        obs = env.reset()
        solver.reset_warm()
        states = [env.state]
        rows = []
        done = False
        while not done:
            action = policy_mod.act(
                bundle, obs, env.mpc_state(), solver, explore=False, rng=rng
            )
            prev_gate = env.state.next_gate_index
            t_now = env.state.episode_time
            x_now = env.state.x
            obs, r, done, info = env.step(action.u_sampled)
            rows.append(raceenv.trajectory_row(t_now, x_now, action.u_sampled,
                                               prev_gate, r))
            states.append(env.state)
        raceenv.write_trajectory_csv(os.path.join(out, f"episode_{ep}.csv"), rows)
        lt = raceenv.lap_time(states)
        lap_rows.append({
            "mode": bundle.mode, "T": T_used, "K": K_used, "episode": ep,
            "completed": int(lt is not None),
            "lap_time_s": "" if lt is None else f"{lt:.6f}",
        })
    laps_path = os.path.join(out, "laps.csv")
    with open(laps_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LAPS_CSV_HEADER)
        writer.writeheader()
        writer.writerows(lap_rows)
    times = [float(r["lap_time_s"]) for r in lap_rows if r["lap_time_s"]]
    completion = sum(r["completed"] for r in lap_rows) / len(lap_rows)
    table = [
        f"{'mode':>8} {'T':>4} {'K':>4} {'episodes':>9} {'completion':>11} "
        f"{'median_lap_s':>13} {'best_lap_s':>11}",
        f"{bundle.mode:>8} {T_used!s:>4} {K_used!s:>4} {episodes:>9} {completion:>11.3f} "
        f"{(f'{statistics.median(times):.3f}' if times else 'none'):>13} "
        f"{(f'{min(times):.3f}' if times else 'none'):>11}",
    ]
    text = "\n".join(table) + "\n"
    with open(os.path.join(out, "laptime_table.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fusedmpc",
        description="Batched box-constrained iLQR MPC with staged dispatch, "
                    "actor-critic training and a racing benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "bench", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if name in ("solve", "train"):
            p.add_argument("--mode", default=None)
        if name == "bench":
            p.add_argument("--reps", type=int, default=None)
        if name == "train":
            p.add_argument("--resume", default=None)
        if name == "eval":
            p.add_argument("--checkpoint", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, leftover = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(leftover)
        cfg = cfgmod.load_config(args.config, overrides)
        if args.out is not None:
            cfg["out"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
        if args.command == "solve":
            if args.mode is not None:
                cfg["solve"]["mode"] = args.mode
            return cmd_solve(cfg)
        if args.command == "bench":
            if args.reps is not None:
                cfg["bench"]["reps"] = args.reps
            return cmd_bench(cfg)
        if args.command == "train":
            if args.mode is not None:
                cfg["train"]["mode"] = args.mode
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, checkpoint=args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
