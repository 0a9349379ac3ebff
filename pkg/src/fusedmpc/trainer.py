"""PPO training with the solver in the actor's gradient path.

Rollouts are collected from parallel environments; in ``ac_mpc`` mode every
policy evaluation is a batched solve whose first control parameterizes the
Gaussian action distribution, and the policy-gradient path runs loss ->
log_prob -> control -> implicit solver backward -> cost parameters -> actor
network. Solves run in float64 outside autograd; networks train in float32.

A rollout stores, per step, the exact solver inputs (initial state and warm
start). Re-solving a minibatch sample therefore reproduces the rollout
control bit-for-bit while the parameters are unchanged, which keeps the
importance ratio at exactly 1 at the trust-region center.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass

import numpy as np
import psutil
import torch

from .errors import ConfigError
from .policy import MpcSolver, PolicyBundle, mpc_control

METRICS_CSV_HEADER = [
    "update", "step", "mean_reward", "lap_rate", "mean_solver_iters",
    "approx_grad_frac", "steps_per_sec",
]


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    steps_per_update: int = 256
    minibatch_size: int = 2048
    sgd_epochs: int = 10
    clip_range: float = 0.2
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    grad_clip: float = 0.5
    total_steps: int = 200_000
    num_envs: int = 16
    mode: str = "ac_mpc"
    normalize_advantages: bool = True
    checkpoint_every: int = 20  # updates

    def __post_init__(self):
        if self.mode not in ("ac_mpc", "ac_mlp"):
            raise ConfigError(f"train mode must be ac_mpc or ac_mlp, got {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("gamma and lam must lie in [0, 1]")
        if self.steps_per_update < 1 or self.num_envs < 1:
            raise ConfigError("steps_per_update and num_envs must be >= 1")


def gae(rewards, values, dones, gamma, lam, last_values):
    """Generalized advantage estimation over (steps, envs) buffers.

    dones[s] marks episodes that terminated at step s, cutting the bootstrap
    across the boundary. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    last_values = np.asarray(last_values, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ConfigError("rewards, values and dones must share a (steps, envs) shape")
    if last_values.shape != rewards.shape[1:]:
        raise ConfigError("last_values must have one bootstrap entry per env")
    S = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(last_values)
    next_val = last_values
    for s in range(S - 1, -1, -1):
        nonterminal = 1.0 - dones[s]
        delta = rewards[s] + gamma * next_val * nonterminal - values[s]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[s] = next_adv
        next_val = values[s]
    return adv, adv + values


@dataclass
class RolloutBuffer:
    """(steps, envs) arrays collected between updates."""

    obs: np.ndarray
    actions: np.ndarray  # pre-clamp Gaussian samples, float32
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    x_init: np.ndarray  # solver initial states (ac_mpc)
    U_warm: np.ndarray  # solver warm starts (ac_mpc)
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @staticmethod
    def allocate(S, N, obs_dim, n_x, n_u, T):
        return RolloutBuffer(
            obs=np.zeros((S, N, obs_dim), dtype=np.float32),
            actions=np.zeros((S, N, n_u), dtype=np.float32),
            log_probs=np.zeros((S, N), dtype=np.float32),
            rewards=np.zeros((S, N)),
            values=np.zeros((S, N)),
            dones=np.zeros((S, N)),
            x_init=np.zeros((S, N, n_x)),
            U_warm=np.zeros((S, N, T, n_u)),
        )

    @property
    def size(self):
        return self.obs.shape[0] * self.obs.shape[1]


def ppo_losses(bundle: PolicyBundle, batch, config: TrainConfig, solver=None,
               stats_sink=None):
    """Clipped-surrogate PPO losses for one minibatch.

    batch holds torch tensors (obs, actions, old_log_probs, advantages,
    returns) plus, in ac_mpc mode, numpy arrays (x_init, U_warm).
    Returns (total_loss, metrics dict).
    """
    obs = batch["obs"]
    if bundle.mode == "ac_mpc":
        u_mean = mpc_control(bundle, obs, solver, batch["x_init"], batch["U_warm"],
                             stats_sink)
    else:
        u_mean = bundle.actor(obs)
    sigma = torch.exp(bundle.log_sigma)
    dist = torch.distributions.Normal(u_mean, sigma)
    log_probs = dist.log_prob(batch["actions"]).sum(-1)
    ratio = torch.exp(log_probs - batch["old_log_probs"])
    adv = batch["advantages"]
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range) * adv
    surrogate = torch.min(unclipped, clipped).mean()
    actor_loss = -surrogate
    values = bundle.critic(obs)
    value_loss = ((values - batch["returns"]) ** 2).mean()
    entropy = dist.entropy().sum(-1).mean()
    loss = actor_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    metrics = {
        "surrogate": float(surrogate.detach()),
        "actor_loss": float(actor_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy.detach()),
        "mean_ratio": float(ratio.detach().mean()),
    }
    return loss, metrics


def ppo_update(buffer: RolloutBuffer, bundle: PolicyBundle,
               optimizer: torch.optim.Optimizer, config: TrainConfig,
               solver: MpcSolver | None = None,
               generator: torch.Generator | None = None):
    """Epochs of shuffled-minibatch updates over a filled buffer.

    Advantages must already be populated. Non-finite minibatch losses abort
    that minibatch (flagged in the metrics) without stopping the update.
    """
    if buffer.advantages is None:
        raise ConfigError("buffer advantages must be computed before ppo_update")
    S, N = buffer.rewards.shape
    n = S * N
    adv = buffer.advantages.reshape(n).astype(np.float32)
    if config.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    flat = {
        "obs": torch.from_numpy(buffer.obs.reshape(n, -1)),
        "actions": torch.from_numpy(buffer.actions.reshape(n, -1)),
        "old_log_probs": torch.from_numpy(buffer.log_probs.reshape(n)),
        "advantages": torch.from_numpy(adv),
        "returns": torch.from_numpy(buffer.returns.reshape(n).astype(np.float32)),
    }
    x_init = buffer.x_init.reshape(n, -1)
    U_warm = buffer.U_warm.reshape(n, *buffer.U_warm.shape[2:])
    mb = min(config.minibatch_size, n)
    stats_sink = {}
    skipped = 0
    last_metrics = {}
    for _ in range(config.sgd_epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, mb):
            sel = perm[start:start + mb]
            batch = {k: v[sel] for k, v in flat.items()}
            if bundle.mode == "ac_mpc":
                sel_np = sel.numpy()
                batch["x_init"] = x_init[sel_np]
                batch["U_warm"] = U_warm[sel_np]
            loss, metrics = ppo_losses(bundle, batch, config, solver, stats_sink)
            if not torch.isfinite(loss):
                skipped += 1
                continue
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for p in bundle.parameters() if p.grad is not None], config.grad_clip
            )
            optimizer.step()
            last_metrics = metrics
    solves = stats_sink.get("solves", 0)
    last_metrics["skipped_minibatches"] = skipped
    last_metrics["approx_grad_frac"] = (
        stats_sink.get("non_converged", 0) / solves if solves else 0.0
    )
    return last_metrics


class Trainer:
    """Alternates rollout collection and PPO updates; logs a CSV per update."""

    def __init__(self, config: TrainConfig, bundle: PolicyBundle, envs,
                 solver: MpcSolver | None, out_dir, seed: int = 0,
                 config_echo: dict | None = None, start_step: int = 0):
        if config.mode == "ac_mpc" and solver is None:
            raise ConfigError("ac_mpc training requires a solver handle")
        self.config = config
        self.bundle = bundle
        self.envs = envs
        self.solver = solver
        self.out_dir = out_dir
        self.config_echo = config_echo or {}
        os.makedirs(out_dir, exist_ok=True)
        self.optimizer = torch.optim.Adam(bundle.parameters(), lr=config.lr_start)
        self.gen = torch.Generator().manual_seed(seed)
        self.step = start_step
        self.update_idx = 0
        self.metrics_path = os.path.join(out_dir, "metrics.csv")
        self._metrics_file = open(self.metrics_path, "w", newline="")
        self._metrics_writer = csv.DictWriter(self._metrics_file,
                                              fieldnames=METRICS_CSV_HEADER)
        self._metrics_writer.writeheader()
        self._metrics_file.flush()
        self.metrics_log = []
        N = len(envs)
        self.obs = np.stack([env.reset() for env in envs]).astype(np.float32)
        T, n_u = bundle.T, bundle.n_u
        if solver is not None:
            self.warm = np.tile(solver.default_u, (N, T, 1))
        else:
            self.warm = np.zeros((N, T, n_u))
        self.ep_return = np.zeros(N)
        self.rollout_sink = {}

    # -- rollout ------------------------------------------------------------

    def _policy_means(self, obs_t):
        """Float32 control means for a batch of observations (no grad)."""
        with torch.no_grad():
            if self.config.mode == "ac_mpc":
                diag, cvec = self.bundle.actor(obs_t)
                x_init = np.stack([env.mpc_state() for env in self.envs])
                U_warm = self.warm.copy()
                ws, iterations, converged, _, _ = self.solver.solve_diag(
                    x_init, diag.double().numpy(), cvec.double().numpy(), U_warm
                )
                self.rollout_sink["solves"] = self.rollout_sink.get("solves", 0) + ws.B
                self.rollout_sink["iterations"] = (
                    self.rollout_sink.get("iterations", 0) + int(iterations.sum())
                )
                self.warm = np.concatenate([ws.U[:, 1:], ws.U[:, -1:]], axis=1)
                u_mean = torch.from_numpy(ws.U[:, 0].copy()).float()
                return u_mean, x_init, U_warm
            u_mean = self.bundle.actor(obs_t)
            return u_mean, None, None

    def collect(self) -> tuple:
        config = self.config
        S, N = config.steps_per_update, len(self.envs)
        buf = RolloutBuffer.allocate(S, N, self.bundle.obs_dim, self.bundle.n_x,
                                     self.bundle.n_u, self.bundle.T)
        episodes = []
        sigma_t = torch.exp(self.bundle.log_sigma.detach())
        for s in range(S):
            obs_t = torch.from_numpy(self.obs)
            u_mean, x_init, U_warm = self._policy_means(obs_t)
            with torch.no_grad():
                values = self.bundle.critic(obs_t).double().numpy()
                eps = torch.randn(u_mean.shape, generator=self.gen)
                actions = u_mean + sigma_t * eps
                dist = torch.distributions.Normal(u_mean, sigma_t)
                log_probs = dist.log_prob(actions).sum(-1)
            u_exec = np.clip(actions.double().numpy(), self.bundle.u_min,
                             self.bundle.u_max)
            buf.obs[s] = self.obs
            buf.actions[s] = actions.numpy()
            buf.log_probs[s] = log_probs.numpy()
            buf.values[s] = values
            if x_init is not None:
                buf.x_init[s] = x_init
                buf.U_warm[s] = U_warm
            for i, env in enumerate(self.envs):
                obs, reward, done, info = env.step(u_exec[i])
                buf.rewards[s, i] = reward
                buf.dones[s, i] = float(done)
                self.ep_return[i] += reward
                if done:
                    episodes.append(
                        (self.ep_return[i], info["state"].reason == "lap_complete")
                    )
                    self.ep_return[i] = 0.0
                    obs = env.reset()
                    if self.solver is not None:
                        self.warm[i] = self.solver.default_u
                self.obs[i] = obs.astype(np.float32)
            self.step += N
        with torch.no_grad():
            last_values = self.bundle.critic(torch.from_numpy(self.obs)).double().numpy()
        buf.advantages, buf.returns = gae(buf.rewards, buf.values, buf.dones,
                                          config.gamma, config.lam, last_values)
        return buf, episodes

    # -- updates ------------------------------------------------------------

    def _set_lr(self):
        frac = min(1.0, self.step / max(1, self.config.total_steps))
        lr = self.config.lr_start + frac * (self.config.lr_end - self.config.lr_start)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def run_update(self):
        t0 = time.perf_counter()
        self.rollout_sink = {}
        buf, episodes = self.collect()
        self._set_lr()
        metrics = ppo_update(buf, self.bundle, self.optimizer, self.config,
                             self.solver, self.gen)
        wall = time.perf_counter() - t0
        self.update_idx += 1
        solves = self.rollout_sink.get("solves", 0)
        row = {
            "update": self.update_idx,
            "step": self.step,
            "mean_reward": (
                float(np.mean([e[0] for e in episodes])) if episodes else math.nan
            ),
            "lap_rate": (
                float(np.mean([e[1] for e in episodes])) if episodes else math.nan
            ),
            "mean_solver_iters": (
                self.rollout_sink.get("iterations", 0) / solves if solves else 0.0
            ),
            "approx_grad_frac": metrics.get("approx_grad_frac", 0.0),
            "steps_per_sec": buf.size / wall,
        }
        self._metrics_writer.writerow(row)
        self._metrics_file.flush()
        row_full = dict(row)
        row_full["rss_bytes"] = psutil.Process().memory_info().rss
        row_full.update({k: v for k, v in metrics.items() if k != "approx_grad_frac"})
        self.metrics_log.append(row_full)
        return row_full

    def save(self, name="checkpoint.npz"):
        from .policy import save_checkpoint

        path = os.path.join(self.out_dir, name)
        save_checkpoint(path, self.bundle, self.step, self.config_echo,
                        self.optimizer)
        return path

    def train(self):
        """Run updates until total_steps environment steps have been collected."""
        checkpoint_path = self.save()
        while self.step < self.config.total_steps:
            self.run_update()
            if self.update_idx % self.config.checkpoint_every == 0:
                checkpoint_path = self.save()
        checkpoint_path = self.save()
        self._metrics_file.close()
        return checkpoint_path, self.metrics_log
