"""Planar gate-racing environment for the quadrotor.

The drone must fly through an ordered sequence of gates. Each gate is a
segment of given width centered on ``center`` and perpendicular to its unit
``normal``; passing means crossing the gate plane in the normal direction
within half a width of the center (boundary inclusive). Crossing the plane
farther out is a miss and ends the episode. Reward is shaped progress toward
the next gate center plus a bonus per gate, minus penalties for crashes and
elapsed time.

All quantities carry SI units (meters, seconds, radians).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import yaml

from . import dynamics
from .dynamics import DynModel
from .errors import ConfigError

OBS_DIM = 11
POS_SCALE = 0.2
VEL_SCALE = 0.2
OMEGA_SCALE = 0.2

TRAJECTORY_CSV_HEADER = [
    "t", "x", "y", "theta", "vx", "vy", "omega", "u1", "u2", "gate_idx", "reward",
]

REASON_LAP = "lap_complete"
REASON_MISS = "gate_missed"
REASON_OOB = "out_of_bounds"
REASON_TIMEOUT = "timeout"


@dataclass(frozen=True)
class Gate:
    center: np.ndarray  # (2,)
    normal: np.ndarray  # (2,), unit
    width: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64))
        if self.width <= 0.0:
            raise ConfigError(f"gate width must be positive, got {self.width}")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ConfigError("gate normal must be unit length (tolerance 1e-9)")


@dataclass(frozen=True)
class TrackSpec:
    gates: tuple
    laps: int
    spawn: np.ndarray  # full model state
    margin: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "spawn", np.asarray(self.spawn, dtype=np.float64))
        if len(self.gates) < 2:
            raise ConfigError("a track needs at least 2 gates")
        if self.laps < 1:
            raise ConfigError("laps must be >= 1")
        pts = np.array([g.center for g in self.gates] + [self.spawn[:2]])
        object.__setattr__(self, "_lo", pts.min(axis=0) - self.margin)
        object.__setattr__(self, "_hi", pts.max(axis=0) + self.margin)

    def in_bounds(self, p) -> bool:
        return bool(np.all(p >= self._lo) and np.all(p <= self._hi))


def load_track(path) -> TrackSpec:
    """Read a track file (YAML: spawn, laps, gate array with explicit units)."""
    with open(path) as f:
        raw = yaml.safe_load(f)
    try:
        gates = [
            Gate(np.array(g["center"]), np.array(g["normal"]), float(g["width"]))
            for g in raw["gates"]
        ]
        return TrackSpec(gates=gates, laps=int(raw.get("laps", 1)),
                         spawn=np.array(raw["spawn"], dtype=np.float64))
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed track file {path}: {e}") from e


@dataclass(frozen=True)
class RewardConfig:
    k_p: float = 1.0
    gate_bonus: float = 10.0
    crash_penalty: float = 10.0
    time_penalty: float = 0.1
    progress_cap: float = 5.0
    timeout: float = 20.0
    # crossing the gate plane within miss_factor * half-width counts as a
    # missed attempt (terminal); crossings farther out are not gate events
    miss_factor: float = 2.0


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray  # drone state
    next_gate_index: int = 0
    lap_count: int = 0
    episode_time: float = 0.0
    done: bool = False
    reason: str = ""


def _gate_after(track: TrackSpec, idx: int) -> Gate:
    return track.gates[(idx + 1) % len(track.gates)]


def observation(state: EnvState, track: TrackSpec) -> np.ndarray:
    """Fixed-scaling observation: deltas to the next two gates, velocity, attitude."""
    x = state.x
    g1 = track.gates[state.next_gate_index]
    g2 = _gate_after(track, state.next_gate_index)
    p = x[0:2]
    return np.array(
        [
            (g1.center[0] - p[0]) * POS_SCALE,
            (g1.center[1] - p[1]) * POS_SCALE,
            g1.normal[0],
            g1.normal[1],
            (g2.center[0] - p[0]) * POS_SCALE,
            (g2.center[1] - p[1]) * POS_SCALE,
            x[3] * VEL_SCALE,
            x[4] * VEL_SCALE,
            np.sin(x[2]),
            np.cos(x[2]),
            x[5] * OMEGA_SCALE,
        ]
    )


def mpc_state(state: EnvState, track: TrackSpec) -> np.ndarray:
    """Drone state translated so the next gate center is the origin."""
    x = state.x.copy()
    g = track.gates[state.next_gate_index]
    x[0] -= g.center[0]
    x[1] -= g.center[1]
    return x


def reset(track: TrackSpec, rng: np.random.Generator, perturb_sigma: float = 0.0):
    """Spawn the drone with an optional Gaussian position perturbation."""
    x = track.spawn.copy()
    if perturb_sigma > 0.0:
        x[0:2] = x[0:2] + rng.normal(0.0, perturb_sigma, size=2)
    state = EnvState(x=x)
    return state, observation(state, track)


def _crossing(gate: Gate, p_prev, p_new):
    """(crossed, lateral offset at the crossing point) for one step segment."""
    s_prev = float(np.dot(gate.normal, p_prev - gate.center))
    s_new = float(np.dot(gate.normal, p_new - gate.center))
    if not (s_prev <= 0.0 and s_new > 0.0):
        return False, 0.0
    frac = s_prev / (s_prev - s_new) if s_new != s_prev else 0.0
    p_cross = p_prev + frac * (p_new - p_prev)
    tangent = np.array([-gate.normal[1], gate.normal[0]])
    lateral = abs(float(np.dot(tangent, p_cross - gate.center)))
    return True, lateral


def env_step(state: EnvState, u: np.ndarray, track: TrackSpec, model: DynModel,
             cfg: RewardConfig = RewardConfig()):
    """Advance one control period; returns (state, observation, reward, done)."""
    if state.done:
        raise ConfigError("env_step called on a finished episode")
    gate = track.gates[state.next_gate_index]
    u = np.asarray(u, dtype=np.float64)
    x_new = dynamics.step(model, state.x, u)
    t_new = state.episode_time + model.dt

    p_prev = state.x[0:2]
    reward = -cfg.time_penalty * model.dt
    next_gate = state.next_gate_index
    laps = state.lap_count
    done = False
    reason = ""

    if not np.isfinite(x_new).all():
        x_new = np.where(np.isfinite(x_new), x_new, 0.0)
        done, reason = True, REASON_OOB
        reward -= cfg.crash_penalty
    else:
        p_new = x_new[0:2]
        d_prev = float(np.linalg.norm(p_prev - gate.center))
        d_new = float(np.linalg.norm(p_new - gate.center))
        progress = cfg.k_p * (d_prev - d_new)
        reward += float(np.clip(progress, -cfg.progress_cap, cfg.progress_cap))
        crossed, lateral = _crossing(gate, p_prev, p_new)
        half_width = gate.width / 2.0
        if crossed and lateral <= half_width:
            reward += cfg.gate_bonus
            next_gate += 1
            if next_gate == len(track.gates):
                laps += 1
                next_gate = 0
                if laps >= track.laps:
                    done, reason = True, REASON_LAP
        elif crossed and lateral <= cfg.miss_factor * half_width:
            done, reason = True, REASON_MISS
            reward -= cfg.crash_penalty
        elif not track.in_bounds(p_new):
            done, reason = True, REASON_OOB
            reward -= cfg.crash_penalty
        if not done and t_new >= cfg.timeout:
            done, reason = True, REASON_TIMEOUT

    new_state = EnvState(
        x=x_new,
        next_gate_index=next_gate,
        lap_count=laps,
        episode_time=t_new,
        done=done,
        reason=reason,
    )
    return new_state, observation(new_state, track), reward, done


def lap_time(states) -> float | None:
    """Episode time at final-gate passage, or None if the lap was not completed."""
    final = states[-1]
    if final.reason != REASON_LAP:
        return None
    return float(final.episode_time)


class RaceEnv:
    """Stateful wrapper used by the trainer and the evaluation loop."""

    def __init__(self, track: TrackSpec, model: DynModel,
                 cfg: RewardConfig = RewardConfig(), seed: int = 0,
                 reset_noise: float = 0.1):
        self.track = track
        self.model = model
        self.cfg = cfg
        self.reset_noise = reset_noise
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.obs_dim = OBS_DIM

    def reset(self):
        self.state, obs = reset(self.track, self.rng, self.reset_noise)
        return obs

    def step(self, u):
        self.state, obs, reward, done = env_step(self.state, u, self.track,
                                                 self.model, self.cfg)
        return obs, reward, done, {"state": self.state}

    def mpc_state(self):
        return mpc_state(self.state, self.track)


def write_trajectory_csv(path, rows):
    """Dump an episode as CSV rows matching TRAJECTORY_CSV_HEADER."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_CSV_HEADER)
        writer.writerows(rows)


def trajectory_row(t, x, u, gate_idx, reward):
    return [t, x[0], x[1], x[2], x[3], x[4], x[5], u[0], u[1], gate_idx, reward]
