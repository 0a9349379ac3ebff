"""Actor and critic networks around the differentiable solver.

The actor is a neural cost map: it takes an observation and emits diagonal
quadratic stage-cost coefficients for every timestep of the horizon, squashed
through a sigmoid into configured bounds so the resulting cost is always
positive semidefinite without runtime regularization. The control applied to
the system is the first control of the batched solve; exploration samples a
Gaussian around it. A direct-action head (``ac_mlp``) is available as the
solver-free baseline.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import batchexec, kernels
from .dynamics import DynModel
from .errors import ConfigError, NumericError
from .gradlayer import GradWorkspace
from .ilqr import SolveSettings
from .qcost import EPS_REG, StageCostParams

CHECKPOINT_VERSION = 1

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths and output head of a policy network."""

    hidden: tuple = (512, 512)
    head: str = "cost"  # "cost" (sigmoid-scaled) or "value" (linear scalar)


@dataclass(frozen=True)
class CostHeadScaling:
    """Bounds mapping sigmoid outputs to cost coefficients, shared across t."""

    diag_lo: np.ndarray  # (n_z,)
    diag_hi: np.ndarray
    c_lo: np.ndarray
    c_hi: np.ndarray

    def __post_init__(self):
        for name in ("diag_lo", "diag_hi", "c_lo", "c_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.diag_lo < EPS_REG):
            raise ConfigError(f"diagonal lower bounds must be >= {EPS_REG}")
        if np.any(self.diag_hi <= self.diag_lo) or np.any(self.c_hi <= self.c_lo):
            raise ConfigError("upper scaling bounds must exceed lower bounds")

    @staticmethod
    def default(n_z, diag_lo=1e-3, diag_hi=10.0, c_lo=-10.0, c_hi=10.0) -> "CostHeadScaling":
        return CostHeadScaling(
            np.full(n_z, diag_lo), np.full(n_z, diag_hi),
            np.full(n_z, c_lo), np.full(n_z, c_hi),
        )

    @staticmethod
    def for_model(model: DynModel, n_x: int, diag_lo=1e-3, diag_hi=10.0,
                  c_lo=-10.0, c_hi=10.0) -> "CostHeadScaling":
        """Default bounds with the control-dim linear range shifted so its
        midpoint encodes the model's rest control (a zero-initialized actor
        then regulates toward hover instead of toward zero thrust)."""
        n_z = n_x + model.n_u
        s = CostHeadScaling.default(n_z, diag_lo, diag_hi, c_lo, c_hi)
        offset = -0.5 * (diag_lo + diag_hi) * model.hover_control()
        c_lo_arr = s.c_lo.copy()
        c_hi_arr = s.c_hi.copy()
        c_lo_arr[n_x:] += offset
        c_hi_arr[n_x:] += offset
        return CostHeadScaling(s.diag_lo, s.diag_hi, c_lo_arr, c_hi_arr)


def build_mlp(in_dim, hidden, out_dim):
    layers = []
    last = in_dim
    for width in hidden:
        layers += [nn.Linear(last, width), nn.ReLU()]
        last = width
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


class CostActor(nn.Module):
    """Observation -> per-timestep (diag C_t, c_t) within scaling bounds."""

    def __init__(self, obs_dim, T, n_z, scaling: CostHeadScaling, hidden=(512, 512)):
        super().__init__()
        self.T = T
        self.n_z = n_z
        self.net = build_mlp(obs_dim, hidden, T * 2 * n_z)
        self.register_buffer("diag_lo", torch.tensor(scaling.diag_lo, dtype=torch.float32))
        self.register_buffer("diag_hi", torch.tensor(scaling.diag_hi, dtype=torch.float32))
        self.register_buffer("c_lo", torch.tensor(scaling.c_lo, dtype=torch.float32))
        self.register_buffer("c_hi", torch.tensor(scaling.c_hi, dtype=torch.float32))

    def forward(self, obs):
        raw = torch.sigmoid(self.net(obs)).view(-1, self.T, 2, self.n_z)
        diag = self.diag_lo + raw[:, :, 0, :] * (self.diag_hi - self.diag_lo)
        cvec = self.c_lo + raw[:, :, 1, :] * (self.c_hi - self.c_lo)
        return diag, cvec


class DirectActor(nn.Module):
    """Observation -> control mean within bounds (the solver-free baseline)."""

    def __init__(self, obs_dim, n_u, u_min, u_max, hidden=(512, 512)):
        super().__init__()
        self.net = build_mlp(obs_dim, hidden, n_u)
        self.register_buffer("u_lo", torch.tensor(u_min, dtype=torch.float32))
        self.register_buffer("u_hi", torch.tensor(u_max, dtype=torch.float32))

    def forward(self, obs):
        return self.u_lo + torch.sigmoid(self.net(obs)) * (self.u_hi - self.u_lo)


class Critic(nn.Module):
    def __init__(self, obs_dim, hidden=(512, 512)):
        super().__init__()
        self.net = build_mlp(obs_dim, hidden, 1)

    def forward(self, obs):
        return self.net(obs).squeeze(-1)


class PolicyBundle(nn.Module):
    """Actor + critic + exploration std, with the metadata needed to rebuild."""

    def __init__(self, mode, obs_dim, model: DynModel, settings: SolveSettings,
                 scaling: CostHeadScaling, hidden=(512, 512), sigma_init_scale=0.1):
        super().__init__()
        if mode not in ("ac_mpc", "ac_mlp"):
            raise ConfigError(f"policy mode must be ac_mpc or ac_mlp, got {mode!r}")
        self.mode = mode
        self.obs_dim = obs_dim
        self.T = settings.T
        self.n_x = model.n_x
        self.n_u = model.n_u
        self.n_z = model.n_x + model.n_u
        self.hidden = tuple(hidden)
        self.scaling = scaling
        self.sigma_init_scale = sigma_init_scale
        u_min, u_max = settings.bounds_for(model.n_u)
        self.u_min = u_min
        self.u_max = u_max
        if mode == "ac_mpc":
            self.actor_spec = MlpSpec(self.hidden, head="cost")
            self.actor = CostActor(obs_dim, settings.T, self.n_z, scaling, hidden)
        else:
            self.actor_spec = MlpSpec(self.hidden, head="action")
            self.actor = DirectActor(obs_dim, model.n_u, u_min, u_max, hidden)
        self.critic_spec = MlpSpec(self.hidden, head="value")
        self.critic = Critic(obs_dim, hidden)
        sigma0 = sigma_init_scale * (u_max - u_min)
        self.log_sigma = nn.Parameter(torch.tensor(np.log(sigma0), dtype=torch.float32))

    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.detach().cpu().numpy().astype(np.float64))


@dataclass
class PolicyAction:
    u_mpc: np.ndarray
    u_sampled: np.ndarray  # executed control, clamped to bounds
    log_prob: float  # Gaussian density at the pre-clamp sample
    sigma: np.ndarray
    u_raw: np.ndarray = None  # pre-clamp sample


class MpcSolver:
    """Solver handle: model, horizon settings, worker pool and warm starts.

    Warm-start slots implement the receding-horizon shift: after each solve
    the stored control sequence advances one step, repeating the last entry.
    """

    def __init__(self, model: DynModel, settings: SolveSettings, pool=None,
                 mode="fused", n_slots=1):
        self.model = model
        self.settings = settings
        self.pool = pool or batchexec.default_pool()
        self.mode = mode
        self.n_slots = n_slots
        u_min, u_max = settings.bounds_for(model.n_u)
        self.default_u = np.clip(model.hover_control(), u_min, u_max)
        self.warm = None
        self.reset_warm()

    def reset_warm(self, slots=None):
        if self.warm is None:
            self.warm = np.tile(self.default_u, (self.n_slots, self.settings.T, 1))
        elif slots is None:
            self.warm[:] = self.default_u
        else:
            self.warm[slots] = self.default_u

    def push_warm(self, U: np.ndarray, slots=None):
        """Store the time-shifted solution for the next receding-horizon call."""
        shifted = np.concatenate([U[:, 1:], U[:, -1:]], axis=1)
        if slots is None:
            self.warm[:] = shifted
        else:
            self.warm[slots] = shifted

    def solve_diag(self, x_init, diag, cvec, U_warm):
        """Batched solve from diagonal cost parameterization (arrays in, arrays out)."""
        B, T, n_z = diag.shape
        C = np.zeros((B, T, n_z, n_z))
        idx = np.arange(n_z)
        C[:, :, idx, idx] = diag
        return batchexec.solve_raw(
            self.model, self.settings, x_init, C, cvec, U_warm, self.mode, self.pool
        )


class MpcSolveLayer(torch.autograd.Function):
    """First optimal control of the batched solve as a differentiable op.

    Forward runs the staged solver outside autograd (float64, no graphs);
    backward seeds the implicit-differentiation sweep with the incoming
    gradient and chains it onto the diagonal cost parameterization.
    """

    @staticmethod
    def forward(ctx, diag, cvec, solver: MpcSolver, x_init, U_warm, stats_sink):
        d = diag.detach().cpu().numpy().astype(np.float64)
        cv = cvec.detach().cpu().numpy().astype(np.float64)
        ws, iterations, converged, _, _ = solver.solve_diag(x_init, d, cv, U_warm)
        ctx.solver = solver
        ctx.ws = ws
        ctx.converged = converged
        if stats_sink is not None:
            stats_sink.setdefault("solves", 0)
            stats_sink.setdefault("non_converged", 0)
            stats_sink.setdefault("iterations", 0)
            stats_sink["solves"] += ws.B
            stats_sink["non_converged"] += int((~converged).sum())
            stats_sink["iterations"] += int(iterations.sum())
        u0 = torch.from_numpy(ws.U[:, 0].copy()).to(diag.dtype)
        return u0

    @staticmethod
    def backward(ctx, grad_u0):
        ws = ctx.ws
        solver = ctx.solver
        B, T = ws.B, ws.settings.T
        n_x, n_u = ws.model.n_x, ws.model.n_u
        gw = GradWorkspace(B, T, n_x, n_u)
        active = np.ones(B, dtype=np.uint8)
        model = ws.model

        def lin_fn(i_lo, i_hi, t_lo, t_hi):
            kernels.linearize_range(
                model.kind, model.params, model.dt, ws.X, ws.U, gw.A, gw.Bm,
                active, i_lo, i_hi, t_lo, t_hi,
            )

        solver.pool.parallel_for(lin_fn, B, 0, T)
        gw.C[:] = ws.C
        gw.X[:] = ws.X
        gw.U[:] = ws.U
        gw.clamped[:] = ((ws.U <= ws.u_min) | (ws.U >= ws.u_max)).astype(np.uint8)
        gw.su[:, 0, :] = grad_u0.detach().cpu().numpy().astype(np.float64)
        batchexec.backward_batch_arrays(gw, "fused", solver.pool)
        idx = np.arange(n_x + n_u)
        grad_diag = gw.dC[:, :, idx, idx]
        grad_c = gw.dc
        failed = gw.fail_t >= 0
        if failed.any():
            grad_diag[failed] = 0.0
            grad_c[failed] = 0.0
        gd = torch.from_numpy(grad_diag).to(grad_u0.dtype)
        gc = torch.from_numpy(np.ascontiguousarray(grad_c)).to(grad_u0.dtype)
        return gd, gc, None, None, None, None


def mpc_control(bundle: PolicyBundle, obs_t, solver: MpcSolver, x_init, U_warm,
                stats_sink=None):
    """Differentiable path obs -> cost params -> solver -> first control."""
    diag, cvec = bundle.actor(obs_t)
    return MpcSolveLayer.apply(diag, cvec, solver, x_init, U_warm, stats_sink)


def gaussian_log_prob(x, mean, sigma):
    z = (x - mean) / sigma
    return float(np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI))


def actor_forward(bundle: PolicyBundle, obs: np.ndarray) -> StageCostParams:
    """Map one observation to stage-cost parameters (ac_mpc bundles only)."""
    if bundle.mode != "ac_mpc":
        raise ConfigError("actor_forward requires an ac_mpc bundle")
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (bundle.obs_dim,):
        raise ConfigError(f"obs has shape {obs.shape}, expected ({bundle.obs_dim},)")
    if not np.isfinite(obs).all():
        raise NumericError("non-finite observation")
    with torch.no_grad():
        diag, cvec = bundle.actor(torch.tensor(obs, dtype=torch.float32)[None])
    diag = diag[0].double().numpy()
    cvec = cvec[0].double().numpy()
    if not (np.isfinite(diag).all() and np.isfinite(cvec).all()):
        raise NumericError("non-finite actor output")
    return StageCostParams.from_diag(diag, cvec, bundle.n_x)


def critic_forward(bundle: PolicyBundle, obs: np.ndarray):
    """Scalar value for one observation, or a vector for a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    with torch.no_grad():
        v = bundle.critic(torch.tensor(np.atleast_2d(obs), dtype=torch.float32))
    v = v.double().numpy()
    if not np.isfinite(v).all():
        raise NumericError("non-finite critic output")
    return float(v[0]) if single else v


def act(bundle: PolicyBundle, obs, x_init, solver: MpcSolver, explore: bool,
        rng: np.random.Generator, slot: int = 0, U_warm=None) -> PolicyAction:
    """One policy step: solve the MPC (or direct head) and optionally sample.

    With ``explore`` the executed control is a clamped Gaussian sample around
    the solver output; ``log_prob`` is the density of the pre-clamp sample.
    """
    sigma = bundle.sigma()
    if bundle.mode == "ac_mpc":
        p = actor_forward(bundle, obs)
        if U_warm is None:
            U_warm = solver.warm[slot]
        ws, iterations, converged, _, _ = solver.solve_diag(
            np.asarray(x_init, dtype=np.float64)[None],
            np.diagonal(p.C, axis1=1, axis2=2)[None],
            p.c[None],
            np.asarray(U_warm, dtype=np.float64)[None],
        )
        if ws.fail_t[0] >= 0 or ws.diverged[0]:
            raise NumericError(f"solver failed during act (slot {slot})")
        u_mpc = ws.U[0, 0].copy()
        solver.push_warm(ws.U, slots=[slot])
    else:
        obs64 = np.asarray(obs, dtype=np.float64)
        with torch.no_grad():
            u_mpc = (
                bundle.actor(torch.tensor(obs64, dtype=torch.float32)[None])[0]
                .double().numpy()
            )
    if explore:
        u_raw = rng.normal(u_mpc, sigma)
        log_prob = gaussian_log_prob(u_raw, u_mpc, sigma)
        u_sampled = np.clip(u_raw, bundle.u_min, bundle.u_max)
    else:
        u_raw = u_mpc.copy()
        log_prob = gaussian_log_prob(u_mpc, u_mpc, sigma)
        u_sampled = u_mpc.copy()
    return PolicyAction(u_mpc=u_mpc, u_sampled=u_sampled, log_prob=log_prob,
                        sigma=sigma, u_raw=u_raw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, bundle: PolicyBundle, step: int, config: dict,
                    optimizer: torch.optim.Optimizer | None = None):
    """Write an npz checkpoint: parameters, scaling, optimizer state, metadata."""
    arrays = {}
    for key, value in bundle.state_dict().items():
        arrays[f"param/{key}"] = value.detach().cpu().numpy()
    if optimizer is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        for i, p in enumerate(params):
            st = optimizer.state.get(p, {})
            for name in ("exp_avg", "exp_avg_sq"):
                if name in st:
                    arrays[f"opt/{i}/{name}"] = st[name].detach().cpu().numpy()
            if "step" in st:
                step_v = st["step"]
                arrays[f"opt/{i}/step"] = np.asarray(
                    step_v.item() if torch.is_tensor(step_v) else step_v
                )
    meta = {
        "version": CHECKPOINT_VERSION,
        "mode": bundle.mode,
        "obs_dim": bundle.obs_dim,
        "T": bundle.T,
        "n_x": bundle.n_x,
        "n_u": bundle.n_u,
        "hidden": list(bundle.hidden),
        "sigma_init_scale": bundle.sigma_init_scale,
        "u_min": bundle.u_min.tolist(),
        "u_max": bundle.u_max.tolist(),
        "scaling": {
            "diag_lo": bundle.scaling.diag_lo.tolist(),
            "diag_hi": bundle.scaling.diag_hi.tolist(),
            "c_lo": bundle.scaling.c_lo.tolist(),
            "c_hi": bundle.scaling.c_hi.tolist(),
        },
        "step": step,
        "config_hash": config_hash(config),
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def restore_optimizer(optimizer: torch.optim.Optimizer, opt_arrays: dict):
    """Reload Adam moments saved by save_checkpoint into a fresh optimizer."""
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        state = {}
        for name in ("exp_avg", "exp_avg_sq"):
            key = f"opt/{i}/{name}"
            if key in opt_arrays:
                state[name] = torch.tensor(opt_arrays[key])
        key = f"opt/{i}/step"
        if key in opt_arrays:
            state["step"] = torch.tensor(float(opt_arrays[key]))
        if state:
            optimizer.state[p] = state


def load_checkpoint(path, model: DynModel, settings: SolveSettings):
    """Rebuild (bundle, step, meta, optimizer_arrays) from an npz checkpoint."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        if meta["T"] != settings.T or meta["n_x"] != model.n_x or meta["n_u"] != model.n_u:
            raise ConfigError(
                "checkpoint dimensions do not match the configured model/settings"
            )
        scaling = CostHeadScaling(**{k: np.array(v) for k, v in meta["scaling"].items()})
        bundle = PolicyBundle(
            meta["mode"], meta["obs_dim"], model, settings, scaling,
            hidden=tuple(meta["hidden"]), sigma_init_scale=meta["sigma_init_scale"],
        )
        state = {
            key[len("param/"):]: torch.tensor(data[key])
            for key in data.files if key.startswith("param/")
        }
        bundle.load_state_dict(state)
        opt_arrays = {
            key: data[key].copy() for key in data.files if key.startswith("opt/")
        }
    return bundle, meta["step"], meta, opt_arrays
