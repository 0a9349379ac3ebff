"""Control-limited iLQR structured as three stages per iteration.

A solve runs an initial rollout and then iterates:

1. linearization of the dynamics about the nominal trajectory,
2. a Riccati backward sweep where each stage solves a box-constrained QP on
   the control increment,
3. parallel line-search rollouts over candidate step sizes, keeping the
   best candidate only if it improves the nominal cost.

The three stages are expressed as range kernels (see ``kernels``) driven
through a dispatcher object, so the same orchestration serves both the
inline single-instance path and the pooled batch executor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import DynModel
from .errors import ConfigError, DivergenceError, NumericError
from .qcost import StageCostParams, Trajectory, total_cost

DEFAULT_ALPHAS = (1.0, 0.5, 0.25, 0.1)


@dataclass(frozen=True)
class SolveSettings:
    """Horizon, bounds and iteration limits for a solve."""

    T: int
    u_min: np.ndarray
    u_max: np.ndarray
    K_max: int = 10
    alphas: tuple = DEFAULT_ALPHAS
    conv_tol: float = 1e-6
    boxqp_max_iter: int = 20
    boxqp_tol: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "u_min", np.atleast_1d(np.asarray(self.u_min, dtype=np.float64)))
        object.__setattr__(self, "u_max", np.atleast_1d(np.asarray(self.u_max, dtype=np.float64)))
        if self.T < 1:
            raise ConfigError(f"horizon T must be >= 1, got {self.T}")
        if self.K_max < 1:
            raise ConfigError(f"K_max must be >= 1, got {self.K_max}")
        if not np.all(self.u_min < self.u_max):
            raise ConfigError("u_min must be elementwise below u_max")
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.size == 0 or np.any(a <= 0.0) or np.any(a > 1.0) or np.any(np.diff(a) >= 0.0):
            raise ConfigError("alphas must be a strictly decreasing sequence in (0, 1]")

    def bounds_for(self, n_u: int):
        """Bounds broadcast to the control dimension."""
        lo = np.broadcast_to(self.u_min, (n_u,)).astype(np.float64)
        hi = np.broadcast_to(self.u_max, (n_u,)).astype(np.float64)
        return np.ascontiguousarray(lo), np.ascontiguousarray(hi)


@dataclass(frozen=True)
class Gains:
    """Affine feedback policy about a nominal trajectory."""

    K: np.ndarray  # (T, n_u, n_x)
    k: np.ndarray  # (T, n_u)


@dataclass(frozen=True)
class SolveResult:
    traj: Trajectory
    gains: Gains
    cost: float
    iterations: int
    converged: bool
    clamped_mask: np.ndarray  # (T, n_u) bool, bounds active at the solution
    alpha_history: np.ndarray  # step size accepted at each executed iteration
    failed: bool = False
    fail_stage: int = -1


class Workspace:
    """Preallocated batch arrays threaded through the stage kernels."""

    def __init__(self, model: DynModel, settings: SolveSettings, B: int):
        T, n_x, n_u = settings.T, model.n_x, model.n_u
        n_z = n_x + n_u
        n_a = len(settings.alphas)
        self.B = B
        self.model = model
        self.settings = settings
        self.u_min, self.u_max = settings.bounds_for(n_u)
        self.alphas = np.asarray(settings.alphas, dtype=np.float64)
        self.X = np.zeros((B, T + 1, n_x))
        self.U = np.zeros((B, T, n_u))
        self.C = np.zeros((B, T, n_z, n_z))
        self.c = np.zeros((B, T, n_z))
        self.A = np.zeros((B, T, n_x, n_x))
        self.Bm = np.zeros((B, T, n_x, n_u))
        self.Vx = np.zeros((B, n_x))
        self.Vxx = np.zeros((B, n_x, n_x))
        self.K = np.zeros((B, T, n_u, n_x))
        self.k = np.zeros((B, T, n_u))
        self.qp_clamped = np.zeros((B, T, n_u), dtype=np.uint8)
        self.J = np.zeros(B)
        self.fail_t = np.full(B, -1, dtype=np.int64)
        self.active = np.ones(B, dtype=np.uint8)
        self.Xc = np.zeros((B, n_a, T + 1, n_x))
        self.Uc = np.zeros((B, n_a, T, n_u))
        self.Jc = np.zeros((B, n_a))
        self.dead = np.zeros((B, n_a), dtype=np.uint8)

    def load(self, x_init: np.ndarray, params, U_warm: np.ndarray):
        """Fill initial states, cost parameters and warm-start controls.

        ``params`` may be a shared StageCostParams, a list of per-instance
        ones, or a raw ``(C, c)`` pair of stacked (B, T, ...) arrays.
        """
        self.X[:, 0, :] = x_init
        if isinstance(params, StageCostParams):
            self.C[:] = params.C
            self.c[:] = params.c
        elif isinstance(params, tuple):
            C, c = params
            self.C[:] = C
            self.c[:] = c
        else:
            for i, p in enumerate(params):
                self.C[i] = p.C
                self.c[i] = p.c
        self.U[:] = U_warm


class InlineDispatcher:
    """Runs each stage as a single full-range call on the calling thread."""

    per_timestep = False

    def launch(self, fn, n_items, t_lo, t_hi):
        fn(0, n_items, t_lo, t_hi)


def _run_stage(disp, fn, n_items, T, reverse=False):
    if disp.per_timestep:
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            disp.launch(fn, n_items, t, t + 1)
    else:
        disp.launch(fn, n_items, 0, T)


def run_staged_solve(ws: Workspace, disp) -> tuple:
    """Drive the staged solve over a loaded workspace.

    Returns (iterations, converged, alpha_history) as batch arrays; per-batch
    failure state is left in ws.fail_t / ws.active / ws.dead.
    """
    model, settings = ws.model, ws.settings
    B, T = ws.B, settings.T
    kind, mp, dt = model.kind, model.params, model.dt
    n_a = ws.alphas.shape[0]

    np.clip(ws.U, ws.u_min, ws.u_max, out=ws.U)
    ws.active[:] = 1
    ws.fail_t[:] = -1
    ws.J[:] = 0.0

    def rollout_fn(i_lo, i_hi, t_lo, t_hi):
        kernels.rollout_range(
            kind, mp, dt, ws.X, ws.U, ws.C, ws.c, ws.J, ws.fail_t, ws.active,
            i_lo, i_hi, t_lo, t_hi,
        )

    def linearize_fn(i_lo, i_hi, t_lo, t_hi):
        kernels.linearize_range(
            kind, mp, dt, ws.X, ws.U, ws.A, ws.Bm, ws.active, i_lo, i_hi, t_lo, t_hi
        )

    def backward_fn(i_lo, i_hi, t_lo, t_hi):
        kernels.backward_range(
            ws.A, ws.Bm, ws.C, ws.c, ws.X, ws.U, ws.u_min, ws.u_max,
            ws.Vx, ws.Vxx, ws.K, ws.k, ws.qp_clamped, ws.fail_t, ws.active,
            i_lo, i_hi, t_lo, t_hi, settings.boxqp_max_iter, settings.boxqp_tol,
        )

    def linesearch_fn(c_lo, c_hi, t_lo, t_hi):
        kernels.linesearch_range(
            kind, mp, dt, ws.X, ws.U, ws.K, ws.k, ws.alphas, ws.u_min, ws.u_max,
            ws.C, ws.c, ws.Xc, ws.Uc, ws.Jc, ws.dead, ws.active,
            c_lo, c_hi, t_lo, t_hi,
        )

    _run_stage(disp, rollout_fn, B, T)
    rollout_failed = ws.fail_t >= 0

    iterations = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    diverged = rollout_failed.copy()
    alpha_history = []
    ws.J_trace = [ws.J.copy()]

    for it in range(settings.K_max):
        if not ws.active.any():
            break
        _run_stage(disp, linearize_fn, B, T)
        ws.Vx[:] = 0.0
        ws.Vxx[:] = 0.0
        _run_stage(disp, backward_fn, B, T, reverse=True)
        ws.Xc[:, :, 0, :] = ws.X[:, None, 0, :]
        ws.Jc[:] = 0.0
        ws.dead[:] = 0
        _run_stage(disp, linesearch_fn, B * n_a, T)

        act = ws.active.astype(bool)
        iterations[act] = it + 1
        best_idx = np.argmin(ws.Jc, axis=1)
        rows = np.arange(B)
        best_J = ws.Jc[rows, best_idx]
        all_dead = act & (ws.dead.astype(bool).all(axis=1))
        accept = act & ~all_dead & (best_J < ws.J)

        alpha_used = np.zeros(B)
        alpha_used[accept] = ws.alphas[best_idx[accept]]
        alpha_history.append(alpha_used)

        if accept.any():
            sel = best_idx[accept]
            ws.X[accept] = ws.Xc[accept, sel]
            ws.U[accept] = ws.Uc[accept, sel]
        J_prev = ws.J.copy()
        ws.J[accept] = best_J[accept]

        diverged |= all_dead
        ws.active[all_dead] = 0

        with np.errstate(invalid="ignore"):
            rel = np.abs(J_prev - ws.J) / np.maximum(1.0, np.abs(J_prev))
        no_step = act & ~all_dead & ~accept
        conv_now = (act & ~all_dead) & (no_step | (rel <= settings.conv_tol))
        converged |= conv_now
        ws.active[conv_now] = 0
        ws.J_trace.append(ws.J.copy())

    ws.diverged = diverged
    return iterations, converged, alpha_history


def collect_result(ws: Workspace, i: int, iterations, converged, alpha_history) -> SolveResult:
    """Assemble the SolveResult for instance ``i`` of a driven workspace."""
    failed = bool(ws.fail_t[i] >= 0) or bool(ws.diverged[i])
    traj = Trajectory(ws.X[i].copy(), ws.U[i].copy())
    gains = Gains(ws.K[i].copy(), ws.k[i].copy())
    clamped = (ws.U[i] <= ws.u_min) | (ws.U[i] >= ws.u_max)
    n_it = int(iterations[i])
    hist = np.array([alpha_history[j][i] for j in range(n_it)])
    return SolveResult(
        traj=traj,
        gains=gains,
        cost=float(ws.J[i]),
        iterations=n_it,
        converged=bool(converged[i]) and not failed,
        clamped_mask=clamped,
        alpha_history=hist,
        failed=failed,
        fail_stage=int(ws.fail_t[i]),
    )


# ---------------------------------------------------------------------------
# public single-instance operations
# ---------------------------------------------------------------------------


def rollout(model: DynModel, x_init: np.ndarray, U: np.ndarray) -> Trajectory:
    """Open-loop rollout: X[0] = x_init, X[t+1] = f(X[t], U[t])."""
    x_init = np.ascontiguousarray(x_init, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != model.n_u:
        raise ConfigError(f"U must be (T, {model.n_u}), got {U.shape}")
    if x_init.shape != (model.n_x,):
        raise ConfigError(f"x_init must be ({model.n_x},), got {x_init.shape}")
    T = U.shape[0]
    n_z = model.n_x + model.n_u
    X = np.zeros((1, T + 1, model.n_x))
    X[0, 0] = x_init
    J = np.zeros(1)
    fail_t = np.full(1, -1, dtype=np.int64)
    active = np.ones(1, dtype=np.uint8)
    Cz = np.zeros((1, T, n_z, n_z))
    cz = np.zeros((1, T, n_z))
    kernels.rollout_range(
        model.kind, model.params, model.dt, X, U[None], Cz, cz, J, fail_t, active,
        0, 1, 0, T,
    )
    if fail_t[0] >= 0:
        raise DivergenceError("rollout produced a non-finite state", stage=int(fail_t[0]))
    return Trajectory(X[0], U)


def linearize(model: DynModel, traj: Trajectory):
    """Per-timestep Jacobian pairs (A_t, B_t) along a trajectory."""
    T = traj.T
    A = np.zeros((T, model.n_x, model.n_x))
    B = np.zeros((T, model.n_x, model.n_u))
    if T == 0:
        return A, B
    active = np.ones(1, dtype=np.uint8)
    kernels.linearize_range(
        model.kind, model.params, model.dt,
        traj.X[None], traj.U[None], A[None], B[None], active, 0, 1, 0, T,
    )
    return A, B


def boxqp(H: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray, u0=None):
    """Minimize 0.5 u'Hu + g'u subject to lo <= u <= hi (projected Newton).

    Returns (u_star, free_mask).
    """
    H = np.ascontiguousarray(H, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    n = g.shape[0]
    if H.shape != (n, n):
        raise ConfigError(f"H must be ({n}, {n}), got {H.shape}")
    if not np.all(lo < hi):
        raise ConfigError("boxqp requires lo < hi elementwise")
    u = np.zeros(n) if u0 is None else np.array(u0, dtype=np.float64)
    free = np.zeros(n, dtype=np.uint8)
    status = kernels.boxqp_one(
        H, g, lo, hi, u, free,
        np.empty((n, n)), np.empty(n, dtype=np.int64), np.empty(n), np.empty(n),
        np.empty(n), np.empty(n), 100, 1e-10,
    )
    if status != kernels.BOXQP_OK:
        raise NumericError("boxqp Hessian is not positive definite")
    return u, free.astype(bool)


def _check_horizons(lin_A, p: StageCostParams, traj: Trajectory, settings: SolveSettings):
    T = settings.T
    if not (lin_A.shape[0] == p.T == traj.T == T):
        raise ConfigError(
            f"horizon mismatch: lin={lin_A.shape[0]}, cost={p.T}, traj={traj.T}, settings={T}"
        )


def backward_pass(lin, p: StageCostParams, traj: Trajectory, settings: SolveSettings) -> Gains:
    """Riccati sweep with per-stage box QPs; returns feedback gains."""
    A, B = lin
    _check_horizons(A, p, traj, settings)
    T, n_x, n_u = settings.T, traj.n_x, traj.n_u
    u_min, u_max = settings.bounds_for(n_u)
    Vx = np.zeros((1, n_x))
    Vxx = np.zeros((1, n_x, n_x))
    K = np.zeros((1, T, n_u, n_x))
    k = np.zeros((1, T, n_u))
    clamped = np.zeros((1, T, n_u), dtype=np.uint8)
    fail_t = np.full(1, -1, dtype=np.int64)
    active = np.ones(1, dtype=np.uint8)
    kernels.backward_range(
        A[None], B[None], p.C[None], p.c[None], traj.X[None], traj.U[None],
        u_min, u_max, Vx, Vxx, K, k, clamped, fail_t, active,
        0, 1, 0, T, settings.boxqp_max_iter, settings.boxqp_tol,
    )
    if fail_t[0] >= 0:
        raise NumericError("stage Hessian not positive definite", stage=int(fail_t[0]))
    return Gains(K[0], k[0])


def forward_linesearch(
    model: DynModel,
    p: StageCostParams,
    traj_nom: Trajectory,
    gains: Gains,
    settings: SolveSettings,
):
    """Evaluate candidate step sizes in parallel and keep the best one.

    Returns (trajectory, cost, alpha_used); alpha_used == 0 means no candidate
    improved on the nominal cost and the nominal trajectory is returned.
    """
    T = settings.T
    if traj_nom.T != T or p.T != T:
        raise ConfigError("horizon mismatch in forward_linesearch")
    n_x, n_u = traj_nom.n_x, traj_nom.n_u
    u_min, u_max = settings.bounds_for(n_u)
    alphas = np.asarray(settings.alphas, dtype=np.float64)
    n_a = alphas.shape[0]
    Xc = np.zeros((1, n_a, T + 1, n_x))
    Uc = np.zeros((1, n_a, T, n_u))
    Jc = np.zeros((1, n_a))
    dead = np.zeros((1, n_a), dtype=np.uint8)
    active = np.ones(1, dtype=np.uint8)
    Xc[0, :, 0, :] = traj_nom.X[0]
    kernels.linesearch_range(
        model.kind, model.params, model.dt,
        traj_nom.X[None], traj_nom.U[None], gains.K[None], gains.k[None],
        alphas, u_min, u_max, p.C[None], p.c[None],
        Xc, Uc, Jc, dead, active, 0, n_a, 0, T,
    )
    if dead[0].all():
        raise DivergenceError("all line-search candidates diverged")
    J_nom = total_cost(p, traj_nom)
    best = int(np.argmin(Jc[0]))
    if Jc[0, best] < J_nom:
        return Trajectory(Xc[0, best], Uc[0, best]), float(Jc[0, best]), float(alphas[best])
    return traj_nom, float(J_nom), 0.0


def solve(
    model: DynModel,
    x_init: np.ndarray,
    p: StageCostParams,
    U_warm: np.ndarray,
    settings: SolveSettings,
) -> SolveResult:
    """Run the staged solve for a single instance."""
    x_init = np.ascontiguousarray(x_init, dtype=np.float64)
    U_warm = np.ascontiguousarray(U_warm, dtype=np.float64)
    if p.T != settings.T:
        raise ConfigError(f"cost horizon {p.T} != settings horizon {settings.T}")
    if U_warm.shape != (settings.T, model.n_u):
        raise ConfigError(f"U_warm must be ({settings.T}, {model.n_u}), got {U_warm.shape}")
    if p.n_x != model.n_x:
        raise ConfigError(f"cost n_x={p.n_x} does not match model n_x={model.n_x}")
    ws = Workspace(model, settings, B=1)
    ws.load(x_init[None], params=[p], U_warm=U_warm[None])
    iterations, converged, alpha_history = run_staged_solve(ws, InlineDispatcher())
    if ws.fail_t[0] >= 0 and ws.diverged[0] and iterations[0] == 0:
        raise DivergenceError("initial rollout diverged", stage=int(ws.fail_t[0]))
    if ws.fail_t[0] >= 0 and not ws.diverged[0]:
        raise NumericError("stage Hessian not positive definite", stage=int(ws.fail_t[0]))
    if ws.diverged[0] and iterations[0] > 0:
        raise DivergenceError("all line-search candidates diverged")
    return collect_result(ws, 0, iterations, converged, alpha_history)
