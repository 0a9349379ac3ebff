"""Batched execution with an explicit dispatch contract.

A *dispatch* is one submission of a parallel-for job to the worker pool (the
CPU analogue of launching one GPU kernel); the counter increments at
submission. Two modes drive the same stage kernels:

* ``fused`` — each solver stage covers the whole horizon in a single
  dispatch, so one iteration costs exactly 3 dispatches (plus 1 for the
  initial rollout of a solve).
* ``naive`` — each stage is dispatched once per timestep, batching only
  across instances within the step, i.e. 3*T dispatches per iteration.

Both modes run identical per-instance arithmetic in identical order, so their
results are bit-identical; only the dispatch pattern (and hence the host-side
overhead) differs. Stage boundaries are full barriers and instances never
share mutable state, which keeps results independent of the worker count.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass

import numpy as np

from . import gradlayer, ilqr
from .dynamics import DynModel
from .errors import ConfigError
from .gradlayer import BackwardSeed, GradWorkspace
from .ilqr import SolveSettings, Workspace
from .qcost import StageCostParams

MODES = ("fused", "naive")

LATENCY_CSV_HEADER = ["mode", "B", "T", "K", "forward_ms", "backward_ms", "dispatches"]


@dataclass(frozen=True)
class BatchProblem:
    """B solver instances sharing model, horizon and bounds."""

    model: DynModel
    x_init: np.ndarray  # (B, n_x)
    params: list  # B StageCostParams
    U_warm: np.ndarray  # (B, T, n_u)
    settings: SolveSettings

    def __post_init__(self):
        B = self.x_init.shape[0]
        if B < 1:
            raise ConfigError("batch must contain at least one instance")
        if len(self.params) != B or self.U_warm.shape[0] != B:
            raise ConfigError("x_init, params and U_warm must agree on batch size")

    @property
    def B(self) -> int:
        return self.x_init.shape[0]


@dataclass
class DispatchStats:
    dispatches_per_iteration: int
    total_dispatches: int
    wall_time_forward: float
    wall_time_backward: float


class WorkerPool:
    """Thread pool running the compiled (GIL-free) stage kernels."""

    def __init__(self, workers: int | None = None):
        if workers is None:
            workers = min(8, os.cpu_count() or 1)
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def parallel_for(self, fn, n_items, t_lo, t_hi):
        """Run fn over [0, n_items) split into per-worker chunks; barrier at the end."""
        if self._pool is None or n_items == 1:
            fn(0, n_items, t_lo, t_hi)
            return
        chunk = -(-n_items // self.workers)
        futures = [
            self._pool.submit(fn, lo, min(n_items, lo + chunk), t_lo, t_hi)
            for lo in range(0, n_items, chunk)
        ]
        wait(futures)
        for f in futures:
            f.result()

    def shutdown(self):
        if self._pool is not None:
            self._pool.shutdown()


class PoolDispatcher:
    """Counts dispatches and forwards them to the worker pool."""

    def __init__(self, pool: WorkerPool, per_timestep: bool):
        self.pool = pool
        self.per_timestep = per_timestep
        self.count = 0

    def launch(self, fn, n_items, t_lo, t_hi):
        self.count += 1
        self.pool.parallel_for(fn, n_items, t_lo, t_hi)


_default_pool = None


def default_pool() -> WorkerPool:
    global _default_pool
    if _default_pool is None:
        _default_pool = WorkerPool()
    return _default_pool


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def _drive_solve(ws: Workspace, mode, pool):
    disp = PoolDispatcher(pool, per_timestep=(mode == "naive"))
    t0 = time.perf_counter()
    iterations, converged, alpha_history = ilqr.run_staged_solve(ws, disp)
    wall = time.perf_counter() - t0
    loops = len(alpha_history)
    rollout_dispatches = ws.settings.T if mode == "naive" else 1
    per_iter = (disp.count - rollout_dispatches) // loops if loops else 0
    stats = DispatchStats(
        dispatches_per_iteration=per_iter,
        total_dispatches=disp.count,
        wall_time_forward=wall,
        wall_time_backward=0.0,
    )
    return ws, iterations, converged, alpha_history, stats


def solve_batch_arrays(prob: BatchProblem, mode="fused", pool=None):
    """Array-level batch solve; returns (workspace, iterations, converged, alpha_history, stats)."""
    _check_mode(mode)
    pool = pool or default_pool()
    ws = Workspace(prob.model, prob.settings, prob.B)
    ws.load(prob.x_init, prob.params, prob.U_warm)
    return _drive_solve(ws, mode, pool)


def solve_raw(model, settings, x_init, C, c, U_warm, mode="fused", pool=None):
    """Batch solve over stacked (B, T, ...) cost arrays, skipping per-instance
    parameter objects. Returns the same tuple as solve_batch_arrays."""
    _check_mode(mode)
    pool = pool or default_pool()
    ws = Workspace(model, settings, x_init.shape[0])
    ws.load(x_init, (C, c), U_warm)
    return _drive_solve(ws, mode, pool)


def solve_batch(prob: BatchProblem, mode="fused", pool=None):
    """Solve B instances; returns (list of SolveResult, DispatchStats).

    A diverging instance is marked failed in its result without aborting the
    rest of the batch.
    """
    ws, iterations, converged, alpha_history, stats = solve_batch_arrays(prob, mode, pool)
    results = [
        ilqr.collect_result(ws, i, iterations, converged, alpha_history)
        for i in range(prob.B)
    ]
    return results, stats


def backward_batch_arrays(gw: GradWorkspace, mode="fused", pool=None):
    """Drive a loaded gradient workspace; returns (dx_init array, dispatch count)."""
    _check_mode(mode)
    pool = pool or default_pool()
    disp = PoolDispatcher(pool, per_timestep=(mode == "naive"))
    dx_init = gradlayer.run_staged_backward(gw, disp)
    return dx_init, disp.count


def backward_batch(results, lins, params, seeds, mode="fused", pool=None):
    """Per-instance implicit differentiation over a previously solved batch.

    In fused mode the whole pipeline runs as one parallel dispatch. Instances
    whose auxiliary system is singular come back with ``failed`` set; no batch
    abort.
    """
    B = len(results)
    if not (len(lins) == len(params) == len(seeds) == B):
        raise ConfigError("results, lins, params and seeds must have equal length")
    T, n_x, n_u = params[0].T, params[0].n_x, params[0].n_u
    gw = GradWorkspace(B, T, n_x, n_u)
    for i in range(B):
        gw.load(i, results[i], lins[i], params[i], seeds[i])
    dx_init, _ = backward_batch_arrays(gw, mode, pool)
    return [
        gradlayer.collect_grad(gw, i, dx_init, approximate=not results[i].converged)
        for i in range(B)
    ]


# ---------------------------------------------------------------------------
# latency probe
# ---------------------------------------------------------------------------


def make_hover_problem(B: int, T: int, settings_kw=None, seed: int = 0) -> BatchProblem:
    """Random hover-regulation instances on the planar quadrotor."""
    rng = np.random.default_rng(seed)
    model = DynModel.planar_quadrotor(dt=0.05)
    n_x, n_u = model.n_x, model.n_u
    n_z = n_x + n_u
    u_hover = model.hover_control()
    kw = dict(T=T, u_min=np.zeros(n_u), u_max=np.full(n_u, 2.0 * model.mass * model.gravity))
    kw.update(settings_kw or {})
    settings = SolveSettings(**kw)
    diag = np.tile(np.array([1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.05, 0.05]), (T, 1))
    c = np.zeros((T, n_z))
    c[:, n_x:] = -diag[:, n_x:] * u_hover
    params = [StageCostParams.from_diag(diag, c, n_x) for _ in range(B)]
    x_init = np.zeros((B, n_x))
    x_init[:, 0:2] = rng.uniform(-1.0, 1.0, size=(B, 2))
    x_init[:, 3:5] = rng.uniform(-0.5, 0.5, size=(B, 2))
    U_warm = np.tile(u_hover, (B, T, 1))
    return BatchProblem(model, x_init, params, U_warm, settings)


def _unit_seeds(prob: BatchProblem):
    T, n_x, n_u = prob.settings.T, prob.model.n_x, prob.model.n_u
    seed = BackwardSeed(np.zeros((T + 1, n_x)), np.zeros((T, n_u)))
    seed.dL_dU[0, :] = 1.0
    return [seed] * prob.B


def latency_probe(B_list, T_list, reps=10, K=10, pool=None, seed=0):
    """Median forward/backward wall times for both modes on hover problems.

    One warm-up round per cell is excluded from timing. Returns a list of row
    dicts matching LATENCY_CSV_HEADER.
    """
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    pool = pool or default_pool()
    rows = []
    for B in B_list:
        for T in T_list:
            prob = make_hover_problem(B, T, settings_kw={"K_max": K, "conv_tol": 0.0}, seed=seed)
            seeds = _unit_seeds(prob)
            for mode in MODES:
                results, stats = solve_batch(prob, mode, pool)
                lins = [ilqr.linearize(prob.model, r.traj) for r in results]
                backward_batch(results, lins, prob.params, seeds, mode, pool)
                fwd_times, bwd_times = [], []
                dispatches = 0
                for _ in range(reps):
                    t0 = time.perf_counter()
                    _, _, _, _, st = solve_batch_arrays(prob, mode, pool)
                    fwd_times.append(time.perf_counter() - t0)
                    gw = GradWorkspace(prob.B, T, prob.model.n_x, prob.model.n_u)
                    for i in range(prob.B):
                        gw.load(i, results[i], lins[i], prob.params[i], seeds[i])
                    t0 = time.perf_counter()
                    _, bwd_count = backward_batch_arrays(gw, mode, pool)
                    bwd_times.append(time.perf_counter() - t0)
                    dispatches = st.total_dispatches + bwd_count
                rows.append(
                    {
                        "mode": mode,
                        "B": B,
                        "T": T,
                        "K": K,
                        "forward_ms": 1e3 * statistics.median(fwd_times),
                        "backward_ms": 1e3 * statistics.median(bwd_times),
                        "dispatches": dispatches,
                    }
                )
    return rows


def write_latency_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LATENCY_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
