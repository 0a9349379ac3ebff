"""Gradients of a loss through the converged solve via one auxiliary LQR.

Given upstream gradients of a scalar loss with respect to the optimal
trajectory, a single time-varying LQR — built from the same Jacobians and
cost Hessians as the solution, with the seed as its linear cost — yields the
differential trajectory (dx_t, du_t). Parameter gradients follow as

    dc_t      = dz_t
    dC_t      = 0.5 (dz_t z_t' + z_t dz_t')
    dx_init   = value gradient of the auxiliary problem at t = 0

with z = [x; u]. Control dimensions sitting on their bounds are frozen, so
their differentials (and the matching gradient rows/columns) are exactly
zero. The cost of this backward pass does not depend on how many iterations
the forward solve ran.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError
from .ilqr import SolveResult, _run_stage
from .qcost import StageCostParams


@dataclass(frozen=True)
class BackwardSeed:
    """Upstream loss gradients w.r.t. the solution trajectory."""

    dL_dX: np.ndarray  # (T+1, n_x)
    dL_dU: np.ndarray  # (T, n_u)

    def __post_init__(self):
        object.__setattr__(self, "dL_dX", np.ascontiguousarray(self.dL_dX, dtype=np.float64))
        object.__setattr__(self, "dL_dU", np.ascontiguousarray(self.dL_dU, dtype=np.float64))
        if self.dL_dX.shape[0] != self.dL_dU.shape[0] + 1:
            raise ConfigError("seed must have T+1 state rows and T control rows")


@dataclass(frozen=True)
class GradOutput:
    dC: np.ndarray  # (T, n_z, n_z)
    dc: np.ndarray  # (T, n_z)
    dx_init: np.ndarray  # (n_x,)
    approximate: bool = False
    failed: bool = False


class GradWorkspace:
    """Batch arrays for the auxiliary-LQR sweep."""

    def __init__(self, B, T, n_x, n_u):
        n_z = n_x + n_u
        self.B, self.T, self.n_x, self.n_u = B, T, n_x, n_u
        self.A = np.zeros((B, T, n_x, n_x))
        self.Bm = np.zeros((B, T, n_x, n_u))
        self.C = np.zeros((B, T, n_z, n_z))
        self.X = np.zeros((B, T + 1, n_x))
        self.U = np.zeros((B, T, n_u))
        self.sx = np.zeros((B, T, n_x))
        self.su = np.zeros((B, T, n_u))
        self.sxT = np.zeros((B, n_x))
        self.clamped = np.zeros((B, T, n_u), dtype=np.uint8)
        self.Vx = np.zeros((B, n_x))
        self.Vxx = np.zeros((B, n_x, n_x))
        self.K = np.zeros((B, T, n_u, n_x))
        self.k = np.zeros((B, T, n_u))
        self.dX = np.zeros((B, T + 1, n_x))
        self.dU = np.zeros((B, T, n_u))
        self.dC = np.zeros((B, T, n_z, n_z))
        self.dc = np.zeros((B, T, n_z))
        self.fail_t = np.full(B, -1, dtype=np.int64)
        self.active = np.ones(B, dtype=np.uint8)

    def load(self, i, result: SolveResult, lin, p: StageCostParams, seed: BackwardSeed):
        A, B = lin
        if A.shape[0] != self.T or p.T != self.T:
            raise ConfigError("horizon mismatch in gradient workspace")
        if seed.dL_dX.shape != (self.T + 1, self.n_x) or seed.dL_dU.shape != (self.T, self.n_u):
            raise ConfigError(
                f"seed shapes {seed.dL_dX.shape}/{seed.dL_dU.shape} do not match the solve"
            )
        self.A[i] = A
        self.Bm[i] = B
        self.C[i] = p.C
        self.X[i] = result.traj.X
        self.U[i] = result.traj.U
        self.sx[i] = seed.dL_dX[:-1]
        self.su[i] = seed.dL_dU
        self.sxT[i] = seed.dL_dX[-1]
        self.clamped[i] = result.clamped_mask.astype(np.uint8)


def run_staged_backward(gw: GradWorkspace, disp) -> np.ndarray:
    """Drive the auxiliary sweep; returns dx_init (B, n_x).

    Fused dispatchers execute the whole per-instance pipeline (Riccati sweep,
    differential rollout, gradient assembly) as one parallel dispatch;
    per-timestep dispatchers run each phase step by step.
    """
    B, T = gw.B, gw.T
    gw.Vx[:] = gw.sxT
    gw.Vxx[:] = 0.0
    gw.dX[:, 0, :] = 0.0
    gw.fail_t[:] = -1
    gw.active[:] = 1

    if disp.per_timestep:
        def backward_fn(i_lo, i_hi, t_lo, t_hi):
            kernels.aux_backward_range(
                gw.A, gw.Bm, gw.C, gw.sx, gw.su, gw.clamped, gw.Vx, gw.Vxx,
                gw.K, gw.k, gw.fail_t, gw.active, i_lo, i_hi, t_lo, t_hi,
            )

        def rollout_fn(i_lo, i_hi, t_lo, t_hi):
            kernels.aux_rollout_range(
                gw.A, gw.Bm, gw.K, gw.k, gw.dX, gw.dU, gw.active, i_lo, i_hi, t_lo, t_hi
            )

        def assemble_fn(i_lo, i_hi, t_lo, t_hi):
            kernels.aux_assemble_range(
                gw.X, gw.U, gw.dX, gw.dU, gw.clamped, gw.dC, gw.dc, gw.active,
                i_lo, i_hi, t_lo, t_hi,
            )

        _run_stage(disp, backward_fn, B, T, reverse=True)
        dx_init = gw.Vx.copy()
        _run_stage(disp, rollout_fn, B, T)
        _run_stage(disp, assemble_fn, B, T)
    else:
        def full_fn(i_lo, i_hi, t_lo, t_hi):
            kernels.aux_backward_range(
                gw.A, gw.Bm, gw.C, gw.sx, gw.su, gw.clamped, gw.Vx, gw.Vxx,
                gw.K, gw.k, gw.fail_t, gw.active, i_lo, i_hi, t_lo, t_hi,
            )
            kernels.aux_rollout_range(
                gw.A, gw.Bm, gw.K, gw.k, gw.dX, gw.dU, gw.active, i_lo, i_hi, t_lo, t_hi
            )
            kernels.aux_assemble_range(
                gw.X, gw.U, gw.dX, gw.dU, gw.clamped, gw.dC, gw.dc, gw.active,
                i_lo, i_hi, t_lo, t_hi,
            )

        disp.launch(full_fn, B, 0, T)
        dx_init = gw.Vx.copy()
    return dx_init


def collect_grad(gw: GradWorkspace, i, dx_init, approximate) -> GradOutput:
    if gw.fail_t[i] >= 0:
        n_z = gw.n_x + gw.n_u
        return GradOutput(
            dC=np.zeros((gw.T, n_z, n_z)), dc=np.zeros((gw.T, n_z)),
            dx_init=np.zeros(gw.n_x), approximate=approximate, failed=True,
        )
    return GradOutput(
        dC=gw.dC[i].copy(), dc=gw.dc[i].copy(), dx_init=dx_init[i].copy(),
        approximate=approximate,
    )


def backward(result: SolveResult, lin, p: StageCostParams, seed: BackwardSeed) -> GradOutput:
    """Differentiate a loss through one solve.

    A non-converged forward solve still yields gradients, flagged
    ``approximate``; a singular reduced stage Hessian raises NumericError.
    """
    from .ilqr import InlineDispatcher

    T, n_x, n_u = p.T, p.n_x, p.n_u
    gw = GradWorkspace(1, T, n_x, n_u)
    gw.load(0, result, lin, p, seed)
    dx_init = run_staged_backward(gw, InlineDispatcher())
    if gw.fail_t[0] >= 0:
        raise NumericError("singular reduced stage Hessian", stage=int(gw.fail_t[0]))
    return collect_grad(gw, 0, dx_init, approximate=not result.converged)
