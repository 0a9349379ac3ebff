"""Quadratic stage costs over joint state-control vectors z = [x; u].

The per-timestep cost is ``0.5 * z' C_t z + c_t' z``. There is no separate
terminal term; a terminal stage can be emulated by extending the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

EPS_REG = 1e-6


@dataclass(frozen=True)
class Trajectory:
    """A horizon-T trajectory: T+1 states and T controls."""

    X: np.ndarray  # (T+1, n_x)
    U: np.ndarray  # (T, n_u)

    def __post_init__(self):
        object.__setattr__(self, "X", np.ascontiguousarray(self.X, dtype=np.float64))
        object.__setattr__(self, "U", np.ascontiguousarray(self.U, dtype=np.float64))
        if self.X.ndim != 2 or self.U.ndim != 2:
            raise ConfigError("X and U must be 2-D arrays")
        if self.X.shape[0] != self.U.shape[0] + 1:
            raise ConfigError(
                f"X has {self.X.shape[0]} rows but U has {self.U.shape[0]}; expected T+1 and T"
            )

    @property
    def T(self) -> int:
        return self.U.shape[0]

    @property
    def n_x(self) -> int:
        return self.X.shape[1]

    @property
    def n_u(self) -> int:
        return self.U.shape[1]


class StageCostParams:
    """Per-timestep quadratic cost coefficients (C_t, c_t).

    On construction every C_t is symmetrized, and whenever the minimum
    eigenvalue of the control-control block falls below ``EPS_REG`` that
    block's diagonal is lifted by ``EPS_REG`` so the backward recursion can
    always factor it.
    """

    def __init__(self, C: np.ndarray, c: np.ndarray, n_x: int):
        C = np.ascontiguousarray(C, dtype=np.float64)
        c = np.ascontiguousarray(c, dtype=np.float64)
        if C.ndim != 3 or C.shape[1] != C.shape[2]:
            raise ConfigError(f"C must be (T, n_z, n_z), got {C.shape}")
        if c.shape != C.shape[:2]:
            raise ConfigError(f"c has shape {c.shape}, expected {C.shape[:2]}")
        n_z = C.shape[1]
        if not 0 < n_x < n_z:
            raise ConfigError(f"n_x={n_x} must lie strictly inside (0, {n_z})")
        C = 0.5 * (C + np.transpose(C, (0, 2, 1)))
        n_u = n_z - n_x
        for t in range(C.shape[0]):
            Cuu = C[t, n_x:, n_x:]
            if np.linalg.eigvalsh(Cuu).min() < EPS_REG:
                C[t, n_x:, n_x:] += EPS_REG * np.eye(n_u)
        self.C = C
        self.c = c
        self.n_x = n_x
        self.n_u = n_u

    @classmethod
    def from_diag(cls, diag: np.ndarray, c: np.ndarray, n_x: int) -> "StageCostParams":
        """Build diagonal-C params from per-timestep diagonals."""
        diag = np.asarray(diag, dtype=np.float64)
        T, n_z = diag.shape
        C = np.zeros((T, n_z, n_z))
        idx = np.arange(n_z)
        C[:, idx, idx] = diag
        return cls(C, c, n_x)

    @property
    def T(self) -> int:
        return self.C.shape[0]

    @property
    def n_z(self) -> int:
        return self.C.shape[1]


def stage_cost(p: StageCostParams, t: int, x: np.ndarray, u: np.ndarray) -> float:
    """Evaluate 0.5 z'C_t z + c_t'z with z = [x; u]."""
    if not 0 <= t < p.T:
        raise IndexError(f"timestep {t} outside horizon [0, {p.T})")
    if x.shape != (p.n_x,) or u.shape != (p.n_u,):
        raise ConfigError(
            f"stage_cost got x{x.shape}, u{u.shape}; expected ({p.n_x},), ({p.n_u},)"
        )
    from . import kernels

    z = np.concatenate([x, u])
    return kernels.stage_cost_one(p.C[t], p.c[t], z)


def total_cost(p: StageCostParams, traj: Trajectory) -> float:
    """Sum of stage costs over t = 0..T-1 (no terminal term)."""
    if traj.T != p.T:
        raise ConfigError(f"trajectory horizon {traj.T} != cost horizon {p.T}")
    total = 0.0
    for t in range(p.T):
        total += stage_cost(p, t, traj.X[t], traj.U[t])
    return total
