"""Discrete-time dynamics models with analytic Jacobians.

Three model kinds are supported:

* ``double_integrator(d)`` — d decoupled position/velocity chains driven by
  acceleration inputs; state ``[p_1..p_d, v_1..v_d]``, control ``[a_1..a_d]``.
* ``planar_quadrotor`` — a rigid body in the vertical plane with two rotor
  thrusts; state ``[p_x, p_y, theta, v_x, v_y, omega]``, control
  ``[u_left, u_right]`` (thrusts in newtons).
* ``linear(A, B)`` — an arbitrary constant linear map, mainly for testing.

The nonlinear models use an explicit-Euler discretization of the continuous
equations with step ``dt``; Jacobians are closed-form, so no autodiff graphs
are ever built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

KIND_DOUBLE_INTEGRATOR = 0
KIND_PLANAR_QUADROTOR = 1
KIND_LINEAR = 2

_GRAVITY_DEFAULT = 9.81


@dataclass(frozen=True)
class DynModel:
    """A discrete-time model: transition map plus analytic Jacobians.

    Instances are immutable value objects; use the ``double_integrator``,
    ``planar_quadrotor`` and ``linear`` constructors.
    """

    kind: int
    dt: float
    n_x: int
    n_u: int
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=np.float64))

    @staticmethod
    def double_integrator(dim: int, dt: float) -> "DynModel":
        if dim < 1:
            raise ConfigError(f"double integrator dim must be >= 1, got {dim}")
        return DynModel(kind=KIND_DOUBLE_INTEGRATOR, dt=dt, n_x=2 * dim, n_u=dim)

    @staticmethod
    def planar_quadrotor(
        dt: float,
        mass: float = 0.6,
        arm: float = 0.15,
        inertia: float = 0.01,
        gravity: float = _GRAVITY_DEFAULT,
    ) -> "DynModel":
        if mass <= 0.0:
            raise ConfigError(f"mass must be positive, got {mass}")
        if arm <= 0.0 or inertia <= 0.0:
            raise ConfigError("arm and inertia must be positive")
        params = np.array([mass, arm, inertia, gravity], dtype=np.float64)
        return DynModel(kind=KIND_PLANAR_QUADROTOR, dt=dt, n_x=6, n_u=2, params=params)

    @staticmethod
    def linear(A: np.ndarray, B: np.ndarray, dt: float = 1.0) -> "DynModel":
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"A must be square, got shape {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ConfigError(f"B must be {A.shape[0]}xn_u, got shape {B.shape}")
        n_x, n_u = B.shape
        params = np.concatenate([A.ravel(), B.ravel()])
        return DynModel(kind=KIND_LINEAR, dt=dt, n_x=n_x, n_u=n_u, params=params)

    # model-specific parameter accessors
    @property
    def mass(self) -> float:
        return float(self.params[0])

    @property
    def gravity(self) -> float:
        if self.kind == KIND_PLANAR_QUADROTOR:
            return float(self.params[3])
        return _GRAVITY_DEFAULT

    def hover_control(self) -> np.ndarray:
        """Control holding the model at rest (zero for integrators)."""
        if self.kind == KIND_PLANAR_QUADROTOR:
            return np.full(2, 0.5 * self.mass * self.gravity)
        return np.zeros(self.n_u)


def _check_input(model: DynModel, x: np.ndarray, u: np.ndarray):
    if x.shape != (model.n_x,):
        raise ConfigError(f"state has shape {x.shape}, model expects ({model.n_x},)")
    if u.shape != (model.n_u,):
        raise ConfigError(f"control has shape {u.shape}, model expects ({model.n_u},)")
    if not (np.isfinite(x).all() and np.isfinite(u).all()):
        raise NumericError("non-finite entries in dynamics input")


def step(model: DynModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Advance one timestep: returns f(x, u)."""
    from . import kernels

    x = np.ascontiguousarray(x, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    _check_input(model, x, u)
    out = np.empty(model.n_x)
    kernels.step_one(model.kind, model.params, model.dt, x, u, out)
    return out


def jacobians(model: DynModel, x: np.ndarray, u: np.ndarray):
    """Closed-form A = df/dx and B = df/du evaluated at (x, u)."""
    from . import kernels

    x = np.ascontiguousarray(x, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    _check_input(model, x, u)
    A = np.empty((model.n_x, model.n_x))
    B = np.empty((model.n_x, model.n_u))
    kernels.jac_one(model.kind, model.params, model.dt, x, u, A, B)
    return A, B
