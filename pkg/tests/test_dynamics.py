import numpy as np
import pytest
import sympy

from fusedmpc import ConfigError, NumericError, dynamics
from fusedmpc.dynamics import DynModel

from oracles import fd_jacobians


def test_double_integrator_zero_dynamics_fixed_point():
    m = DynModel.double_integrator(1, dt=0.1)
    out = dynamics.step(m, np.array([0.0, 0.0]), np.array([0.0]))
    assert np.array_equal(out, np.array([0.0, 0.0]))


def test_double_integrator_hand_euler():
    m = DynModel.double_integrator(1, dt=0.1)
    out = dynamics.step(m, np.array([1.0, 2.0]), np.array([3.0]))
    np.testing.assert_allclose(out, [1.2, 2.3], rtol=0, atol=1e-15)


def test_quadrotor_hover_is_fixed_point():
    m = DynModel.planar_quadrotor(dt=0.05)
    x = np.zeros(6)
    out = dynamics.step(m, x, m.hover_control())
    np.testing.assert_allclose(out, x, atol=1e-14)


def test_double_integrator_jacobian_constant():
    m = DynModel.double_integrator(1, dt=0.1)
    for x, u in [(np.zeros(2), np.zeros(1)), (np.array([3.0, -2.0]), np.array([5.0]))]:
        A, B = dynamics.jacobians(m, x, u)
        np.testing.assert_array_equal(A, [[1.0, 0.1], [0.0, 1.0]])
        np.testing.assert_array_equal(B, [[0.0], [0.1]])


def test_quadrotor_jacobians_match_finite_differences():
    m = DynModel.planar_quadrotor(dt=0.05)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-2.0, 2.0, size=6)
        u = rng.uniform(0.0, 8.0, size=2)
        A, B = dynamics.jacobians(m, x, u)
        Af, Bf = fd_jacobians(m, x, u, h=1e-6)
        assert np.abs(A - Af).max() < 1e-6
        assert np.abs(B - Bf).max() < 1e-6


def test_quadrotor_thrust_tilt_term_matches_symbolic():
    # independent derivation of the v_x'/theta sensitivity at theta = 0
    m = DynModel.planar_quadrotor(dt=0.05, mass=0.7)
    th, u1, u2, dt_s, mass = sympy.symbols("theta u1 u2 dt m")
    vx_next = -dt_s * (u1 + u2) * sympy.sin(th) / mass
    expected = sympy.diff(vx_next, th).subs({th: 0, u1: 2.0, u2: 3.0, dt_s: m.dt, mass: m.mass})
    x = np.zeros(6)
    A, _ = dynamics.jacobians(m, x, np.array([2.0, 3.0]))
    assert abs(A[3, 2] - float(expected)) < 1e-12
    assert abs(A[3, 2] - (-m.dt * 5.0 / m.mass)) < 1e-12


@pytest.mark.parametrize("make", [
    lambda: DynModel.double_integrator(2, dt=0.1),
    lambda: DynModel.planar_quadrotor(dt=0.05),
    lambda: DynModel.linear(np.array([[0.9, 0.1], [0.0, 1.1]]), np.array([[0.0], [0.5]])),
])
def test_jacobian_finite_difference_property(make):
    m = make()
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        x = rng.uniform(-2.0, 2.0, size=m.n_x)
        u = rng.uniform(-3.0, 3.0, size=m.n_u)
        A, B = dynamics.jacobians(m, x, u)
        Af, Bf = fd_jacobians(m, x, u, h=1e-6)
        worst = max(worst, np.abs(A - Af).max(), np.abs(B - Bf).max())
    assert worst <= 1e-5


def test_step_deterministic_bitwise():
    m = DynModel.planar_quadrotor(dt=0.05)
    x = np.array([0.3, -0.7, 0.2, 1.0, -0.4, 0.6])
    u = np.array([2.5, 3.5])
    a = dynamics.step(m, x, u)
    b = dynamics.step(m, x, u)
    assert np.array_equal(a, b)


def test_dimension_mismatch_raises_config_error():
    m = DynModel.double_integrator(1, dt=0.1)
    with pytest.raises(ConfigError):
        dynamics.step(m, np.zeros(3), np.zeros(1))
    with pytest.raises(ConfigError):
        dynamics.jacobians(m, np.zeros(2), np.zeros(2))


def test_nonfinite_input_raises_numeric_error():
    m = DynModel.double_integrator(1, dt=0.1)
    with pytest.raises(NumericError):
        dynamics.step(m, np.array([np.nan, 0.0]), np.zeros(1))


def test_model_validation():
    with pytest.raises(ConfigError):
        DynModel.double_integrator(0, dt=0.1)
    with pytest.raises(ConfigError):
        DynModel.planar_quadrotor(dt=-0.1)
    with pytest.raises(ConfigError):
        DynModel.planar_quadrotor(dt=0.1, mass=0.0)
    with pytest.raises(ConfigError):
        DynModel.linear(np.zeros((2, 3)), np.zeros((2, 1)))
