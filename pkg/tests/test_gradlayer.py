import numpy as np
import pytest

from fusedmpc import SolveSettings, StageCostParams, dynamics, gradlayer, ilqr
from fusedmpc.dynamics import DynModel

BIG = 1e9


def random_linear_instance(rng, n_x=3, n_u=2, T=5):
    A = np.eye(n_x) + 0.1 * rng.normal(size=(n_x, n_x))
    B = 0.5 * rng.normal(size=(n_x, n_u))
    model = DynModel.linear(A, B)
    n_z = n_x + n_u
    M = rng.normal(size=(T, n_z, n_z))
    C = 0.3 * np.einsum("tij,tkj->tik", M, M) + 0.8 * np.eye(n_z)
    c = 0.3 * rng.normal(size=(T, n_z))
    x0 = 0.5 * rng.normal(size=n_x)
    return model, C, c, x0, T


def solve_instance(model, C, c, x0, T, K_max=3, u_lim=BIG):
    n_u = model.n_u
    p = StageCostParams(C, c, model.n_x)
    settings = SolveSettings(T=T, u_min=-u_lim * np.ones(n_u),
                             u_max=u_lim * np.ones(n_u), K_max=K_max)
    res = ilqr.solve(model, x0, p, np.zeros((T, n_u)), settings)
    return res, p


def u0_loss_seed(res, u_ref, T, n_x, n_u):
    seed = gradlayer.BackwardSeed(np.zeros((T + 1, n_x)), np.zeros((T, n_u)))
    seed.dL_dU[0] = res.traj.U[0] - u_ref
    return seed


def test_zero_seed_gives_zero_gradients():
    rng = np.random.default_rng(0)
    model, C, c, x0, T = random_linear_instance(rng)
    res, p = solve_instance(model, C, c, x0, T)
    lin = ilqr.linearize(model, res.traj)
    seed = gradlayer.BackwardSeed(np.zeros((T + 1, 3)), np.zeros((T, 2)))
    g = gradlayer.backward(res, lin, p, seed)
    assert np.array_equal(g.dC, np.zeros_like(g.dC))
    assert np.array_equal(g.dc, np.zeros_like(g.dc))
    assert np.array_equal(g.dx_init, np.zeros(3))
    assert not g.approximate


def test_linearity_in_seed():
    rng = np.random.default_rng(1)
    model, C, c, x0, T = random_linear_instance(rng)
    res, p = solve_instance(model, C, c, x0, T)
    lin = ilqr.linearize(model, res.traj)
    s1 = gradlayer.BackwardSeed(rng.normal(size=(T + 1, 3)), rng.normal(size=(T, 2)))
    s2 = gradlayer.BackwardSeed(rng.normal(size=(T + 1, 3)), rng.normal(size=(T, 2)))
    s12 = gradlayer.BackwardSeed(s1.dL_dX + s2.dL_dX, s1.dL_dU + s2.dL_dU)
    g1 = gradlayer.backward(res, lin, p, s1)
    g2 = gradlayer.backward(res, lin, p, s2)
    g12 = gradlayer.backward(res, lin, p, s12)
    np.testing.assert_allclose(g12.dC, g1.dC + g2.dC, atol=1e-12)
    np.testing.assert_allclose(g12.dc, g1.dc + g2.dc, atol=1e-12)
    np.testing.assert_allclose(g12.dx_init, g1.dx_init + g2.dx_init, atol=1e-12)


def test_dC_exactly_symmetric():
    rng = np.random.default_rng(2)
    model, C, c, x0, T = random_linear_instance(rng)
    res, p = solve_instance(model, C, c, x0, T)
    lin = ilqr.linearize(model, res.traj)
    seed = gradlayer.BackwardSeed(rng.normal(size=(T + 1, 3)), rng.normal(size=(T, 2)))
    g = gradlayer.backward(res, lin, p, seed)
    for t in range(T):
        assert np.array_equal(g.dC[t], g.dC[t].T)


def test_clamped_dimensions_have_zero_gradients():
    # drive one control to its bound at every stage via a large linear term
    model = DynModel.double_integrator(2, dt=0.1)
    T, n_x, n_u = 4, 4, 2
    n_z = n_x + n_u
    diag = np.tile(np.ones(n_z), (T, 1))
    c = np.zeros((T, n_z))
    c[:, n_x] = -100.0  # pushes control 0 far above its bound
    p = StageCostParams.from_diag(diag, c, n_x)
    settings = SolveSettings(T=T, u_min=-np.ones(n_u), u_max=np.ones(n_u), K_max=8)
    res = ilqr.solve(model, np.zeros(n_x), p, np.zeros((T, n_u)), settings)
    assert res.clamped_mask[:, 0].all()
    lin = ilqr.linearize(model, res.traj)
    rng = np.random.default_rng(3)
    seed = gradlayer.BackwardSeed(rng.normal(size=(T + 1, n_x)), rng.normal(size=(T, n_u)))
    g = gradlayer.backward(res, lin, p, seed)
    assert np.array_equal(g.dc[:, n_x], np.zeros(T))
    assert np.array_equal(g.dC[:, n_x, :], np.zeros((T, n_z)))
    assert np.array_equal(g.dC[:, :, n_x], np.zeros((T, n_z)))


def fd_check(rng, n_inst=3, tol=1e-3):
    u_ref = np.array([0.3, -0.2])
    worst = 0.0
    for _ in range(n_inst):
        model, C, c, x0, T = random_linear_instance(rng)

        def loss_of(Cm, cm, x0m):
            res, _ = solve_instance(model, Cm, cm, x0m, T)
            return 0.5 * np.sum((res.traj.U[0] - u_ref) ** 2)

        res, p = solve_instance(model, C, c, x0, T)
        assert res.converged
        lin = ilqr.linearize(model, res.traj)
        g = gradlayer.backward(res, lin, p, u0_loss_seed(res, u_ref, T, 3, 2))
        eps = 1e-5
        for t in range(T):
            for j in range(5):
                cp, cm = c.copy(), c.copy()
                cp[t, j] += eps
                cm[t, j] -= eps
                fd = (loss_of(C, cp, x0) - loss_of(C, cm, x0)) / (2 * eps)
                worst = max(worst, abs(fd - g.dc[t, j]) / max(1e-6, abs(fd)))
                Cp, Cm = C.copy(), C.copy()
                Cp[t, j, j] += eps
                Cm[t, j, j] -= eps
                fd = (loss_of(Cp, c, x0) - loss_of(Cm, c, x0)) / (2 * eps)
                worst = max(worst, abs(fd - g.dC[t, j, j]) / max(1e-6, abs(fd)))
        for j in range(3):
            xp, xm = x0.copy(), x0.copy()
            xp[j] += eps
            xm[j] -= eps
            fd = (loss_of(C, c, xp) - loss_of(C, c, xm)) / (2 * eps)
            worst = max(worst, abs(fd - g.dx_init[j]) / max(1e-6, abs(fd)))
    assert worst <= tol, f"worst relative FD error {worst}"


def test_finite_difference_agreement():
    fd_check(np.random.default_rng(4), n_inst=3)


def test_iteration_count_independence():
    rng = np.random.default_rng(5)
    model, C, c, x0, T = random_linear_instance(rng)
    res5, p = solve_instance(model, C, c, x0, T, K_max=5)
    res50, _ = solve_instance(model, C, c, x0, T, K_max=50)
    seed = gradlayer.BackwardSeed(rng.normal(size=(T + 1, 3)), rng.normal(size=(T, 2)))
    g5 = gradlayer.backward(res5, ilqr.linearize(model, res5.traj), p, seed)
    g50 = gradlayer.backward(res50, ilqr.linearize(model, res50.traj), p, seed)
    np.testing.assert_allclose(g5.dC, g50.dC, atol=1e-10)
    np.testing.assert_allclose(g5.dc, g50.dc, atol=1e-10)
    np.testing.assert_allclose(g5.dx_init, g50.dx_init, atol=1e-10)


def test_nonconverged_solve_flags_approximate():
    rng = np.random.default_rng(6)
    model = DynModel.planar_quadrotor(dt=0.05)
    T, n_z = 6, 8
    diag = rng.uniform(0.1, 2.0, size=(T, n_z))
    c = rng.normal(size=(T, n_z)) * 2.0
    p = StageCostParams.from_diag(diag, c, 6)
    settings = SolveSettings(T=T, u_min=np.zeros(2), u_max=np.full(2, 12.0),
                             K_max=1, conv_tol=0.0)
    res = ilqr.solve(model, rng.normal(size=6) * 0.4, p, np.ones((T, 2)), settings)
    assert not res.converged
    lin = ilqr.linearize(model, res.traj)
    seed = gradlayer.BackwardSeed(np.zeros((T + 1, 6)), np.zeros((T, 2)))
    seed.dL_dU[0] = 1.0
    g = gradlayer.backward(res, lin, p, seed)
    assert g.approximate
    assert np.isfinite(g.dc).all()


def test_seed_shape_validation():
    rng = np.random.default_rng(7)
    model, C, c, x0, T = random_linear_instance(rng)
    res, p = solve_instance(model, C, c, x0, T)
    lin = ilqr.linearize(model, res.traj)
    with pytest.raises(Exception):
        gradlayer.backward(res, lin, p,
                           gradlayer.BackwardSeed(np.zeros((T + 1, 4)), np.zeros((T, 2))))
