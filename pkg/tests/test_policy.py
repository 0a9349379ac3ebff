import numpy as np
import pytest
import torch

from fusedmpc import ConfigError, SolveSettings
from fusedmpc import policy as pol
from fusedmpc.batchexec import WorkerPool
from fusedmpc.dynamics import DynModel
from fusedmpc.policy import (
    CostHeadScaling,
    MpcSolver,
    PolicyBundle,
    act,
    actor_forward,
    critic_forward,
    load_checkpoint,
    mpc_control,
    save_checkpoint,
)
from fusedmpc.qcost import EPS_REG


@pytest.fixture(scope="module")
def pool():
    p = WorkerPool(2)
    yield p
    p.shutdown()


def quad_setup(T=3, hidden=(16, 16)):
    model = DynModel.planar_quadrotor(dt=0.05)
    settings = SolveSettings(T=T, u_min=np.zeros(2), u_max=np.full(2, 6.0), K_max=3)
    scaling = CostHeadScaling.default(model.n_x + model.n_u)
    bundle = PolicyBundle("ac_mpc", 11, model, settings, scaling, hidden=hidden)
    return model, settings, scaling, bundle


def zero_parameters(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_zero_weights_give_midpoint_parameters():
    model, settings, scaling, bundle = quad_setup()
    zero_parameters(bundle.actor)
    p = actor_forward(bundle, np.zeros(11))
    mid_diag = 0.5 * (scaling.diag_lo + scaling.diag_hi)
    mid_c = 0.5 * (scaling.c_lo + scaling.c_hi)
    for t in range(settings.T):
        np.testing.assert_allclose(np.diag(p.C[t]), mid_diag, rtol=1e-6)
        np.testing.assert_allclose(p.c[t], mid_c, rtol=1e-6)


def test_actor_outputs_always_within_bounds():
    model, settings, scaling, bundle = quad_setup()
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for p in bundle.actor.parameters():
            p.copy_(torch.tensor(rng.normal(size=p.shape) * 3.0, dtype=torch.float32))
    for _ in range(20):
        p = actor_forward(bundle, rng.normal(size=11))
        d = np.diagonal(p.C, axis1=1, axis2=2)
        assert (d >= scaling.diag_lo - 1e-9).all() and (d <= scaling.diag_hi + 1e-9).all()
        assert (p.c >= scaling.c_lo - 1e-6).all() and (p.c <= scaling.c_hi + 1e-6).all()


def test_hover_centered_scaling():
    model = DynModel.planar_quadrotor(dt=0.05)
    s = CostHeadScaling.for_model(model, model.n_x)
    mid_c = 0.5 * (s.c_lo + s.c_hi)
    expect = -0.5 * (1e-3 + 10.0) * model.hover_control()
    np.testing.assert_allclose(mid_c[model.n_x:], expect, rtol=1e-12)
    np.testing.assert_allclose(mid_c[:model.n_x], 0.0, atol=1e-12)


def test_actor_gradient_matches_finite_differences():
    _, settings, _, bundle = quad_setup(hidden=(8,))
    bundle = bundle.double()
    obs = torch.tensor(np.random.default_rng(1).normal(size=11), dtype=torch.float64)
    w = np.random.default_rng(2).normal(size=(settings.T, 8))

    def scalar_out():
        diag, cvec = bundle.actor(obs[None])
        return (diag[0] * torch.tensor(w)).sum() + (cvec[0] * torch.tensor(w)).sum()

    loss = scalar_out()
    loss.backward()
    params = list(bundle.actor.parameters())
    eps = 1e-6
    rng = np.random.default_rng(3)
    for p in params:
        flat = p.detach().view(-1)
        for _ in range(3):
            j = int(rng.integers(flat.numel()))
            with torch.no_grad():
                flat[j] += eps
                up = float(scalar_out())
                flat[j] -= 2 * eps
                dn = float(scalar_out())
                flat[j] += eps
            fd = (up - dn) / (2 * eps)
            an = float(p.grad.view(-1)[j])
            assert abs(fd - an) <= 1e-3 * max(1.0, abs(fd))


def test_critic_zero_weights():
    _, _, _, bundle = quad_setup()
    zero_parameters(bundle.critic)
    assert critic_forward(bundle, np.ones(11)) == 0.0


def test_critic_linear_passthrough_hand_value():
    # identity-like hidden layers turn the critic into a known affine map
    _, _, _, bundle = quad_setup(hidden=(11, 11))
    with torch.no_grad():
        for layer in (bundle.critic.net[0], bundle.critic.net[2]):
            layer.weight.copy_(torch.eye(11))
            layer.bias.zero_()
        w = torch.arange(1.0, 12.0)
        bundle.critic.net[4].weight.copy_(w[None])
        bundle.critic.net[4].bias.fill_(0.5)
    obs = np.full(11, 2.0)  # positive entries pass ReLU unchanged
    expected = float((2.0 * w).sum()) + 0.5
    assert critic_forward(bundle, obs) == pytest.approx(expected, rel=1e-6)


def test_critic_batch_consistency():
    _, _, _, bundle = quad_setup()
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(5, 11))
    batch = critic_forward(bundle, obs)
    singles = np.array([critic_forward(bundle, o) for o in obs])
    np.testing.assert_allclose(batch, singles, rtol=1e-6)


def test_act_deterministic_mode(pool):
    model, settings, _, bundle = quad_setup()
    solver = MpcSolver(model, settings, pool)
    rng = np.random.default_rng(5)
    a = act(bundle, np.zeros(11), np.zeros(6), solver, explore=False, rng=rng)
    assert np.array_equal(a.u_sampled, a.u_mpc)
    assert np.isfinite(a.log_prob)


def test_act_sigma_zero_limit(pool):
    model, settings, _, bundle = quad_setup()
    with torch.no_grad():
        bundle.log_sigma.fill_(-20.0)
    solver = MpcSolver(model, settings, pool)
    a = act(bundle, np.zeros(11), np.zeros(6), solver, explore=True,
            rng=np.random.default_rng(6))
    np.testing.assert_allclose(a.u_sampled, a.u_mpc, atol=1e-6)


def test_act_fixed_seed_is_reproducible(pool):
    model, settings, _, bundle = quad_setup()
    actions = []
    for _ in range(2):
        solver = MpcSolver(model, settings, pool)
        a = act(bundle, 0.1 * np.ones(11), np.zeros(6), solver, explore=True,
                rng=np.random.default_rng(7))
        actions.append(a)
    assert np.array_equal(actions[0].u_sampled, actions[1].u_sampled)
    assert actions[0].log_prob == actions[1].log_prob
    assert np.array_equal(actions[0].u_mpc, actions[1].u_mpc)


def test_act_clamps_samples_to_bounds(pool):
    model, settings, _, bundle = quad_setup()
    with torch.no_grad():
        bundle.log_sigma.fill_(3.0)  # huge exploration noise
    solver = MpcSolver(model, settings, pool)
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = act(bundle, np.zeros(11), np.zeros(6), solver, explore=True, rng=rng)
        assert (a.u_sampled >= 0.0).all() and (a.u_sampled <= 6.0).all()
        assert np.isfinite(a.log_prob)


def test_log_prob_gradient_through_solver(pool):
    # d log pi / d theta via the implicit layer matches finite differences
    model, settings, _, bundle = quad_setup(hidden=(6,))
    bundle = bundle.double()
    solver = MpcSolver(model, settings, pool)
    obs = torch.tensor(0.3 * np.ones((2, 11)))
    x_init = 0.2 * np.ones((2, 6))
    U_warm = np.tile(model.hover_control(), (2, settings.T, 1))
    action = torch.tensor(np.array([[2.0, 3.0], [3.0, 2.0]]))

    def logp():
        u = mpc_control(bundle, obs, solver, x_init, U_warm)
        dist = torch.distributions.Normal(u, torch.exp(bundle.log_sigma))
        return dist.log_prob(action).sum()

    loss = logp()
    loss.backward()
    first_linear = bundle.actor.net[0]
    eps = 1e-6
    flat = first_linear.weight.detach().view(-1)
    rng = np.random.default_rng(9)
    for _ in range(4):
        j = int(rng.integers(flat.numel()))
        with torch.no_grad():
            flat[j] += eps
            up = float(logp())
            flat[j] -= 2 * eps
            dn = float(logp())
            flat[j] += eps
        fd = (up - dn) / (2 * eps)
        an = float(first_linear.weight.grad.view(-1)[j])
        assert abs(fd - an) <= 1e-3 * max(1e-4, abs(fd))


def test_checkpoint_round_trip(tmp_path, pool):
    model, settings, _, bundle = quad_setup()
    opt = torch.optim.Adam(bundle.parameters(), lr=1e-3)
    # one step so the optimizer has state
    diag, cvec = bundle.actor(torch.zeros(1, 11))
    (diag.sum() + cvec.sum() + bundle.critic(torch.zeros(1, 11)).sum()
     + bundle.log_sigma.sum()).backward()
    opt.step()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, bundle, step=1234, config={"a": 1}, optimizer=opt)
    loaded, step, meta, opt_arrays = load_checkpoint(path, model, settings)
    assert step == 1234 and meta["mode"] == "ac_mpc"
    obs = np.full(11, 0.3)
    p0 = actor_forward(bundle, obs)
    p1 = actor_forward(loaded, obs)
    np.testing.assert_array_equal(p0.C, p1.C)
    np.testing.assert_array_equal(p0.c, p1.c)
    assert critic_forward(bundle, obs) == critic_forward(loaded, obs)
    assert any(k.endswith("exp_avg") for k in opt_arrays)


def test_checkpoint_rejects_mismatched_dims(tmp_path, pool):
    model, settings, _, bundle = quad_setup()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, bundle, step=0, config={})
    other = SolveSettings(T=9, u_min=np.zeros(2), u_max=np.full(2, 6.0))
    with pytest.raises(ConfigError):
        load_checkpoint(path, model, other)


def test_scaling_validation():
    with pytest.raises(ConfigError):
        CostHeadScaling.default(4, diag_lo=0.0)
    with pytest.raises(ConfigError):
        CostHeadScaling.default(4, c_lo=5.0, c_hi=-5.0)
    assert CostHeadScaling.default(4).diag_lo.min() >= EPS_REG


def test_bundle_mode_validation():
    model = DynModel.planar_quadrotor(dt=0.05)
    settings = SolveSettings(T=2, u_min=np.zeros(2), u_max=np.full(2, 6.0))
    with pytest.raises(ConfigError):
        PolicyBundle("bad", 11, model, settings, CostHeadScaling.default(8))


def test_default_network_shape():
    model = DynModel.planar_quadrotor(dt=0.05)
    settings = SolveSettings(T=2, u_min=np.zeros(2), u_max=np.full(2, 6.0))
    bundle = PolicyBundle("ac_mpc", 11, model, settings, CostHeadScaling.default(8))
    assert bundle.actor_spec.hidden == (512, 512)
    assert bundle.actor_spec.head == "cost"
    assert bundle.critic_spec.head == "value"
    # two hidden ReLU layers and a sigmoid-scaled output head
    assert bundle.actor.net[0].out_features == 512
    assert bundle.actor.net[2].out_features == 512
    assert bundle.actor.net[4].out_features == settings.T * 2 * 8
    assert bundle.critic.net[4].out_features == 1
