from types import SimpleNamespace

import numpy as np
import pytest

from mandril import reward as rm
from mandril.irl import Demonstrations, irl_gradient
from mandril.mdp import Environment
from mandril.meta import (
    Adam,
    GradientMode,
    MetaConfig,
    NumericFailure,
    UnsupportedModeError,
    average_gradient_pretrain,
    batch_indices,
    covariance_oracle,
    meta_gradient,
    meta_train,
    post_adaptation_test_loss,
    visitation_reward_jacobian_diag,
    visitation_reward_jacobian_fd,
)
from mandril.soft import sample_trajectories, soft_value_iteration, visitation_jvp
from mandril.tasks import TaskSpec, make_tasks
from conftest import micro_grid, micro_instances


def micro_task(seed, horizon=4, k=3):
    """3x3 task whose demos come from a random reward, so train and test sets differ."""
    env = Environment.build(micro_grid(), horizon)
    rng = np.random.default_rng([seed, 99])
    r = rng.normal(size=env.mdp.reward_size)
    trajs = sample_trajectories(env.mdp, soft_value_iteration(env.mdp, r), 2 * k, rng)
    return SimpleNamespace(train_env=env, demos_train=trajs[:k], demos_test=trajs[k:])


def fd_meta(theta, arch, task, cfg, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (post_adaptation_test_loss(theta + e, arch, task, cfg)
                - post_adaptation_test_loss(theta - e, arch, task, cfg)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# -- covariance identity ----------------------------------------------------------

@pytest.mark.parametrize("name,mdp", micro_instances()[1:])
def test_fd_jacobian_equals_enumerated_covariance(name, mdp):
    rng = np.random.default_rng(4)
    r = rng.normal(size=mdp.reward_size)
    C = covariance_oracle(mdp, r)
    J = visitation_reward_jacobian_fd(mdp, r)
    assert np.abs(J - C).max() <= 1e-5
    assert np.abs(C - C.T).max() <= 1e-12
    assert np.linalg.eigvalsh(C).min() >= -1e-8
    np.testing.assert_allclose(visitation_reward_jacobian_diag(mdp, r), np.diag(C), atol=1e-5)
    v = rng.normal(size=mdp.reward_size)
    np.testing.assert_allclose(visitation_jvp(mdp, r, v), C @ v, atol=1e-10)


def test_off_diagonal_covariance_is_not_negligible(mdp3):
    r = np.random.default_rng(0).normal(size=mdp3.reward_size)
    C = covariance_oracle(mdp3, r)
    off = np.abs(C - np.diag(np.diag(C))).sum()
    assert off > np.abs(np.diag(C)).sum()


# -- meta-gradient -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_full_meta_gradient_matches_fd_linear(seed):
    task = micro_task(seed)
    arch = rm.RewardArchitecture("linear", task.train_env.obs.shape[1])
    theta = rm.init_params(arch, seed)
    cfg = MetaConfig(inner_step_size=0.3)
    rep = meta_gradient(theta, arch, task, cfg)
    assert rel_err(rep.total, fd_meta(theta, arch, task, cfg)) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_full_meta_gradient_matches_fd_mlp(seed):
    task = micro_task(seed)
    arch = rm.RewardArchitecture("mlp", task.train_env.obs.shape[1], (4,))
    theta = rm.init_params(arch, seed)
    cfg = MetaConfig(inner_step_size=0.3)
    rep = meta_gradient(theta, arch, task, cfg)
    assert rel_err(rep.total, fd_meta(theta, arch, task, cfg)) <= 1e-2


def test_alpha_zero_gives_plain_test_gradient():
    task = micro_task(1)
    arch = rm.RewardArchitecture("mlp", task.train_env.obs.shape[1], (3,))
    theta = rm.init_params(arch, 2)
    for mode in GradientMode:
        rep = meta_gradient(theta, arch, task, MetaConfig(inner_step_size=0.0, gradient_mode=mode))
        env = task.train_env
        g = irl_gradient(theta, arch, env.obs, env.mdp, task.demos_test).param_space_grad
        assert np.abs(rep.total - g).max() <= 1e-12


def test_mode_decomposition():
    task = micro_task(3)
    arch = rm.RewardArchitecture("mlp", task.train_env.obs.shape[1], (3,))
    theta = rm.init_params(arch, 0)
    full = meta_gradient(theta, arch, task, MetaConfig(inner_step_size=0.2), diagnostics=True)
    np.testing.assert_allclose(full.total, full.first_order_term - full.hessian_term - full.covariance_term,
                               rtol=1e-12, atol=1e-14)
    fo = meta_gradient(theta, arch, task, MetaConfig(inner_step_size=0.2, gradient_mode="first_order"))
    assert np.array_equal(fo.total, full.first_order_term)
    dg = meta_gradient(theta, arch, task, MetaConfig(inner_step_size=0.2, gradient_mode="diag_curvature"))
    np.testing.assert_allclose(dg.total, full.first_order_term - full.hessian_term - full.diag_D_term,
                               rtol=1e-12, atol=1e-14)
    env = task.train_env
    r = rm.forward(arch, theta, env.obs, env.mdp)
    mdp_tr = env.mdp.with_initial(Demonstrations.from_trajectories(env.mdp, task.demos_train).start_dist)
    np.testing.assert_allclose(dg.D_diagonal, np.diag(covariance_oracle(mdp_tr, r)), atol=1e-5)


def test_linear_model_has_no_hessian_term():
    task = micro_task(2)
    arch = rm.RewardArchitecture("linear", task.train_env.obs.shape[1])
    rep = meta_gradient(rm.init_params(arch, 0), arch, task, MetaConfig(inner_step_size=0.2), diagnostics=True)
    assert np.all(rep.hessian_term == 0)


def test_full_mode_rejects_multiple_inner_steps():
    task = micro_task(0)
    arch = rm.RewardArchitecture("linear", task.train_env.obs.shape[1])
    with pytest.raises(UnsupportedModeError):
        meta_gradient(np.zeros(arch.param_count), arch, task, MetaConfig(inner_steps=3))
    rep = meta_gradient(np.zeros(arch.param_count), arch, task, MetaConfig(inner_steps=3, gradient_mode="first_order"))
    assert np.all(np.isfinite(rep.total))


# -- outer loop ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_set():
    spec = TaskSpec(width=5, height=5, horizon=6, num_train_ids=12, num_heldout_ids=2)
    tasks = make_tasks(spec, 5, 3, "train", 4, 4)
    arch = rm.RewardArchitecture("linear", tasks[0].train_env.obs.shape[1])
    return tasks, arch


def test_identical_task_batch_sums(tiny_set):
    tasks, arch = tiny_set
    theta = rm.init_params(arch, 0)
    cfg = MetaConfig(inner_step_size=0.1)
    g1 = meta_gradient(theta, arch, tasks[0], cfg).total
    summed = sum(meta_gradient(theta, arch, tasks[0], cfg).total for _ in range(4))
    np.testing.assert_allclose(summed, 4 * g1, rtol=1e-14)


def test_batch_indices_are_sorted_and_seeded():
    a = batch_indices(3, 7, 100, 16)
    assert np.array_equal(a, np.sort(a)) and np.array_equal(a, batch_indices(3, 7, 100, 16))
    assert not np.array_equal(a, batch_indices(3, 8, 100, 16))


def test_meta_train_is_deterministic_and_resumable(tiny_set):
    tasks, arch = tiny_set
    cfg = MetaConfig(iterations=6, meta_batch_size=3, inner_step_size=0.1, outer_step_size=0.05, seed=5)
    a = meta_train(tasks, arch, cfg)
    b = meta_train(tasks, arch, cfg)
    assert a.theta.tobytes() == b.theta.tobytes()
    half = meta_train(tasks, arch, cfg, stop_after=3)
    assert half.iteration == 3
    resumed = meta_train(tasks, arch, cfg, state=half)
    assert resumed.theta.tobytes() == a.theta.tobytes()
    assert [h["meta_loss"] for h in resumed.history] == [h["meta_loss"] for h in a.history]
    assert all(h["wall_ms"] is None for h in a.history)


def test_meta_training_lowers_meta_loss(tiny_set):
    tasks, arch = tiny_set
    cfg = MetaConfig(iterations=40, meta_batch_size=5, inner_step_size=0.2, outer_step_size=0.05)
    st = meta_train(tasks, arch, cfg)
    assert np.mean([h["meta_loss"] for h in st.history[-5:]]) < np.mean([h["meta_loss"] for h in st.history[:5]])


def test_average_gradient_ignores_alpha(tiny_set):
    tasks, arch = tiny_set
    a = average_gradient_pretrain(tasks, arch, MetaConfig(iterations=4, meta_batch_size=2, inner_step_size=0.1))
    b = average_gradient_pretrain(tasks, arch, MetaConfig(iterations=4, meta_batch_size=2, inner_step_size=0.7))
    assert a.theta.tobytes() == b.theta.tobytes()


def test_numeric_failure_carries_state(tiny_set):
    tasks, arch = tiny_set
    cfg = MetaConfig(iterations=3, meta_batch_size=2, inner_step_size=1e308)
    with pytest.raises(NumericFailure) as info:
        meta_train(tasks, arch, cfg)
    assert info.value.state.iteration == 0


def test_adam_first_step_moves_by_lr():
    opt = Adam(3, 0.1)
    theta = opt.step(np.zeros(3), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(theta, [-0.1, 0.1, -0.1], rtol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(outer_step_size=0.0)
    with pytest.raises(ValueError):
        MetaConfig(meta_batch_size=0)
