"""Embedded oracle suite run by ``mandril selfcheck`` on small enumerable instances."""

from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable

import numpy as np

from . import reward as rm
from .evaluation import expected_value_difference
from .irl import Demonstrations, irl_gradient, irl_loss
from .mdp import Environment, GridObject, GridWorld, TabularMDP, compile_gridworld
from .meta import (
    MetaConfig,
    covariance_oracle,
    meta_gradient,
    post_adaptation_test_loss,
    visitation_reward_jacobian_fd,
)
from .soft import (
    enumerate_trajectories,
    expected_visitations,
    sample_trajectories,
    soft_value_iteration,
    trajectory_log_likelihood,
    visitation_counts,
)


def micro_grid(terrain="dgddgdgdd", goal=4, obstacle=2, start=0) -> GridWorld:
    objs = [GridObject(goal, 0, True)]
    if obstacle is not None:
        objs.append(GridObject(obstacle, 1, False))
    return GridWorld(3, 3, terrain, tuple(objs), start)


def micro_instances() -> list[tuple[str, TabularMDP]]:
    """Small enumerable instances: grids up to 3x3, horizons up to 5, one mixed start."""
    out = []
    g1 = GridWorld(1, 1, "d", (GridObject(0, 0, True),), 0)
    out.append(("1x1-T5", compile_gridworld(g1, 5)[0]))
    g2 = GridWorld(2, 1, "dg", (GridObject(1, 0, True),), 0)
    out.append(("2x1-T5", compile_gridworld(g2, 5)[0]))
    g22 = GridWorld(2, 2, "dggd", (GridObject(3, 0, True),), 1)
    out.append(("2x2-T4", compile_gridworld(g22, 4)[0]))
    out.append(("3x3-T4", compile_gridworld(micro_grid(), 4)[0]))
    out.append(("3x3-T3-centre", compile_gridworld(micro_grid(start=4, goal=8, obstacle=0), 3)[0]))
    p0 = np.array([0.5, 0.0, 0.25, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0])
    m = compile_gridworld(micro_grid(), 3)[0]
    out.append(("3x3-T3-mixed-start", TabularMDP(m.next_state, p0, 3)))
    return out


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    description: str
    tolerance: float
    measured: float
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.check_id:28s} measured={self.measured:.3e}  tol={self.tolerance:.0e}  "
                f"({self.seconds:.2f}s)  {self.description}")


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _fd(f, theta, h):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def _logsumexp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def _rewards(mdp, count=5, seed=0):
    rng = np.random.default_rng([seed, mdp.num_states, mdp.horizon])
    return [rng.normal(scale=2.0, size=mdp.reward_size) for _ in range(count)]


def _enumerated(mdp, r):
    pairs = enumerate_trajectories(mdp, r)
    by_start: dict[int, list] = {}
    for t, R in pairs:
        by_start.setdefault(int(t[0, 0]), []).append(R)
    v1 = {s: _logsumexp(Rs) for s, Rs in by_start.items()}
    logp = [np.log(mdp.initial_dist[t[0, 0]]) + R - v1[int(t[0, 0])] for t, R in pairs]
    return pairs, v1, np.array(logp)


# -- checks: each returns the measured error -------------------------------------

def check_partition() -> float:
    worst = 0.0
    for _, mdp in micro_instances():
        for r in _rewards(mdp):
            sol = soft_value_iteration(mdp, r)
            _, v1, _ = _enumerated(mdp, r)
            for s, v in v1.items():
                worst = max(worst, abs(sol.soft_V[0, s] - v) / max(abs(v), 1e-300))
    return worst


def check_likelihood() -> float:
    worst = 0.0
    for _, mdp in micro_instances():
        for r in _rewards(mdp, 2):
            sol = soft_value_iteration(mdp, r)
            pairs, _, logp = _enumerated(mdp, r)
            for j in range(0, len(pairs), max(1, len(pairs) // 50)):
                ll = trajectory_log_likelihood(mdp, r, pairs[j][0], sol)
                worst = max(worst, abs(ll - logp[j]) / max(abs(logp[j]), 1e-300))
    return worst


def check_visitations() -> float:
    worst = 0.0
    for _, mdp in micro_instances():
        for r in _rewards(mdp):
            pairs, _, logp = _enumerated(mdp, r)
            mu = sum(np.exp(lp) * visitation_counts(mdp, t) for lp, (t, _) in zip(logp, pairs))
            worst = max(worst, _rel(expected_visitations(mdp, soft_value_iteration(mdp, r)), mu))
    return worst


def check_covariance() -> float:
    """max |J_fd - Cov| over instances; asymmetry or negative eigenvalues count as errors."""
    worst = 0.0
    for _, mdp in micro_instances()[1:]:
        r = _rewards(mdp, 1, seed=4)[0] / 2.0
        C = covariance_oracle(mdp, r)
        J = visitation_reward_jacobian_fd(mdp, r)
        worst = max(worst, float(np.abs(J - C).max()))
        if np.abs(C - C.T).max() > 1e-12 or np.linalg.eigvalsh(C).min() < -1e-8:
            return float("inf")
    return worst


def _micro_task(seed, horizon=4, k=3):
    env = Environment.build(micro_grid(), horizon)
    rng = np.random.default_rng([seed, 99])
    r = rng.normal(size=env.mdp.reward_size)
    trajs = sample_trajectories(env.mdp, soft_value_iteration(env.mdp, r), 2 * k, rng)
    return SimpleNamespace(train_env=env, demos_train=trajs[:k], demos_test=trajs[k:])


def check_irl_gradient(variant: str, hidden: tuple) -> Callable[[], float]:
    def run() -> float:
        worst = 0.0
        for seed in range(4):
            task = _micro_task(seed)
            env = task.train_env
            arch = rm.RewardArchitecture(variant, env.obs.shape[1], hidden)
            theta = rm.init_params(arch, seed)
            g = irl_gradient(theta, arch, env.obs, env.mdp, task.demos_train).param_space_grad
            fd = _fd(lambda t: irl_loss(t, arch, env.obs, env.mdp, task.demos_train), theta, 1e-5)
            worst = max(worst, _rel(g, fd))
        return worst
    return run


def check_meta_gradient(variant: str, hidden: tuple, seeds=range(3)) -> Callable[[], float]:
    def run() -> float:
        worst = 0.0
        cfg = MetaConfig(inner_step_size=0.3)
        for seed in seeds:
            task = _micro_task(seed)
            arch = rm.RewardArchitecture(variant, task.train_env.obs.shape[1], hidden)
            theta = rm.init_params(arch, seed)
            g = meta_gradient(theta, arch, task, cfg).total
            fd = _fd(lambda t: post_adaptation_test_loss(t, arch, task, cfg), theta, 1e-5)
            worst = max(worst, _rel(g, fd))
        return worst
    return run


def check_alpha_zero() -> float:
    task = _micro_task(1)
    env = task.train_env
    arch = rm.RewardArchitecture("mlp", env.obs.shape[1], (3,))
    theta = rm.init_params(arch, 2)
    g = meta_gradient(theta, arch, task, MetaConfig(inner_step_size=0.0)).total
    ref = irl_gradient(theta, arch, env.obs, env.mdp, task.demos_test).param_space_grad
    return float(np.abs(g - ref).max())


def check_fixed_point() -> float:
    env = Environment.build(micro_grid(), 4)
    arch = rm.RewardArchitecture("mlp", env.obs.shape[1], (4,))
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(3):
        theta = rm.init_params(arch, rng) * 3
        r = rm.forward(arch, theta, env.obs, env.mdp)
        mu = expected_visitations(env.mdp, soft_value_iteration(env.mdp, r))
        g = irl_gradient(theta, arch, env.obs, env.mdp, Demonstrations.exact(env.mdp, mu))
        worst = max(worst, float(np.abs(g.reward_space_grad).max()))
    return worst


def check_evd_zero() -> float:
    worst = 0.0
    for start in (0, 6):
        env = Environment.build(micro_grid(start=start), 5)
        worst = max(worst, abs(expected_value_difference(env.reward, env)))
    return worst


CHECKS = (
    ("enumeration-partition", "DP log partition per start vs brute-force enumeration (relative)", 1e-9, check_partition),
    ("enumeration-likelihood", "trajectory log-likelihoods vs enumeration (relative)", 1e-9, check_likelihood),
    ("enumeration-visitations", "expected visitations vs enumeration (relative)", 1e-9, check_visitations),
    ("appendix-E-covariance", "FD Jacobian of E[mu] vs enumerated Cov[mu_tau] (max abs)", 1e-5, check_covariance),
    ("irl-gradient-fd-linear", "IRL gradient vs central differences, linear (relative)", 1e-5,
     check_irl_gradient("linear", ())),
    ("irl-gradient-fd-mlp", "IRL gradient vs central differences, MLP (relative)", 1e-4,
     check_irl_gradient("mlp", (4,))),
    ("eq9-meta-gradient-fd", "full meta-gradient vs end-to-end differences, linear (relative)", 1e-4,
     check_meta_gradient("linear", ())),
    ("eq9-meta-gradient-fd-mlp", "full meta-gradient vs end-to-end differences, MLP (relative)", 1e-2,
     check_meta_gradient("mlp", (4,))),
    ("meta-gradient-alpha-zero", "alpha = 0 meta-gradient vs plain test gradient (max abs)", 1e-12, check_alpha_zero),
    ("expert-fixed-point", "IRL gradient at exact expert visitations (max abs)", 1e-9, check_fixed_point),
    ("evd-true-reward", "EVD of the true reward", 0.0, check_evd_zero),
)


def run_selfcheck(emit: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for cid, desc, tol, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            with np.errstate(all="ignore"):
                err = float(fn())
        except Exception as exc:  # a crash is a failed check, not a crashed report
            err = float("inf")
            desc = f"{desc} [error: {type(exc).__name__}: {exc}]"
        res = CheckResult(cid, desc, tol, err, bool(np.isfinite(err) and err <= tol), time.perf_counter() - t0)
        results.append(res)
        if emit is not None:
            emit(res.line())
    return results
