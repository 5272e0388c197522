"""MaxEnt IRL loss, gradient and the plain gradient-descent inner loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import reward as rm
from .mdp import ContractError, TabularMDP
from .soft import SoftSolution, demo_visitations, expected_visitations, soft_value_iteration


class AdaptationDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"inner-loop gradient became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class Demonstrations:
    """Sufficient statistics of a demonstration set.

    ``visitations`` is the mean state-action visitation vector and
    ``start_dist`` the empirical distribution of start states. Built either from
    trajectories or, when the expert's exact visitations are known, from those
    directly.
    """

    visitations: np.ndarray
    start_dist: np.ndarray
    count: int = 0

    @classmethod
    def from_trajectories(cls, mdp: TabularMDP, trajs: Sequence) -> "Demonstrations":
        if len(trajs) == 0:
            raise ContractError("demonstration set is empty")
        for k, t in enumerate(trajs):
            if len(t) != mdp.horizon:
                raise ContractError(f"demonstration {k} has length {len(t)}, horizon is {mdp.horizon}")
        mu = demo_visitations(mdp, trajs)
        starts = np.array([int(t[0][0]) for t in trajs])
        p = np.bincount(starts, minlength=mdp.num_states) / len(trajs)
        return cls(mu, p, len(trajs))

    @classmethod
    def exact(cls, mdp: TabularMDP, visitations, start_dist=None) -> "Demonstrations":
        mu = np.asarray(visitations, dtype=np.float64)
        if mu.shape != (mdp.reward_size,):
            raise ContractError("visitation vector does not match the MDP")
        p = mdp.initial_dist if start_dist is None else np.asarray(start_dist, dtype=np.float64)
        if p.shape != (mdp.num_states,):
            raise ContractError("start distribution does not match the MDP")
        return cls(mu, p, 0)

    @classmethod
    def pooled(cls, parts: Sequence["Demonstrations"]) -> "Demonstrations":
        """Equal-weight mixture of demonstration sets."""
        mu = np.mean([d.visitations for d in parts], axis=0)
        p = np.mean([d.start_dist for d in parts], axis=0)
        return cls(mu, p, sum(d.count for d in parts))


DemoLike = Union[Demonstrations, Sequence]


def as_demonstrations(mdp: TabularMDP, demos: DemoLike) -> Demonstrations:
    if isinstance(demos, Demonstrations):
        return demos
    return Demonstrations.from_trajectories(mdp, demos)


@dataclass(frozen=True, eq=False)
class IrlGradient:
    reward_space_grad: np.ndarray
    param_space_grad: np.ndarray
    loss: float
    solution: SoftSolution


def conditioned(mdp: TabularMDP, d: Demonstrations) -> TabularMDP:
    """``mdp`` with its start distribution replaced by the demonstrations' own."""
    if np.array_equal(mdp.initial_dist, d.start_dist):
        return mdp
    return mdp.with_initial(d.start_dist)


def _nll(r: np.ndarray, sol: SoftSolution, d: Demonstrations) -> float:
    # mean of V_1(s_1) - R(tau) over the demonstrations
    return sol.log_Z - float(d.visitations @ r)


def irl_loss(theta, arch: rm.RewardArchitecture, feats, mdp: TabularMDP, demos: DemoLike,
             weight_decay: float = 0.0) -> float:
    """Mean negative log-likelihood of the demonstrations given their start states."""
    d = as_demonstrations(mdp, demos)
    r = rm.forward(arch, theta, feats, mdp)
    loss = _nll(r, soft_value_iteration(conditioned(mdp, d), r), d)
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.dot(theta, theta))
    return loss


def irl_gradient(theta, arch: rm.RewardArchitecture, feats, mdp: TabularMDP, demos: DemoLike,
                 weight_decay: float = 0.0) -> IrlGradient:
    d = as_demonstrations(mdp, demos)
    theta = np.asarray(theta, dtype=np.float64)
    r = rm.forward(arch, theta, feats, mdp)
    mdp = conditioned(mdp, d)
    sol = soft_value_iteration(mdp, r)
    g_r = expected_visitations(mdp, sol) - d.visitations
    g_theta = rm.vjp(arch, theta, feats, mdp, g_r)
    loss = _nll(r, sol, d)
    if weight_decay:
        g_theta = g_theta + weight_decay * theta
        loss += 0.5 * weight_decay * float(theta @ theta)
    return IrlGradient(g_r, g_theta, loss, sol)


def adapt(theta, arch: rm.RewardArchitecture, feats, mdp: TabularMDP, demos: DemoLike,
          step_size: float, num_steps: int, weight_decay: float = 0.0) -> np.ndarray:
    """``num_steps`` plain gradient-descent steps from ``theta``; returns a new vector."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if step_size < 0:
        raise ValueError("step_size must be non-negative")
    d = as_demonstrations(mdp, demos)
    phi = np.array(theta, dtype=np.float64, copy=True)
    for step in range(num_steps):
        g = irl_gradient(phi, arch, feats, mdp, d, weight_decay).param_space_grad
        with np.errstate(over="ignore", invalid="ignore"):
            phi = phi - step_size * g
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(phi))):
            raise AdaptationDiverged(step)
    return phi
