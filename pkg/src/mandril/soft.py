"""Finite-horizon maximum-entropy forward solver.

Trajectories are modelled conditionally on their start state,
``P(tau) = p0(s_1) exp(R(tau) - V_1(s_1))`` with
``R(tau) = sum_t gamma^(t-1) r(s_t, a_t)`` and ``V_1(s) = log sum_{tau from s} exp(R(tau))``,
so ``log_Z = sum_s p0(s) V_1(s)``; for a point-mass start this is the plain log
partition function. Everything is computed in log space. Visitation vectors
count ``gamma^(t-1)``-weighted occurrences of each state-action pair, so they are
exactly the gradient of ``log_Z`` with respect to the reward; with the default
``gamma = 1`` they are plain counts summing to T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import ContractError, TabularMDP, as_trajectory, validate_trajectory

DEFAULT_ENUMERATION_CAP = 10**6


class NumericInputError(ValueError):
    pass


class OracleTooLargeError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SoftSolution:
    soft_V: np.ndarray  # (T, S), row t is time t+1
    soft_Q: np.ndarray  # (T, S, A)
    policy: np.ndarray  # (T, S, A)
    log_Z: float
    start_dist: np.ndarray  # (S,) the MDP's initial distribution


def _check_reward(mdp: TabularMDP, reward) -> np.ndarray:
    r = np.asarray(reward, dtype=np.float64)
    if r.shape != (mdp.reward_size,):
        raise ContractError(f"reward must have length {mdp.reward_size}, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise NumericInputError("reward contains non-finite entries")
    return r.reshape(mdp.num_states, mdp.num_actions)


def _logsumexp_rows(Q: np.ndarray) -> np.ndarray:
    m = Q.max(axis=1)
    return m + np.log(np.exp(Q - m[:, None]).sum(axis=1))


def soft_value_iteration(mdp: TabularMDP, reward) -> SoftSolution:
    r = _check_reward(mdp, reward)
    T, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    w = mdp.time_weights()
    Q = np.empty((T, S, A))
    V = np.empty((T, S))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        Q[t] = w[t] * r + v_next[mdp.next_state]
        V[t] = _logsumexp_rows(Q[t])
        v_next = V[t]
    policy = np.exp(Q - V[:, :, None])
    p0 = mdp.initial_dist
    log_Z = float(p0 @ V[0])
    return SoftSolution(V, Q, policy, log_Z, p0)


def _push(mdp: TabularMDP, x: np.ndarray) -> np.ndarray:
    """State distribution after one step given state-action mass ``x`` (S, A)."""
    return np.bincount(mdp.next_state.ravel(), weights=x.ravel(), minlength=mdp.num_states)


def occupancy(mdp: TabularMDP, sol: SoftSolution) -> np.ndarray:
    """Per-time-step state-action occupancy, shape (T, S, A); each slice sums to 1."""
    if sol.policy.shape != (mdp.horizon, mdp.num_states, mdp.num_actions):
        raise ContractError("solution does not match the MDP")
    occ = np.empty_like(sol.policy)
    d = sol.start_dist
    for t in range(mdp.horizon):
        occ[t] = d[:, None] * sol.policy[t]
        d = _push(mdp, occ[t])
    return occ


def expected_visitations(mdp: TabularMDP, sol: SoftSolution) -> np.ndarray:
    occ = occupancy(mdp, sol)
    return np.tensordot(mdp.time_weights(), occ, axes=1).ravel()


def visitation_jvp(mdp: TabularMDP, reward, direction, sol: SoftSolution | None = None) -> np.ndarray:
    """Exact directional derivative of the expected visitations w.r.t. the reward.

    Returns ``(dE[mu]/dr) @ direction``, i.e. ``Cov[mu_tau] @ direction``
    (covariance given the start state, averaged over starts), by propagating tangents through the backward soft recursion and the
    forward occupancy pass.
    """
    r = _check_reward(mdp, reward)
    if sol is None:
        sol = soft_value_iteration(mdp, reward)
    dr = np.asarray(direction, dtype=np.float64).reshape(r.shape)
    T, S = mdp.horizon, mdp.num_states
    w = mdp.time_weights()
    pi = sol.policy
    dpi = np.empty_like(pi)
    dv_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        dQ = w[t] * dr + dv_next[mdp.next_state]
        dV = np.sum(pi[t] * dQ, axis=1)
        dpi[t] = pi[t] * (dQ - dV[:, None])
        dv_next = dV
    d = sol.start_dist
    dd = np.zeros(S)
    dmu = np.zeros_like(r)
    for t in range(T):
        dx = dd[:, None] * pi[t] + d[:, None] * dpi[t]
        dmu += w[t] * dx
        x = d[:, None] * pi[t]
        d, dd = _push(mdp, x), _push(mdp, dx)
    return dmu.ravel()


def visitation_counts(mdp: TabularMDP, traj) -> np.ndarray:
    t = as_trajectory(traj)
    idx = t[:, 0] * mdp.num_actions + t[:, 1]
    return np.bincount(idx, weights=mdp.time_weights()[: len(t)], minlength=mdp.reward_size)


def demo_visitations(mdp: TabularMDP, demos: Sequence) -> np.ndarray:
    if len(demos) == 0:
        raise ContractError("demonstration set is empty")
    total = np.zeros(mdp.reward_size)
    for k, d in enumerate(demos):
        if not validate_trajectory(mdp, d):
            raise ContractError(f"demonstration {k} is not a valid trajectory")
        total += visitation_counts(mdp, d)
    return total / len(demos)


def trajectory_log_likelihood(mdp: TabularMDP, reward, traj, sol: SoftSolution | None = None) -> float:
    t = as_trajectory(traj)
    if len(t) != mdp.horizon:
        raise ContractError(f"trajectory length {len(t)} != horizon {mdp.horizon}")
    if not validate_trajectory(mdp, t):
        raise ContractError("trajectory is inconsistent with the MDP")
    if sol is None:
        sol = soft_value_iteration(mdp, reward)
    r = np.asarray(reward, dtype=np.float64)
    ret = float(visitation_counts(mdp, t) @ r)
    s1 = t[0, 0]
    with np.errstate(divide="ignore"):
        log_p0 = float(np.log(mdp.initial_dist[s1]))
    return log_p0 + ret - float(sol.soft_V[0, s1])


def enumerate_paths(mdp: TabularMDP, cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[np.ndarray, np.ndarray]:
    """All length-T (states, actions) arrays from every state with p0 > 0."""
    starts = np.flatnonzero(mdp.initial_dist > 0)
    A, T = mdp.num_actions, mdp.horizon
    count = len(starts) * A**T
    if count > cap:
        raise OracleTooLargeError(f"{count} trajectories exceed the enumeration cap {cap}")
    states = starts[:, None]
    actions = np.zeros((len(starts), 0), dtype=np.int64)
    for t in range(T):
        n = states.shape[0]
        states = np.repeat(states, A, axis=0)
        actions = np.concatenate([np.repeat(actions, A, axis=0), np.tile(np.arange(A), n)[:, None]], axis=1)
        if t < T - 1:
            nxt = mdp.next_state[states[:, -1], actions[:, -1]]
            states = np.concatenate([states, nxt[:, None]], axis=1)
    return states, actions


def enumerate_trajectories(mdp: TabularMDP, reward, cap: int = DEFAULT_ENUMERATION_CAP) -> list:
    """Every length-T trajectory with its exact return, as ``(trajectory, return)`` pairs."""
    states, actions = enumerate_paths(mdp, cap)
    r = np.asarray(reward, dtype=np.float64).reshape(mdp.num_states, mdp.num_actions)
    returns = r[states, actions] @ mdp.time_weights()
    return [(np.stack([s, a], axis=1), float(R)) for s, a, R in zip(states, actions, returns)]


def sample_trajectories(mdp: TabularMDP, sol: SoftSolution, count: int, rng) -> list:
    """Roll out ``count`` trajectories from the time-indexed MaxEnt policy.

    ``rng`` is a seed or a ``numpy.random.Generator`` owned by the caller.
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = np.random.default_rng(rng)
    T = mdp.horizon
    states = np.empty((count, T), dtype=np.int64)
    actions = np.empty((count, T), dtype=np.int64)
    s = _sample_categorical(rng, np.broadcast_to(sol.start_dist, (count, mdp.num_states)))
    for t in range(T):
        a = _sample_categorical(rng, sol.policy[t, s])
        states[:, t], actions[:, t] = s, a
        s = mdp.next_state[s, a]
    return [np.stack([states[k], actions[k]], axis=1) for k in range(count)]


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
