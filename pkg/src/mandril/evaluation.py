"""Expected value difference and the paired few-shot benchmark."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import reward as rm
from .irl import adapt
from .mdp import Environment, TabularMDP

MANDRIL = "MandRIL"
FROM_SCRATCH = "FromScratch"
AVG_GRADIENT = "AvgGradientPretrain"
RANDOM_INIT = "RandomInit"

CSV_FIELDS = ("method", "task_id", "seed", "num_demos", "steps", "evd_test", "evd_train")


@dataclass(frozen=True)
class EvalRecord:
    method: str
    task_id: int
    seed: int
    num_demos: int
    steps: int
    evd_test: float
    evd_train: float


def _greedy(Q: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, ties (relative 1e-9) to the lowest index."""
    best = Q.max(axis=-1, keepdims=True)
    tol = 1e-9 * np.maximum(1.0, np.abs(best))
    return np.argmax(Q >= best - tol, axis=-1)


def hard_value_iteration(mdp: TabularMDP, reward) -> tuple[np.ndarray, np.ndarray]:
    """Finite-horizon optimal policy (T, S) and values (T, S) under ``reward``."""
    r = np.asarray(reward, dtype=np.float64).reshape(mdp.num_states, mdp.num_actions)
    T, S = mdp.horizon, mdp.num_states
    w = mdp.time_weights()
    policy = np.empty((T, S), dtype=np.int64)
    V = np.empty((T, S))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        Q = w[t] * r + v_next[mdp.next_state]
        policy[t] = _greedy(Q)
        V[t] = Q[np.arange(S), policy[t]]
        v_next = V[t]
    return policy, V


def policy_evaluation(mdp: TabularMDP, reward, policy: np.ndarray) -> np.ndarray:
    """Values (T, S) of a time-indexed deterministic policy."""
    r = np.asarray(reward, dtype=np.float64).reshape(mdp.num_states, mdp.num_actions)
    T, S = mdp.horizon, mdp.num_states
    w = mdp.time_weights()
    idx = np.arange(S)
    V = np.empty((T, S))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        a = policy[t]
        V[t] = w[t] * r[idx, a] + v_next[mdp.next_state[idx, a]]
        v_next = V[t]
    return V


def expected_value_difference(learned_reward, env: Environment, true_reward=None) -> float:
    """Value lost by acting optimally for ``learned_reward`` instead of the true reward."""
    mdp = env.mdp
    r_true = env.reward if true_reward is None else np.asarray(true_reward)
    _, v_star = hard_value_iteration(mdp, r_true)
    pi_hat, _ = hard_value_iteration(mdp, learned_reward)
    v_hat = policy_evaluation(mdp, r_true, pi_hat)
    return float(mdp.initial_dist @ (v_star[0] - v_hat[0]))


def evd_for_params(arch: rm.RewardArchitecture, theta, env: Environment) -> float:
    return expected_value_difference(rm.forward(arch, theta, env.obs, env.mdp), env)


@dataclass
class BenchmarkConfig:
    demo_counts: tuple = (1, 2, 4, 8, 16, 32)
    adaptation_steps: int = 20
    step_size: float = 2.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.demo_counts = tuple(int(k) for k in self.demo_counts)


def random_init(arch: rm.RewardArchitecture, seed: int, task_id: int) -> np.ndarray:
    return rm.init_params(arch, np.random.default_rng([seed, 3, task_id]))


def evaluate_init(arch, theta0, task, k: int, cfg: BenchmarkConfig) -> tuple[float, float]:
    """Adapt on the first ``k`` train-environment demos, return (test EVD, train EVD)."""
    theta = np.asarray(theta0, dtype=np.float64)
    if cfg.adaptation_steps > 0:
        demos = task.demos_train[:k] if isinstance(task.demos_train, (list, tuple)) else task.demos_train
        env = task.train_env
        theta = adapt(theta, arch, env.obs, env.mdp, demos, cfg.step_size, cfg.adaptation_steps, cfg.weight_decay)
    return evd_for_params(arch, theta, task.test_env), evd_for_params(arch, theta, task.train_env)


def run_benchmark(inits: Mapping[str, object], tasks: Sequence, arch: rm.RewardArchitecture,
                  cfg: BenchmarkConfig, sink=None) -> list[EvalRecord]:
    """Few-shot evaluation of each named initialisation on every task and demo count.

    An init is a parameter vector or :data:`RANDOM_INIT` (a fresh Glorot draw
    per task). All methods see the same demonstrations of each task.
    """
    records = []
    for task in tasks:
        for k in cfg.demo_counts:
            for name, init in inits.items():
                if isinstance(init, str):
                    if init != RANDOM_INIT:
                        raise ValueError(f"unknown init token {init!r}")
                    theta0 = random_init(arch, cfg.seed, task.task_id)
                else:
                    theta0 = init
                evd_te, evd_tr = evaluate_init(arch, theta0, task, k, cfg)
                rec = EvalRecord(name, task.task_id, cfg.seed, k, cfg.adaptation_steps, evd_te, evd_tr)
                records.append(rec)
                if sink is not None:
                    sink(rec)
    return records


def records_to_csv(records: Sequence[EvalRecord], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.method, r.task_id, r.seed, r.num_demos, r.steps, repr(r.evd_test), repr(r.evd_train)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[EvalRecord]:
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    return [
        EvalRecord(r["method"], int(r["task_id"]), int(r["seed"]), int(r["num_demos"]), int(r["steps"]),
                   float(r["evd_test"]), float(r["evd_train"]))
        for r in rows
    ]


def bootstrap_ci(values, n_resamples: int = 10_000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    x = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, len(x), size=(n_resamples, len(x)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def summarize(records: Sequence[EvalRecord], n_resamples: int = 10_000, seed: int = 0) -> dict:
    """Per (method, demo count) mean EVDs with bootstrap 95% intervals."""
    groups: dict[tuple[str, int], list[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.num_demos), []).append(r)
    out = []
    for (method, k), rs in sorted(groups.items()):
        te = [r.evd_test for r in rs]
        tr = [r.evd_train for r in rs]
        out.append({
            "method": method,
            "num_demos": k,
            "n": len(rs),
            "evd_test_mean": float(np.mean(te)),
            "evd_test_ci95": list(bootstrap_ci(te, n_resamples, seed)),
            "evd_train_mean": float(np.mean(tr)),
            "evd_train_ci95": list(bootstrap_ci(tr, n_resamples, seed)),
        })
    return {"entries": out}


def paired_differences(records: Sequence[EvalRecord], a: str, b: str, k: int, field: str = "evd_test") -> np.ndarray:
    """``a - b`` per (seed, task) at demo count ``k``, in a fixed order."""
    va = {(r.seed, r.task_id): getattr(r, field) for r in records if r.method == a and r.num_demos == k}
    vb = {(r.seed, r.task_id): getattr(r, field) for r in records if r.method == b and r.num_demos == k}
    keys = sorted(set(va) & set(vb))
    return np.array([va[key] - vb[key] for key in keys])
