"""Meta-training of a reward initialisation through the MaxEnt IRL inner step.

For one inner step ``phi = theta - alpha * grad L_tr(theta)`` the meta-gradient is

    (I - alpha * H_r - alpha * J^T C J) J_phi^T (E_phi[mu] - mu_test)

where ``J = dr/dtheta``, ``H_r`` is the Hessian of ``g . r_theta`` with
``g = E_theta[mu] - mu_tr`` and ``C = dE[mu]/dr = Cov[mu_tau]``. Three modes:

* ``full``: exact, with ``C`` applied through :func:`soft.visitation_jvp`.
* ``diag_curvature``: ``C`` replaced by its diagonal ``D`` (per-coordinate
  finite differences of the DP solve).
* ``first_order``: the bracket replaced by the identity.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import reward as rm
from .irl import AdaptationDiverged, Demonstrations, adapt, as_demonstrations, conditioned, irl_gradient
from .mdp import ContractError, TabularMDP
from .soft import (
    NumericInputError,
    enumerate_paths,
    expected_visitations,
    soft_value_iteration,
    visitation_jvp,
)


class GradientMode(str, Enum):
    FULL = "full"
    DIAG_CURVATURE_ONLY = "diag_curvature"
    FIRST_ORDER = "first_order"


class UnsupportedModeError(ValueError):
    pass


class NumericFailure(FloatingPointError):
    """Raised when the meta-loss goes non-finite; carries the last good state."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class MetaConfig:
    inner_step_size: float = 2.0  # alpha
    outer_step_size: float = 0.05  # beta, the Adam rate
    inner_steps: int = 1
    meta_batch_size: int = 32
    demos_per_task: int = 1
    test_demos_per_task: int = 4
    gradient_mode: GradientMode = GradientMode.FULL
    iterations: int = 1500
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.gradient_mode = GradientMode(self.gradient_mode)
        if self.inner_step_size < 0 or self.outer_step_size <= 0:
            raise ValueError("step sizes must be positive")
        if self.meta_batch_size < 1 or self.inner_steps < 1:
            raise ValueError("meta_batch_size and inner_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gradient_mode"] = self.gradient_mode.value
        return d


@dataclass(frozen=True, eq=False)
class MetaGradientReport:
    total: np.ndarray
    first_order_term: np.ndarray
    hessian_term: np.ndarray
    covariance_term: np.ndarray
    diag_D_term: np.ndarray | None
    D_diagonal: np.ndarray | None
    meta_loss: float
    train_loss: float


# -- the dE[mu]/dr identities ---------------------------------------------------

def visitation_reward_jacobian_diag(mdp: TabularMDP, reward, h: float = 1e-4) -> np.ndarray:
    """Diagonal of dE[mu]/dr by central differences, one coordinate at a time."""
    r = np.asarray(reward, dtype=np.float64)
    out = np.empty_like(r)
    for i in range(r.size):
        rp, rm_ = r.copy(), r.copy()
        rp[i] += h
        rm_[i] -= h
        ep = expected_visitations(mdp, soft_value_iteration(mdp, rp))[i]
        em = expected_visitations(mdp, soft_value_iteration(mdp, rm_))[i]
        out[i] = (ep - em) / (2 * h)
    return out


def visitation_reward_jacobian_fd(mdp: TabularMDP, reward, h: float = 1e-4) -> np.ndarray:
    """Full dE[mu]/dr by central differences; column j is the response to r_j."""
    r = np.asarray(reward, dtype=np.float64)
    J = np.empty((r.size, r.size))
    for j in range(r.size):
        rp, rm_ = r.copy(), r.copy()
        rp[j] += h
        rm_[j] -= h
        J[:, j] = (expected_visitations(mdp, soft_value_iteration(mdp, rp))
                   - expected_visitations(mdp, soft_value_iteration(mdp, rm_))) / (2 * h)
    return J


def trajectory_distribution(mdp: TabularMDP, reward, cap: int | None = None):
    """Visitation matrix (N, S*A) and probabilities of every enumerated trajectory.

    Probabilities are ``p0(s_1) exp(R) / sum_{tau' from s_1} exp(R')``, normalised
    per start state by brute force.
    """
    states, actions = enumerate_paths(mdp) if cap is None else enumerate_paths(mdp, cap)
    n, T = states.shape
    SA = mdp.reward_size
    flat = (np.arange(n)[:, None] * SA + states * mdp.num_actions + actions).ravel()
    M = np.bincount(flat, weights=np.tile(mdp.time_weights(), n), minlength=n * SA).reshape(n, SA)
    ret = M @ np.asarray(reward, dtype=np.float64)
    p = np.empty(n)
    s1 = states[:, 0]
    for s in np.unique(s1):
        sel = s1 == s
        w = np.exp(ret[sel] - ret[sel].max())
        p[sel] = mdp.initial_dist[s] * w / w.sum()
    return M, p


def covariance_oracle(mdp: TabularMDP, reward, cap: int | None = None) -> np.ndarray:
    """Exact Cov[mu_tau] under the enumerated MaxEnt trajectory distribution.

    The covariance is taken given the start state and averaged over
    ``initial_dist``; for a single start it is the plain covariance.
    """
    states, _ = enumerate_paths(mdp) if cap is None else enumerate_paths(mdp, cap)
    M, p = trajectory_distribution(mdp, reward, cap)
    C = np.zeros((mdp.reward_size, mdp.reward_size))
    s1 = states[:, 0]
    for s in np.unique(s1):
        sel = s1 == s
        q = p[sel] / p[sel].sum()
        X = M[sel] - q @ M[sel]
        C += mdp.initial_dist[s] * (X.T @ (q[:, None] * X))
    return 0.5 * (C + C.T)


# -- meta-gradient ---------------------------------------------------------------

def meta_gradient(theta, arch: rm.RewardArchitecture, task, cfg: MetaConfig,
                  train_demos=None, test_demos=None, diagnostics: bool = False) -> MetaGradientReport:
    """Gradient of the post-adaptation test NLL with respect to the initialisation.

    ``task`` supplies ``train_env`` (the environment the demonstrations live
    in) and default demonstration sets ``demos_train`` / ``demos_test``.
    """
    mode = GradientMode(cfg.gradient_mode)
    if mode is not GradientMode.FIRST_ORDER and cfg.inner_steps != 1:
        raise UnsupportedModeError(f"{mode.value} meta-gradient is defined for a single inner step only")
    env = task.train_env
    mdp, feats = env.mdp, env.obs
    dtr = as_demonstrations(mdp, task.demos_train if train_demos is None else train_demos)
    dte = as_demonstrations(mdp, task.demos_test if test_demos is None else test_demos)
    theta = np.asarray(theta, dtype=np.float64)
    alpha, wd = cfg.inner_step_size, cfg.weight_decay

    g_tr = irl_gradient(theta, arch, feats, mdp, dtr, wd)
    if cfg.inner_steps == 1:
        phi = theta - alpha * g_tr.param_space_grad
    else:
        phi = adapt(theta, arch, feats, mdp, dtr, alpha, cfg.inner_steps, wd)
    g_te = irl_gradient(phi, arch, feats, mdp, dte)
    u = g_te.param_space_grad

    zeros = np.zeros_like(theta)
    hess, cov, diag_term, D = zeros, zeros, None, None
    need_curv = mode is not GradientMode.FIRST_ORDER or diagnostics
    if need_curv and cfg.inner_steps == 1:
        r = rm.forward(arch, theta, feats, mdp)
        mdp_tr = conditioned(mdp, dtr)
        hess = alpha * (rm.hvp(arch, theta, feats, mdp, g_tr.reward_space_grad, u) + wd * u)
        Ju = rm.jvp(arch, theta, feats, mdp, u)
        if mode is GradientMode.FULL or diagnostics:
            cov = alpha * rm.vjp(arch, theta, feats, mdp, visitation_jvp(mdp_tr, r, Ju, g_tr.solution))
        if mode is GradientMode.DIAG_CURVATURE_ONLY or diagnostics:
            D = visitation_reward_jacobian_diag(mdp_tr, r)
            diag_term = alpha * rm.vjp(arch, theta, feats, mdp, D * Ju)

    if mode is GradientMode.FULL:
        total = u - hess - cov
    elif mode is GradientMode.DIAG_CURVATURE_ONLY:
        total = u - hess - diag_term
    else:
        total = u
    return MetaGradientReport(total, u, hess, cov, diag_term, D, g_te.loss, g_tr.loss)


def post_adaptation_test_loss(theta, arch, task, cfg: MetaConfig, train_demos=None, test_demos=None) -> float:
    """``L_test(theta - alpha * grad L_tr(theta))``; the objective meta_gradient differentiates."""
    env = task.train_env
    mdp, feats = env.mdp, env.obs
    dtr = as_demonstrations(mdp, task.demos_train if train_demos is None else train_demos)
    dte = as_demonstrations(mdp, task.demos_test if test_demos is None else test_demos)
    g = irl_gradient(theta, arch, feats, mdp, dtr, cfg.weight_decay).param_space_grad
    phi = np.asarray(theta) - cfg.inner_step_size * g
    return irl_gradient(phi, arch, feats, mdp, dte).loss


# -- outer loop -----------------------------------------------------------------

class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainState:
    theta: np.ndarray
    iteration: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    history: list = field(default_factory=list)

    def optimizer_dict(self) -> dict:
        return {"iteration": self.iteration, "adam_t": self.adam_t, "adam_m": self.adam_m, "adam_v": self.adam_v}

    @classmethod
    def from_checkpoint(cls, theta: np.ndarray, opt: dict | None) -> "TrainState":
        if not opt:
            return cls(np.array(theta))
        return cls(np.array(theta), int(opt["iteration"]), np.array(opt["adam_m"]),
                   np.array(opt["adam_v"]), int(opt["adam_t"]))


def batch_indices(seed: int, iteration: int, num_tasks: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0, iteration])
    idx = rng.choice(num_tasks, size=batch, replace=batch > num_tasks)
    return np.sort(idx)


def sample_demo_split(task, seed: int, task_index: int, iteration: int, k_train: int, k_test: int):
    """Per-(seed, task, iteration) subsets of the task's train and test demo pools."""
    rng = np.random.default_rng([seed, 1, task_index, iteration])
    tr, te = task.demos_train, task.demos_test
    if isinstance(tr, Demonstrations):
        return tr, te
    i = np.sort(rng.choice(len(tr), size=min(k_train, len(tr)), replace=False))
    j = np.sort(rng.choice(len(te), size=min(k_test, len(te)), replace=False))
    return [tr[a] for a in i], [te[b] for b in j]


def _maml_contribution(theta, arch, task, cfg, tr, te):
    rep = meta_gradient(theta, arch, task, cfg, tr, te)
    return rep.total, rep.meta_loss


def _avg_contribution(theta, arch, task, cfg, tr, te):
    mdp = task.train_env.mdp
    if isinstance(tr, Demonstrations):
        d = Demonstrations.pooled([tr, te])
    else:
        d = as_demonstrations(mdp, list(tr) + list(te))
    g = irl_gradient(theta, arch, task.train_env.obs, mdp, d, cfg.weight_decay)
    return g.param_space_grad, g.loss


CONTRIBUTIONS = {"maml": _maml_contribution, "average": _avg_contribution}


def batch_contributions(kind: str, theta, arch, tasks: Sequence, cfg: MetaConfig, indices, iteration: int) -> list:
    """Per-task (gradient, loss) pairs for one meta-batch, in the order of ``indices``."""
    fn = CONTRIBUTIONS[kind]
    out = []
    for i in indices:
        i = int(i)
        tr, te = sample_demo_split(tasks[i], cfg.seed, i, iteration, cfg.demos_per_task, cfg.test_demos_per_task)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out.append(fn(theta, arch, tasks[i], cfg, tr, te))
        except (NumericInputError, AdaptationDiverged) as exc:
            raise FloatingPointError(f"task {i}: {exc}") from exc
    return out


def _run_outer_loop(kind: str, tasks: Sequence, arch, cfg: MetaConfig, theta0=None,
                    state: TrainState | None = None, sink: Callable | None = None,
                    stop_after: int | None = None, timing: bool = False, mapper: Callable | None = None) -> TrainState:
    if len(tasks) == 0:
        raise ContractError("at least one training task is required")
    if state is None:
        if theta0 is None:
            theta0 = rm.init_params(arch, np.random.default_rng([cfg.seed, 2]))
        state = TrainState(np.array(theta0, dtype=np.float64))
    opt = Adam(arch.param_count, cfg.outer_step_size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if state.adam_m is not None:
        opt.m, opt.v, opt.t = state.adam_m.copy(), state.adam_v.copy(), state.adam_t
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    while state.iteration < end:
        it = state.iteration
        t0 = time.perf_counter() if timing else None
        idx = batch_indices(cfg.seed, it, len(tasks), cfg.meta_batch_size)
        try:
            if mapper is None:
                parts = batch_contributions(kind, state.theta, arch, tasks, cfg, idx, it)
            else:
                parts = mapper(kind, state.theta, idx, it)
        except FloatingPointError as exc:
            raise NumericFailure(f"non-finite values at iteration {it}: {exc}", state) from exc
        # fixed summation order, independent of how the batch was distributed
        grad = np.zeros(arch.param_count)
        for g, _ in parts:
            grad += g
        meta_loss = float(np.mean([loss for _, loss in parts]))
        if not (np.isfinite(meta_loss) and np.all(np.isfinite(grad))):
            raise NumericFailure(f"non-finite meta-loss at iteration {it}", state)
        theta = opt.step(state.theta, grad)
        state = TrainState(theta, it + 1, opt.m.copy(), opt.v.copy(), opt.t, state.history)
        record = {
            "iter": it,
            "meta_loss": meta_loss,
            "grad_norm": float(np.linalg.norm(grad)),
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if timing else None,
        }
        state.history.append(record)
        if sink is not None:
            sink(record, state)
    return state


def meta_train(tasks: Sequence, arch: rm.RewardArchitecture, cfg: MetaConfig, sink=None, theta0=None,
               state: TrainState | None = None, stop_after: int | None = None, timing: bool = False,
               mapper: Callable | None = None) -> TrainState:
    """Adam on the summed per-task meta-gradients over seeded meta-batches.

    Multi-step inner loops are trained with the first-order meta-gradient.
    """
    return _run_outer_loop("maml", tasks, arch, effective_config(cfg), theta0, state, sink, stop_after, timing, mapper)


def average_gradient_pretrain(tasks: Sequence, arch: rm.RewardArchitecture, cfg: MetaConfig, sink=None,
                              theta0=None, state: TrainState | None = None, stop_after: int | None = None,
                              timing: bool = False, mapper: Callable | None = None) -> TrainState:
    """Same driver, but each task contributes its plain IRL gradient at theta."""
    return _run_outer_loop("average", tasks, arch, cfg, theta0, state, sink, stop_after, timing, mapper)


def effective_config(cfg: MetaConfig) -> MetaConfig:
    """Multi-step inner loops are trained with the first-order meta-gradient."""
    if cfg.inner_steps > 1 and cfg.gradient_mode is not GradientMode.FIRST_ORDER:
        return MetaConfig(**{**cfg.to_dict(), "gradient_mode": GradientMode.FIRST_ORDER})
    return cfg
