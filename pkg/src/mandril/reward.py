"""Parameterised reward functions with hand-written derivatives.

A reward model maps per-cell input channels to one scalar per cell; the reward
of a state-action pair is the value of the cell the action lands on. The flat
parameter vector is laid out layer by layer, weights (row-major, fan_in x
fan_out) then biases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import ContractError, TabularMDP

LINEAR = "linear"
MLP = "mlp"


@dataclass(frozen=True)
class RewardArchitecture:
    variant: str
    num_channels: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.variant not in (LINEAR, MLP):
            raise ValueError(f"unknown architecture variant {self.variant!r}")
        if self.variant == LINEAR and self.hidden:
            raise ValueError("the linear architecture has no hidden layers")
        if self.variant == MLP and not self.hidden:
            raise ValueError("the per-cell MLP needs at least one hidden layer")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.num_channels, *self.hidden, 1)

    def manifest(self) -> list[tuple[str, slice, tuple[int, ...]]]:
        """(name, slice into theta, shape) for every parameter block."""
        if self.variant == LINEAR:
            return [("w", slice(0, self.num_channels), (self.num_channels,))]
        out, off = [], 0
        sizes = self.layer_sizes
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"W{i}", slice(off, off + fi * fo), (fi, fo)))
            off += fi * fo
            out.append((f"b{i}", slice(off, off + fo), (fo,)))
            off += fo
        return out

    @property
    def param_count(self) -> int:
        return self.manifest()[-1][1].stop

    def to_dict(self) -> dict:
        return {"variant": self.variant, "num_channels": self.num_channels, "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardArchitecture":
        return cls(d["variant"], int(d["num_channels"]), tuple(d.get("hidden", ())))


def init_params(arch: RewardArchitecture, rng) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    theta = np.zeros(arch.param_count)
    if arch.variant == LINEAR:
        lim = np.sqrt(6.0 / (arch.num_channels + 1))
        theta[:] = rng.uniform(-lim, lim, arch.num_channels)
        return theta
    for name, sl, shape in arch.manifest():
        if name.startswith("W"):
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            theta[sl] = rng.uniform(-lim, lim, sl.stop - sl.start)
    return theta


def _check(arch: RewardArchitecture, theta, feats, mdp: TabularMDP) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if theta.shape != (arch.param_count,):
        raise ContractError(f"theta has shape {theta.shape}, architecture expects ({arch.param_count},)")
    if feats.shape != (mdp.num_states, arch.num_channels):
        raise ContractError(
            f"features have shape {feats.shape}, expected ({mdp.num_states}, {arch.num_channels})"
        )
    return theta, feats


def _layers(arch: RewardArchitecture, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    m = arch.manifest()
    return [
        (theta[m[i][1]].reshape(m[i][2]), theta[m[i + 1][1]])
        for i in range(0, len(m), 2)
    ]


def _mlp_forward(arch, theta, X):
    """Hidden activations (tanh outputs) and the per-cell output."""
    acts = [X]
    h = X
    layers = _layers(arch, theta)
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return acts, (h @ W + b)[:, 0]


def cell_values(arch: RewardArchitecture, theta, feats) -> np.ndarray:
    if arch.variant == LINEAR:
        return np.asarray(feats) @ np.asarray(theta)
    return _mlp_forward(arch, np.asarray(theta), np.asarray(feats))[1]


def forward(arch: RewardArchitecture, theta, feats, mdp: TabularMDP) -> np.ndarray:
    theta, feats = _check(arch, theta, feats, mdp)
    return cell_values(arch, theta, feats)[mdp.next_state].ravel()


def _to_cells(mdp: TabularMDP, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (mdp.reward_size,):
        raise ContractError(f"reward-space vector must have length {mdp.reward_size}")
    return np.bincount(mdp.next_state.ravel(), weights=g, minlength=mdp.num_states)


def vjp(arch: RewardArchitecture, theta, feats, mdp: TabularMDP, g) -> np.ndarray:
    """``(dr/dtheta)^T g`` by reverse-mode backprop."""
    theta, feats = _check(arch, theta, feats, mdp)
    gc = _to_cells(mdp, g)
    if arch.variant == LINEAR:
        return feats.T @ gc
    acts, _ = _mlp_forward(arch, theta, feats)
    layers = _layers(arch, theta)
    grads = []
    delta = gc[:, None]
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((delta.sum(axis=0), (acts[i].T @ delta).ravel()))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    out = []
    for gb, gW in reversed(grads):
        out.extend([gW, gb])
    return np.concatenate(out)


def jvp(arch: RewardArchitecture, theta, feats, mdp: TabularMDP, u) -> np.ndarray:
    """``(dr/dtheta) u`` by forward-mode tangent propagation."""
    theta, feats = _check(arch, theta, feats, mdp)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != theta.shape:
        raise ContractError("tangent must match theta")
    if arch.variant == LINEAR:
        return (feats @ u)[mdp.next_state].ravel()
    layers, tangents = _layers(arch, theta), _layers(arch, u)
    h, dh = feats, np.zeros_like(feats)
    for i, ((W, b), (dW, db)) in enumerate(zip(layers, tangents)):
        a = h @ W + b
        da = dh @ W + h @ dW + db
        if i < len(layers) - 1:
            h = np.tanh(a)
            dh = (1.0 - h**2) * da
        else:
            dh = da
    return dh[:, 0][mdp.next_state].ravel()


def hvp(arch: RewardArchitecture, theta, feats, mdp: TabularMDP, g, v) -> np.ndarray:
    """Hessian of ``g . r_theta`` applied to ``v``.

    Central difference of the analytic vjp along ``v / |v|`` with step
    ``1e-4 * max(1, |theta|_inf)``; exactly zero for the linear model.
    """
    theta, feats = _check(arch, theta, feats, mdp)
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if arch.variant == LINEAR or nv == 0.0:
        return np.zeros_like(theta)
    h = 1e-4 * max(1.0, float(np.max(np.abs(theta))))
    vh = v / nv
    gp = vjp(arch, theta + h * vh, feats, mdp, g)
    gm = vjp(arch, theta - h * vh, feats, mdp, g)
    return (gp - gm) * (nv / (2.0 * h))


# -- checkpoints ---------------------------------------------------------------

def encode_floats(x) -> list[str]:
    return [format(float(v), ".17g") for v in np.ravel(x)]


def decode_floats(xs) -> np.ndarray:
    return np.array([float(s) for s in xs], dtype=np.float64)


def save_checkpoint(path, arch: RewardArchitecture, theta, seed: int, meta: dict | None = None,
                    optimizer: dict | None = None) -> None:
    """Write a JSON checkpoint; floats are 17-significant-digit strings (exact round-trip)."""
    theta = np.asarray(theta, dtype=np.float64)
    doc = {
        "header": {
            **arch.to_dict(),
            "layer_sizes": list(arch.layer_sizes),
            "param_count": arch.param_count,
            "seed": seed,
            "meta": meta or {},
        },
        "params": encode_floats(theta),
    }
    if optimizer is not None:
        doc["optimizer"] = {
            k: encode_floats(v) if isinstance(v, np.ndarray) else v for k, v in optimizer.items()
        }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[RewardArchitecture, np.ndarray, dict, dict | None]:
    doc = json.loads(Path(path).read_text())
    head = doc["header"]
    arch = RewardArchitecture.from_dict(head)
    theta = decode_floats(doc["params"])
    if theta.shape != (head["param_count"],) or head["param_count"] != arch.param_count:
        raise ContractError(f"checkpoint {path} has an inconsistent parameter count")
    opt = doc.get("optimizer")
    if opt is not None:
        opt = {k: decode_floats(v) if isinstance(v, list) else v for k, v in opt.items()}
    return arch, theta, head, opt
