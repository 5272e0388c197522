"""Experiment configuration: one JSON document, dotted-path overrides, a stable hash."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from . import reward as rm
from .evaluation import AVG_GRADIENT, FROM_SCRATCH, MANDRIL, BenchmarkConfig
from .meta import MetaConfig
from .tasks import EXACT, SAMPLED, TaskSpec

METHODS = (MANDRIL, AVG_GRADIENT, FROM_SCRATCH)

# Keys that do not change any artifact and so stay out of the config hash.
UNHASHED = ("output_dir",)


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


def _meta_defaults() -> dict:
    d = MetaConfig().to_dict()
    d.pop("seed")  # the master seed drives every stream
    return d


def default_config() -> dict:
    bench = BenchmarkConfig()
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "tasks": {
            "spec": TaskSpec().to_dict(),
            "counts": {"train": 100, "val": 16, "test": 32},
            # demo pools per task: meta-train tasks, and the val/test tasks used for evaluation
            "train_pool": {"train": 8, "test": 8},
            "eval_pool": {"train": 32, "test": 1},
            "demo_mode": SAMPLED,
        },
        "arch": {"variant": rm.LINEAR, "hidden": []},
        "meta": _meta_defaults(),
        "training": {"checkpoint_every": 100},
        "benchmark": {
            "methods": list(METHODS),
            "demo_counts": list(bench.demo_counts),
            "adaptation_steps": bench.adaptation_steps,
            "step_size": bench.step_size,
            "weight_decay": bench.weight_decay,
            "pre_adaptation": True,
            "bootstrap_resamples": 10_000,
            "split": "test",
        },
        # choice sets swept by --grid, one meta-train run per combination
        "grid": {
            "meta.outer_step_size": [1e-4, 1e-5],
            "meta.inner_step_size": [1e-3, 5e-4],
            "meta.weight_decay": [0.0, 1e-4],
            "meta.inner_steps": [1, 3],
        },
    }


# -- parsing ----------------------------------------------------------------------

def parse_json_text(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if 0 < exc.lineno <= len(text.splitlines()) else ""
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}\n    {' ' * (exc.colno - 1)}^") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return doc


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        # free-form mappings are replaced wholesale
        if isinstance(base[k], dict) and isinstance(v, dict) and where not in ("tasks.spec.adjacency", "grid"):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_scalar(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings such as first_order


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``dotted.path=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    return set_path(doc, key.strip(), _parse_scalar(raw.strip()))


def set_path(doc: dict, key: str, value) -> dict:
    out = copy.deepcopy(doc)
    parts = key.split(".")
    node = out
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return out


# -- the resolved config ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    doc: dict

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.doc["output_dir"])

    @property
    def spec(self) -> TaskSpec:
        return TaskSpec.from_dict(self.doc["tasks"]["spec"])

    @property
    def meta(self) -> MetaConfig:
        return MetaConfig(**self.doc["meta"], seed=self.seed)

    def arch(self, in_channels: int) -> rm.RewardArchitecture:
        a = self.doc["arch"]
        return rm.RewardArchitecture(a["variant"], in_channels, tuple(a["hidden"]))

    def benchmark(self) -> BenchmarkConfig:
        b = self.doc["benchmark"]
        return BenchmarkConfig(tuple(b["demo_counts"]), b["adaptation_steps"], b["step_size"], b["weight_decay"], self.seed)

    def hashed_doc(self) -> dict:
        return {k: v for k, v in self.doc.items() if k not in UNHASHED}

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.hashed_doc(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.config_hash, "version": __version__}

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2) + "\n"

    def grid_points(self) -> list[dict]:
        keys = sorted(self.doc["grid"])
        combos = itertools.product(*(self.doc["grid"][k] for k in keys))
        return [dict(zip(keys, c)) for c in combos]


def _type_check(doc: dict, ref: dict, path: str = ""):
    for k, v in doc.items():
        where = f"{path}{k}"
        r = ref.get(k)
        if r is None or where in ("tasks.spec.adjacency", "grid"):
            continue
        if isinstance(r, dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected an object")
            _type_check(v, r, where + ".")
        elif isinstance(r, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where}: expected true or false")
        elif isinstance(r, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}: expected a number")
            if isinstance(r, int) and not isinstance(r, bool) and not float(v).is_integer():
                raise ConfigError(f"{where}: expected an integer")
            if isinstance(r, int):
                doc[k] = int(v)
        elif isinstance(r, str) and not isinstance(v, str):
            raise ConfigError(f"{where}: expected a string")
        elif isinstance(r, list) and not isinstance(v, list):
            raise ConfigError(f"{where}: expected a list")


def validate(doc: dict) -> ExperimentConfig:
    doc = copy.deepcopy(doc)
    _type_check(doc, default_config())
    if doc["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    t = doc["tasks"]
    for split in ("train", "val", "test"):
        if t["counts"][split] < 0:
            raise ConfigError(f"tasks.counts.{split} must be >= 0")
    if t["demo_mode"] not in (SAMPLED, EXACT):
        raise ConfigError(f"tasks.demo_mode must be {SAMPLED!r} or {EXACT!r}")
    b = doc["benchmark"]
    if b["split"] not in ("val", "test"):
        raise ConfigError("benchmark.split must be 'val' or 'test'")
    for m in b["methods"]:
        if m not in METHODS:
            raise ConfigError(f"benchmark.methods: unknown method {m!r}")
    if any(k < 1 or k > t["eval_pool"]["train"] for k in b["demo_counts"]) and t["demo_mode"] == SAMPLED:
        raise ConfigError("benchmark.demo_counts must lie in 1..tasks.eval_pool.train")
    for key, values in doc["grid"].items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key}: expected a non-empty list")
        try:
            set_path(doc, key, values[0])
        except ConfigError as exc:
            raise ConfigError(f"grid: {exc}") from None
    cfg = ExperimentConfig(doc)
    try:
        cfg.spec
        cfg.meta
        cfg.benchmark()
        cfg.arch(1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if doc["training"]["checkpoint_every"] < 1:
        raise ConfigError("training.checkpoint_every must be >= 1")
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``key=value`` overrides."""
    doc = default_config()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        doc = _merge(doc, parse_json_text(text, str(p)))
    for o in overrides:
        doc = apply_override(doc, o)
    return validate(doc)
