"""Command-line harness: generate | meta-train | pretrain-avg | evaluate | selfcheck.

Exit codes: 0 ok, 1 usage, 2 config (including IO and missing artifacts), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import reward as rm
from .config import ConfigError, ExperimentConfig, load_config, set_path, validate
from .evaluation import (
    AVG_GRADIENT,
    FROM_SCRATCH,
    MANDRIL,
    RANDOM_INIT,
    BenchmarkConfig,
    bootstrap_ci,
    paired_differences,
    records_to_csv,
    run_benchmark,
    summarize,
)
from .meta import NumericFailure, TrainState, average_gradient_pretrain, batch_contributions, meta_train
from .tasks import bundle_hash, dump_json, load_task, make_task, save_task

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_KINDS = {"meta-train": ("maml", "mandril"), "pretrain-avg": ("average", "avg")}
CHECKPOINT_NAMES = {MANDRIL: "mandril", AVG_GRADIENT: "avg"}


class MissingCheckpointError(ConfigError):
    pass


class MissingTasksError(ConfigError):
    pass


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


# -- worker pools ---------------------------------------------------------------------

def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("MANDRIL_WORKERS"):
        try:
            n = int(os.environ["MANDRIL_WORKERS"])
        except ValueError:
            raise _UsageError("MANDRIL_WORKERS must be an integer") from None
    else:
        n = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if n < 1:
        raise _UsageError("worker count must be >= 1")
    return n


def ordered_map(fn, items: list, workers: int, initializer=None, initargs=()) -> list:
    """``[fn(x) for x in items]``, optionally across processes; results keep input order."""
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(min(workers, len(items)), initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, items))


# -- task bundles -----------------------------------------------------------------------

def _split_pool(cfg: ExperimentConfig, split: str) -> dict:
    t = cfg.doc["tasks"]
    return t["train_pool"] if split == "train" else t["eval_pool"]


def _generate_one(job) -> dict:
    spec_doc, seed, split, index, k_tr, k_te, mode, dest, stamp = job
    from .tasks import TaskSpec

    task = make_task(TaskSpec.from_dict(spec_doc), seed, split, index, k_tr, k_te, mode)
    sha = save_task(task, dest, extra_meta={**stamp, "split": split})
    return {"split": split, "task_id": task.task_id, "path": f"{split}/task_{index:04d}", "sha256": sha}


def cmd_generate(cfg: ExperimentConfig, workers: int, emit=print) -> Path:
    root = cfg.output_dir / "tasks"
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    jobs = []
    for split in ("train", "val", "test"):
        pool = _split_pool(cfg, split)
        for i in range(cfg.doc["tasks"]["counts"][split]):
            jobs.append((cfg.doc["tasks"]["spec"], cfg.seed, split, i, pool["train"], pool["test"],
                         cfg.doc["tasks"]["demo_mode"], str(root / split / f"task_{i:04d}"), cfg.stamp()))
    bundles = ordered_map(_generate_one, jobs, workers)
    manifest = {
        **cfg.stamp(),
        "spec_hash": cfg.spec.spec_hash(),
        "seed": cfg.seed,
        "counts": dict(cfg.doc["tasks"]["counts"]),
        "total": len(bundles),
        "bundles": bundles,
    }
    (root / "manifest.json").write_text(dump_json(manifest))
    _write_config(cfg)
    emit(f"wrote {len(bundles)} task bundles to {root}")
    return root


def _write_config(cfg: ExperimentConfig):
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "config.json").write_text(json.dumps({**cfg.stamp(), "config": cfg.doc}, sort_keys=True, indent=2) + "\n")


def read_manifest(task_dir: Path, cfg: ExperimentConfig) -> dict:
    path = task_dir / "manifest.json"
    if not path.is_file():
        raise MissingTasksError(f"MissingTasksError: no task manifest at {path} (run `mandril generate` first)")
    manifest = json.loads(path.read_text())
    if manifest["spec_hash"] != cfg.spec.spec_hash():
        raise ConfigError(f"task bundles in {task_dir} were generated for a different task spec "
                          f"({manifest['spec_hash']} != {cfg.spec.spec_hash()})")
    return manifest


def split_paths(task_dir: Path, cfg: ExperimentConfig, split: str) -> list[str]:
    manifest = read_manifest(task_dir, cfg)
    out = []
    for b in manifest["bundles"]:
        if b["split"] != split:
            continue
        p = task_dir / b["path"]
        if not p.is_dir() or bundle_hash(p) != b["sha256"]:
            raise ConfigError(f"task bundle {p} is missing or does not match its manifest hash")
        out.append(str(p))
    if not out:
        raise MissingTasksError(f"MissingTasksError: no {split!r} tasks in {task_dir}")
    return out


# -- meta-training ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_train_worker(paths, arch_doc, meta_doc):
    from .meta import MetaConfig, effective_config

    _WORKER["tasks"] = [load_task(p) for p in paths]
    _WORKER["arch"] = rm.RewardArchitecture.from_dict(arch_doc)
    _WORKER["cfg"] = effective_config(MetaConfig(**meta_doc))


def _train_chunk(job):
    kind, theta, idx, it = job
    return batch_contributions(kind, theta, _WORKER["arch"], _WORKER["tasks"], _WORKER["cfg"], idx, it)


class _PoolMapper:
    """Distributes one meta-batch over worker processes; results come back in batch order."""

    def __init__(self, workers, paths, arch, meta_cfg):
        self.ex = ProcessPoolExecutor(workers, initializer=_init_train_worker,
                                      initargs=(paths, arch.to_dict(), meta_cfg.to_dict()))
        self.workers = workers

    def __call__(self, kind, theta, idx, it):
        chunks = [c for c in np.array_split(np.asarray(idx), self.workers) if len(c)]
        parts = self.ex.map(_train_chunk, [(kind, theta, c, it) for c in chunks])
        return [p for chunk in parts for p in chunk]

    def close(self):
        self.ex.shutdown()


def _resume_key(cfg: ExperimentConfig) -> str:
    """Hash of everything that must agree for a bit-exact continuation."""
    doc = set_path(cfg.doc, "meta.iterations", 0)
    doc = set_path(doc, "training.checkpoint_every", 1)
    return ExperimentConfig(doc).config_hash


def _save_train_checkpoint(path: Path, cfg, arch, state: TrainState, kind: str, mode: str):
    meta = {**cfg.stamp(), "kind": kind, "iteration": state.iteration, "gradient_mode": mode,
            "resume_key": _resume_key(cfg)}
    opt = {"m": state.adam_m, "v": state.adam_v, "t": state.adam_t} if state.adam_m is not None else None
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    rm.save_checkpoint(tmp, arch, state.theta, cfg.seed, meta, opt)
    os.replace(tmp, path)


def load_train_state(path: Path, cfg: ExperimentConfig, kind: str) -> tuple[rm.RewardArchitecture, TrainState]:
    if not Path(path).is_file():
        raise MissingCheckpointError(f"MissingCheckpointError: no checkpoint at {path}")
    arch, theta, head, opt = rm.load_checkpoint(path)
    meta = head.get("meta", {})
    if meta.get("kind") != kind:
        raise ConfigError(f"checkpoint {path} is a {meta.get('kind')!r} run, not {kind!r}")
    if meta.get("resume_key") != _resume_key(cfg):
        raise ConfigError(f"checkpoint {path} was written under a different configuration")
    if opt is None:
        return arch, TrainState(theta, int(meta["iteration"]))
    return arch, TrainState(theta, int(meta["iteration"]), opt["m"], opt["v"], int(opt["t"]))


def cmd_train(verb: str, cfg: ExperimentConfig, task_dir: Path, workers: int, resume=None,
              stop_after: int | None = None, timing: bool = False, emit=print) -> Path:
    kind, name = TRAIN_KINDS[verb]
    out = cfg.output_dir
    paths = split_paths(task_dir, cfg, "train")
    tasks = [load_task(p) for p in paths]
    arch = cfg.arch(tasks[0].train_env.obs.shape[1])
    from .meta import effective_config

    mcfg = cfg.meta
    mode = effective_config(mcfg).gradient_mode.value if kind == "maml" else "plain"
    ckpt = out / "checkpoints" / f"{name}.json"
    log = out / "logs" / f"{name}.jsonl"
    log.parent.mkdir(parents=True, exist_ok=True)
    state = None
    kept: list[str] = []
    if resume is not None:
        r_arch, state = load_train_state(Path(resume), cfg, kind)
        if r_arch.to_dict() != arch.to_dict():
            raise ConfigError(f"checkpoint {resume} has a different reward architecture")
        if log.is_file():
            kept = log.read_text().splitlines(keepends=True)[: state.iteration]
    every = cfg.doc["training"]["checkpoint_every"]
    fh = log.open("w")
    fh.writelines(kept)
    stamp = cfg.stamp()

    def sink(record, st):
        fh.write(json.dumps({**record, "kind": kind, **stamp}, sort_keys=True) + "\n")
        if st.iteration % every == 0:
            fh.flush()
            _save_train_checkpoint(ckpt, cfg, arch, st, kind, mode)

    mapper = _PoolMapper(min(workers, mcfg.meta_batch_size), paths, arch, mcfg) if workers > 1 else None
    run = meta_train if kind == "maml" else average_gradient_pretrain
    try:
        state = run(tasks, arch, mcfg, sink=sink, state=state, stop_after=stop_after, timing=timing, mapper=mapper)
    except NumericFailure as exc:
        fh.close()
        abort = out / "checkpoints" / f"{name}.abort.json"
        _save_train_checkpoint(abort, cfg, arch, exc.state, kind, mode)
        exc.args = (f"{exc.args[0]}; abort checkpoint written to {abort}",)
        raise
    finally:
        if mapper is not None:
            mapper.close()
        fh.close()
    _save_train_checkpoint(ckpt, cfg, arch, state, kind, mode)
    _write_config(cfg)
    emit(f"{verb}: {state.iteration} iterations, checkpoint {ckpt}, log {log}")
    return ckpt


def cmd_grid(cfg: ExperimentConfig, task_dir: Path, workers: int, timing: bool = False, emit=print) -> Path:
    """Sequential sweep over the config's ``grid`` choice sets (meta-train only)."""
    root = cfg.output_dir / "grid"
    rows = []
    for i, point in enumerate(cfg.grid_points()):
        doc = cfg.doc
        for key, value in point.items():
            doc = set_path(doc, key, value)
        sub = validate(set_path(doc, "output_dir", str(root / f"run_{i:03d}")))
        emit(f"grid point {i}: {point}")
        try:
            cmd_train("meta-train", sub, task_dir, workers, timing=timing, emit=emit)
            log = (sub.output_dir / "logs" / "mandril.jsonl").read_text().splitlines()
            tail = [json.loads(line)["meta_loss"] for line in log[-10:]]
            status, final = "ok", float(np.mean(tail))
        except NumericFailure:
            status, final = "numeric-failure", None
        rows.append({"run": i, "point": point, "config_hash": sub.config_hash, "status": status,
                     "final_meta_loss": final})
    summary = {**cfg.stamp(), "runs": rows}
    (root / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    emit(f"grid summary written to {root / 'summary.json'}")
    return root


# -- evaluation ----------------------------------------------------------------------------

def _evaluate_task(job):
    path, inits, arch_doc, bench, pre = job
    task = load_task(path)
    arch = rm.RewardArchitecture.from_dict(arch_doc)
    recs = []
    if pre:
        zero = BenchmarkConfig((0,), 0, bench.step_size, bench.weight_decay, bench.seed)
        recs += run_benchmark(inits, [task], arch, zero)
    recs += run_benchmark(inits, [task], arch, bench)
    return recs


def resolve_checkpoints(cfg: ExperimentConfig, given: dict[str, str]) -> dict[str, Path]:
    out = {}
    for method in cfg.doc["benchmark"]["methods"]:
        if method == FROM_SCRATCH:
            continue
        p = Path(given.get(method, cfg.output_dir / "checkpoints" / f"{CHECKPOINT_NAMES[method]}.json"))
        if not p.is_file():
            raise MissingCheckpointError(f"MissingCheckpointError: no checkpoint for {method} at {p}")
        out[method] = p
    return out


def cmd_evaluate(cfg: ExperimentConfig, task_dir: Path, workers: int, checkpoints: dict[str, str],
                 emit=print) -> tuple[Path, Path]:
    bench_doc = cfg.doc["benchmark"]
    paths = split_paths(task_dir, cfg, bench_doc["split"])
    probe = load_task(paths[0])
    arch = cfg.arch(probe.train_env.obs.shape[1])
    ckpts = resolve_checkpoints(cfg, checkpoints)
    inits: dict[str, object] = {}
    provenance = {}
    for method in bench_doc["methods"]:
        if method == FROM_SCRATCH:
            inits[method] = RANDOM_INIT
            continue
        c_arch, theta, head, _ = rm.load_checkpoint(ckpts[method])
        if c_arch.to_dict() != arch.to_dict():
            raise ConfigError(f"checkpoint {ckpts[method]} does not match the configured reward architecture")
        inits[method] = theta
        provenance[method] = {"sha256": hashlib.sha256(ckpts[method].read_bytes()).hexdigest(), "config_hash": head.get("meta", {}).get("config_hash"),
                              "iteration": head.get("meta", {}).get("iteration")}
    bench = cfg.benchmark()
    jobs = [(p, inits, arch.to_dict(), bench, bench_doc["pre_adaptation"]) for p in paths]
    records = [r for part in ordered_map(_evaluate_task, jobs, workers) for r in part]
    out = cfg.output_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    stamp = cfg.stamp()
    csv_path = out / "results.csv"
    csv_path.write_text(records_to_csv(records, f"config {stamp['config_hash']} version {stamp['version']}"))
    n_boot = bench_doc["bootstrap_resamples"]
    summary = {**stamp, "split": bench_doc["split"], "num_tasks": len(paths), "checkpoints": provenance,
               **summarize(records, n_boot, cfg.seed), "paired": paired_summary(records, n_boot, cfg.seed)}
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write_config(cfg)
    for e in summary["entries"]:
        emit(f"{e['method']:20s} K={e['num_demos']:3d}  test EVD {e['evd_test_mean']:8.3f}  "
             f"train EVD {e['evd_train_mean']:8.3f}")
    emit(f"wrote {csv_path} and {json_path}")
    return csv_path, json_path


def paired_summary(records, n_resamples: int, seed: int) -> list[dict]:
    """MandRIL minus each baseline, per demo count, with a bootstrap interval of the mean difference."""
    methods = sorted({r.method for r in records})
    if MANDRIL not in methods:
        return []
    out = []
    for other in (m for m in methods if m != MANDRIL):
        for k in sorted({r.num_demos for r in records}):
            d = paired_differences(records, MANDRIL, other, k)
            if d.size == 0:
                continue
            out.append({"a": MANDRIL, "b": other, "num_demos": k, "n": int(d.size), "mean_diff": float(d.mean()),
                        "ci95": list(bootstrap_ci(d, n_resamples, seed))})
    return out


# -- entry point ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mandril", description="Few-shot MaxEnt IRL with meta-learned reward initialisations.")
    p.add_argument("--version", action="version", version=f"mandril {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, tasks=True):
        sp.add_argument("config", nargs="?", help="JSON experiment config (defaults apply to missing keys)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. meta.inner_step_size=0.5")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: MANDRIL_WORKERS, else available CPUs)")
        if tasks:
            sp.add_argument("--tasks", default=None, help="task bundle directory (default: <output_dir>/tasks)")

    common(sub.add_parser("generate", help="write task bundles and a manifest"), tasks=False)
    for verb in TRAIN_KINDS:
        sp = sub.add_parser(verb, help="meta-train the reward initialisation" if verb == "meta-train"
                            else "pretrain on the average IRL gradient (baseline)")
        common(sp)
        sp.add_argument("--resume", default=None, help="continue bit-exactly from this checkpoint")
        sp.add_argument("--timing", action="store_true", help="record wall_ms per iteration in the log")
        sp.add_argument("--stop-after", type=int, default=None, help="stop once this many iterations are done")
        if verb == "meta-train":
            sp.add_argument("--mode", choices=["full", "diag_curvature", "first_order"], default=None,
                            help="meta-gradient mode (shorthand for --set meta.gradient_mode=...)")
            sp.add_argument("--grid", action="store_true", help="sweep the config's grid choice sets")
    sp = sub.add_parser("evaluate", help="few-shot benchmark of trained initialisations")
    common(sp)
    sp.add_argument("--checkpoint", action="append", default=[], metavar="METHOD=PATH",
                    help="checkpoint for a method (default: <output_dir>/checkpoints/{mandril,avg}.json)")
    sub.add_parser("selfcheck", help="run the embedded oracle suite")
    return p


def _dispatch(args, emit) -> int:
    if args.verb == "selfcheck":
        from .selfcheck import run_selfcheck

        results = run_selfcheck(emit)
        passed = sum(r.passed for r in results)
        emit(f"{passed}/{len(results)} checks passed (mandril {__version__})")
        return EXIT_OK if passed == len(results) else EXIT_NUMERIC

    workers = resolve_workers(args.workers)
    overrides = list(args.overrides)
    if getattr(args, "mode", None):
        overrides.append(f"meta.gradient_mode={args.mode}")
    cfg = load_config(args.config, overrides)
    if args.verb == "generate":
        cmd_generate(cfg, workers, emit)
        return EXIT_OK
    task_dir = Path(args.tasks) if args.tasks else cfg.output_dir / "tasks"
    if args.verb in TRAIN_KINDS:
        if getattr(args, "grid", False):
            if args.resume or args.stop_after is not None:
                raise _UsageError("--grid cannot be combined with --resume or --stop-after")
            cmd_grid(cfg, task_dir, workers, args.timing, emit)
        else:
            cmd_train(args.verb, cfg, task_dir, workers, args.resume, args.stop_after, args.timing, emit)
        return EXIT_OK
    given = {}
    for item in args.checkpoint:
        if "=" not in item:
            raise _UsageError(f"--checkpoint expects METHOD=PATH, got {item!r}")
        k, v = item.split("=", 1)
        if k not in CHECKPOINT_NAMES:
            raise _UsageError(f"--checkpoint: unknown method {k!r} (expected one of {sorted(CHECKPOINT_NAMES)})")
        given[k] = v
    cmd_evaluate(cfg, task_dir, workers, given, emit)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    def emit(line):
        print(line, flush=True)

    try:
        return _dispatch(args, emit)
    except _UsageError as exc:
        print(f"mandril: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"mandril: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"mandril: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"mandril: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
