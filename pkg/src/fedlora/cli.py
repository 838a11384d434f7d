"""Configuration-driven experiment runner.

A JSON config file (all keys optional) plus command-line flags (flags win)
resolve into one fully-validated RunConfig. `--methods a,b,c` runs each
strategy on the identical task, partition, and adapter init, then exports
the comparison metrics bundle.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .aggregation import METHODS, StrategyConfig
from .fedsim import (
    TrainerConfig,
    dirichlet_partition,
    initial_round_state,
    make_teacher_student_task,
    run_federated,
)
from .lora import delta_weight
from .metrics import export_reports, loss_landscape_grid, trajectory_pca

__all__ = ["RunConfig", "ConfigError", "parse_config", "run_experiment", "main"]

_TAG_TASK = 5  # task-generation sub-stream

DEFAULTS: dict = {
    "task": {
        "d": 64,
        "k": 64,
        "r_star": 8,
        "n_samples": 512,
        "noise_std": 0.05,
        "layers": 1,
        "teacher_scale": 0.1,
        "cluster_count": 1,
        "cluster_spread": 0.0,
    },
    "model": {"r": 32, "alpha": 64.0, "init_b_random": False},
    "federation": {"n": 10, "rounds": 20, "beta": 0.5, "weighting": "uniform_mean"},
    "strategy": {"tau": 0.9999, "balanced_split": True, "keep_residual": True},
    "trainer": {
        "optimizer": "adamw",
        "learning_rate": 3e-4,
        "local_steps": 10,
        "batch_size": 16,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.01,
    },
    "methods": ["fedmomentum"],
    "seed": 0,
    "out_dir": "out",
}

_WEIGHTING_FLAG = {"mean": "uniform_mean", "sum": "unweighted_sum", "samples": "sample_weighted"}


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: dict
    model: dict
    federation: dict
    strategy: dict
    trainer: dict
    methods: list[str]
    seed: int
    out_dir: str

    def to_record(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "federation": self.federation,
            "strategy": self.strategy,
            "trainer": self.trainer,
            "methods": self.methods,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }


def _merge_checked(base: dict, override: dict, path: str, errors: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        loc = f"{path}.{key}" if path else key
        if key not in base:
            errors.append(f"unknown config key: {loc}")
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                errors.append(f"{loc} must be an object")
                continue
            out[key] = _merge_checked(base[key], value, loc, errors)
        else:
            out[key] = value
    return out


def _validate(cfg: dict) -> list[str]:
    errors = []
    t, m, f, s, tr = cfg["task"], cfg["model"], cfg["federation"], cfg["strategy"], cfg["trainer"]
    if t["d"] < 1 or t["k"] < 1:
        errors.append("task.d and task.k must be >= 1")
    if not (0 <= t["r_star"] <= min(t["d"], t["k"])):
        errors.append("task.r_star must be in [0, min(d, k)]")
    if t["n_samples"] < 1:
        errors.append("task.n_samples must be >= 1")
    if t["noise_std"] < 0:
        errors.append("task.noise_std must be >= 0")
    if t["teacher_scale"] < 0:
        errors.append("task.teacher_scale must be >= 0")
    if t["layers"] < 1:
        errors.append("task.layers must be >= 1")
    if not (1 <= m["r"] <= min(t["d"], t["k"])):
        errors.append("model.r must be in [1, min(task.d, task.k)]")
    if m["alpha"] <= 0:
        errors.append("model.alpha must be > 0")
    if f["n"] < 1:
        errors.append("federation.n must be >= 1")
    if f["rounds"] < 0:
        errors.append("federation.rounds must be >= 0")
    if f["beta"] <= 0:
        errors.append("federation.beta must be > 0")
    if f["weighting"] not in ("uniform_mean", "sample_weighted", "unweighted_sum"):
        errors.append("federation.weighting invalid")
    if f["n"] > t["n_samples"]:
        errors.append("federation.n exceeds task.n_samples")
    if not (0 < s["tau"] <= 1):
        errors.append("strategy.tau must be in (0, 1]")
    if tr["optimizer"] not in ("sgd", "adamw"):
        errors.append("trainer.optimizer must be sgd or adamw")
    if tr["learning_rate"] < 0:
        errors.append("trainer.learning_rate must be >= 0")
    if tr["local_steps"] < 0:
        errors.append("trainer.local_steps must be >= 0")
    if tr["batch_size"] < 1:
        errors.append("trainer.batch_size must be >= 1")
    for method in cfg["methods"]:
        if method not in METHODS:
            errors.append(f"unknown method {method!r} (choose from {', '.join(METHODS)})")
    return errors


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve file values and flag overrides against the defaults.

    Unknown keys anywhere are a hard error; all validation violations are
    reported at once.
    """
    errors: list[str] = []
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config root in {path} must be a JSON object")
        cfg = _merge_checked(cfg, file_cfg, "", errors)
    if overrides:
        cfg = _merge_checked(cfg, overrides, "", errors)
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError("; ".join(errors))
    return RunConfig(
        task=cfg["task"],
        model=cfg["model"],
        federation=cfg["federation"],
        strategy=cfg["strategy"],
        trainer=cfg["trainer"],
        methods=list(cfg["methods"]),
        seed=int(cfg["seed"]),
        out_dir=str(cfg["out_dir"]),
    )


def _partition_hash(n_samples: int, n: int, beta: float, seed: int) -> str:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    parts = dirichlet_partition(n_samples, n, beta, rng)
    h = hashlib.sha256()
    for p in parts:
        h.update(p.indices.astype("<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()


def run_experiment(config: RunConfig) -> int:
    """Run every requested method on the identical task/partition/init, export metrics."""
    started = time.time()
    t = config.task
    task_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([config.seed, _TAG_TASK]))
    )
    task = make_teacher_student_task(
        t["d"],
        t["k"],
        t["r_star"],
        t["n_samples"],
        t["noise_std"],
        task_rng,
        layers=t["layers"],
        teacher_scale=t["teacher_scale"],
        cluster_count=t["cluster_count"],
        cluster_spread=t["cluster_spread"],
    )
    trainer = TrainerConfig(**config.trainer)
    fed = config.federation

    reports_by_method = {}
    timings = {}
    for method in config.methods:
        strategy = StrategyConfig(
            method=method, weighting=fed["weighting"], **config.strategy
        )
        t0 = time.perf_counter()
        reports_by_method[method] = run_federated(
            task,
            strategy,
            trainer,
            fed["n"],
            fed["rounds"],
            config.seed,
            r=config.model["r"],
            alpha=config.model["alpha"],
            beta=fed["beta"],
            init_b_random=config.model["init_b_random"],
        )
        timings[method] = time.perf_counter() - t0

    # joint PCA of the tracked layer's weight increments across all methods
    deltas, rounds_idx, methods_col = [], [], []
    for method, reps in reports_by_method.items():
        for rep in reps:
            deltas.append(rep.tracked_delta)
            rounds_idx.append(rep.round_index)
            methods_col.append(method)

    trajectory_rows = None
    landscape_rows = None
    if len(deltas) >= 2:
        state0 = initial_round_state(task, config.model["r"], config.model["alpha"], config.seed)
        base_eff = [
            state0.backbones[layer].W + delta_weight(state0.adapters[layer])
            for layer in range(task.n_layers)
        ]

        def loss_at(delta0: np.ndarray) -> float:
            total = 0.0
            N = task.n_samples
            for layer in range(task.n_layers):
                W = base_eff[layer] + delta0 if layer == 0 else base_eff[layer]
                resid = W @ task.inputs - task.targets[layer]
                total += 0.5 * float(np.sum(resid * resid)) / N
            return total

        trajectory_rows, plane = trajectory_pca(deltas, rounds_idx, methods_col, loss_fn=loss_at)
        landscape_rows = loss_landscape_grid(
            plane, trajectory_rows, loss_at, shape=(t["d"], t["k"])
        )

    run_record = {
        "config": config.to_record(),
        "library_version": _version(),
        "partition_hash": _partition_hash(t["n_samples"], fed["n"], fed["beta"], config.seed),
        "fedlora_threads": os.environ.get("FEDLORA_THREADS", ""),
        "timestamps": {"started_unix": started, "finished_unix": time.time()},
        "method_wall_times": timings,
        "round_wall_times": {
            method: [rep.wall_time for rep in reps]
            for method, reps in reports_by_method.items()
        },
    }
    export_reports(
        reports_by_method,
        config.out_dir,
        run_record,
        trajectory_rows=trajectory_rows,
        landscape_rows=landscape_rows,
    )
    return 0


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("fedlora")
    except Exception:
        return "unknown"


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedlora",
        description="Run federated LoRA aggregation experiments on a synthetic task.",
    )
    p.add_argument("--config", help="JSON config file (flags override file values)")
    p.add_argument("--methods", help=f"comma-separated subset of: {', '.join(METHODS)}")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--tau", type=float)
    p.add_argument("--no-balance", action="store_true", help="unbalanced factor reconstruction")
    p.add_argument("--no-residual", action="store_true", help="drop residual components")
    p.add_argument("--weighting", choices=sorted(_WEIGHTING_FLAG))
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides: dict = {"federation": {}, "strategy": {}}
    if args.methods is not None:
        overrides["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.rounds is not None:
        overrides["federation"]["rounds"] = args.rounds
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.tau is not None:
        overrides["strategy"]["tau"] = args.tau
    if args.no_balance:
        overrides["strategy"]["balanced_split"] = False
    if args.no_residual:
        overrides["strategy"]["keep_residual"] = False
    if args.weighting is not None:
        overrides["federation"]["weighting"] = _WEIGHTING_FLAG[args.weighting]
    overrides = {k: v for k, v in overrides.items() if v != {}}

    try:
        config = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return run_experiment(config)
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
