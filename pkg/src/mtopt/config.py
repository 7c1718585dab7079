"""Experiment configuration: flat key=value text with dotted namespaces.

Strict by construction — unknown keys are rejected, every value is validated
before any compute, and the parsed result echoes back as nested JSON so a
run directory always carries its exact inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .grouping import GroupPartition, parse_groups
from .optim import (METHOD_FIXED, METHOD_JOINT, METHOD_RANDOM, METHOD_SELECTIVE,
                    METHOD_SEPARATE)

METHOD_SINGLE = "SINGLE"  # per-task baselines trained independently

ALL_METHODS = (METHOD_SELECTIVE, METHOD_JOINT, METHOD_SEPARATE, METHOD_FIXED,
               METHOD_RANDOM, METHOD_SINGLE)


class ConfigError(ValueError):
    pass


KNOWN_KEYS = {
    "method": "optimization method: " + "|".join(ALL_METHODS),
    "order": "group update order: RANDOM|FORWARD|BACKWARD",
    "eta": "learning rate (> 0)",
    "beta": "affinity decay rate in (0,1)",
    "iters": "training iterations (>= 1)",
    "optimizer": "sgd|adam",
    "seed": "base random seed (int)",
    "weights": "comma-separated task loss weights",
    "fixed.partition": "partition for FIXED, e.g. 1,2|3",
    "random.groups": "group count for RANDOM",
    "repartition.stride": "iterations between repartitions (>= 1)",
    "grouping.rule": "components|cliques",
    "track.affinity": "true|false, force affinity tracking on/off",
    "benchmark.kind": "quadratic|regression|csv",
    "quadratic.k": "task count",
    "quadratic.shared_dim": "shared parameter dimension",
    "quadratic.task_dim": "per-task parameter dimension",
    "quadratic.rows": "residual rows",
    "quadratic.rho": "pairwise target alignment in [-1,1]",
    "quadratic.seed": "generator seed (defaults to seed)",
    "regression.preset": "named preset: triad",
    "regression.k": "task count",
    "regression.input_dim": "input dimension",
    "regression.hidden": "ground-truth latent width",
    "regression.conflict": "conflict knob in [0,1]",
    "regression.conflict_scale": "conflict task target amplitude (> 0)",
    "regression.nuisance": "opposed nuisance amplitude in the aligned cluster",
    "regression.noise": "target noise level",
    "regression.train": "training sample count",
    "regression.eval": "evaluation sample count",
    "regression.seed": "generator seed (defaults to seed)",
    "csv.path": "dataset file",
    "csv.inputs": "comma-separated input columns",
    "model.width": "trunk width",
    "model.depth": "trunk depth",
    "model.activation": "tanh|relu",
    "batch.size": "minibatch size",
    "log.verbosity": "0 (quiet) or 1",
}
# csv.targets.<task id> carries that task's target columns; validated separately.


@dataclass
class ExperimentConfig:
    method: str = METHOD_SELECTIVE
    order: str = "RANDOM"
    eta: float = 0.05
    beta: float = 0.001
    iters: int = 100
    optimizer: str = "sgd"
    seed: int = 0
    weights: dict[int, float] | None = None
    fixed_partition: GroupPartition | None = None
    random_groups: int | None = None
    repartition_stride: int = 1
    grouping_rule: str = "components"
    track_affinity: bool | None = None
    benchmark_kind: str = "regression"
    quadratic: dict = field(default_factory=dict)
    regression: dict = field(default_factory=dict)
    csv_path: str | None = None
    csv_inputs: list[str] = field(default_factory=list)
    csv_targets: dict[int, list[str]] = field(default_factory=dict)
    model_width: int = 16
    model_depth: int = 2
    model_activation: str = "tanh"
    batch_size: int = 32
    verbosity: int = 1
    raw: dict[str, str] = field(default_factory=dict)


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, value = body.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def _want(raw, key, conv, default=None, check=None, describe=""):
    if key not in raw:
        return default
    try:
        value = conv(raw[key])
    except (ValueError, TypeError):
        raise ConfigError(f"field '{key}': cannot parse {raw[key]!r} ({describe})") from None
    if check is not None and not check(value):
        raise ConfigError(f"field '{key}': invalid value {raw[key]!r} ({describe})")
    return value


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(text)


def validate_config(raw: dict[str, str]) -> ExperimentConfig:
    for key in raw:
        if key in KNOWN_KEYS or key.startswith("csv.targets."):
            continue
        raise ConfigError(f"unknown config key '{key}'")

    cfg = ExperimentConfig(raw=dict(raw))
    cfg.method = _want(raw, "method", str, cfg.method,
                       lambda v: v in ALL_METHODS, KNOWN_KEYS["method"])
    cfg.order = _want(raw, "order", str, cfg.order,
                      lambda v: v in ("RANDOM", "FORWARD", "BACKWARD"), KNOWN_KEYS["order"])
    cfg.eta = _want(raw, "eta", float, cfg.eta, lambda v: v > 0, KNOWN_KEYS["eta"])
    cfg.beta = _want(raw, "beta", float, cfg.beta, lambda v: 0 < v < 1, KNOWN_KEYS["beta"])
    cfg.iters = _want(raw, "iters", int, cfg.iters, lambda v: v >= 1, KNOWN_KEYS["iters"])
    cfg.optimizer = _want(raw, "optimizer", str, cfg.optimizer,
                          lambda v: v in ("sgd", "adam"), KNOWN_KEYS["optimizer"])
    cfg.seed = _want(raw, "seed", int, cfg.seed, describe=KNOWN_KEYS["seed"])
    if "weights" in raw:
        try:
            values = [float(x) for x in raw["weights"].split(",")]
        except ValueError:
            raise ConfigError(f"field 'weights': cannot parse {raw['weights']!r}") from None
        if any(w <= 0 for w in values):
            raise ConfigError("field 'weights': weights must be positive")
        cfg.weights = {i + 1: w for i, w in enumerate(values)}
    if "fixed.partition" in raw:
        try:
            cfg.fixed_partition = parse_groups(raw["fixed.partition"])
        except ValueError as e:
            raise ConfigError(f"field 'fixed.partition': {e}") from None
    cfg.random_groups = _want(raw, "random.groups", int, None, lambda v: v >= 1,
                              KNOWN_KEYS["random.groups"])
    cfg.repartition_stride = _want(raw, "repartition.stride", int, 1, lambda v: v >= 1,
                                   KNOWN_KEYS["repartition.stride"])
    cfg.grouping_rule = _want(raw, "grouping.rule", str, "components",
                              lambda v: v in ("components", "cliques"),
                              KNOWN_KEYS["grouping.rule"])
    cfg.track_affinity = _want(raw, "track.affinity", _bool, None, describe="true|false")
    cfg.benchmark_kind = _want(raw, "benchmark.kind", str, cfg.benchmark_kind,
                               lambda v: v in ("quadratic", "regression", "csv"),
                               KNOWN_KEYS["benchmark.kind"])
    if cfg.method == METHOD_FIXED and cfg.fixed_partition is None:
        raise ConfigError("field 'fixed.partition': required for method FIXED")
    if cfg.method == METHOD_RANDOM and cfg.random_groups is None:
        raise ConfigError("field 'random.groups': required for method RANDOM")

    cfg.quadratic = {
        "k": _want(raw, "quadratic.k", int, 2, lambda v: v >= 2, "task count"),
        "shared_dim": _want(raw, "quadratic.shared_dim", int, 6, lambda v: v >= 1, ""),
        "task_dim": _want(raw, "quadratic.task_dim", int, 2, lambda v: v >= 0, ""),
        "rows": _want(raw, "quadratic.rows", int, 8, lambda v: v >= 1, ""),
        "rho": _want(raw, "quadratic.rho", float, None, lambda v: -1 <= v <= 1, ""),
        "seed": _want(raw, "quadratic.seed", int, None),
    }
    cfg.regression = {
        "preset": _want(raw, "regression.preset", str, None, lambda v: v == "triad",
                        KNOWN_KEYS["regression.preset"]),
        "k": _want(raw, "regression.k", int, 3, lambda v: v >= 2, ""),
        "input_dim": _want(raw, "regression.input_dim", int, 8, lambda v: v >= 1, ""),
        "hidden": _want(raw, "regression.hidden", int, 8, lambda v: v >= 1, ""),
        "conflict": _want(raw, "regression.conflict", float, 1.0, lambda v: 0 <= v <= 1, ""),
        "conflict_scale": _want(raw, "regression.conflict_scale", float, 4.0, lambda v: v > 0, ""),
        "nuisance": _want(raw, "regression.nuisance", float, 0.8, lambda v: v >= 0, ""),
        "noise": _want(raw, "regression.noise", float, 0.1, lambda v: v >= 0, ""),
        "train": _want(raw, "regression.train", int, 512, lambda v: v >= 1, ""),
        "eval": _want(raw, "regression.eval", int, 256, lambda v: v >= 1, ""),
        "seed": _want(raw, "regression.seed", int, None),
    }
    cfg.model_width = _want(raw, "model.width", int, 16, lambda v: v >= 1, "")
    cfg.model_depth = _want(raw, "model.depth", int, 2, lambda v: v >= 1, "")
    cfg.model_activation = _want(raw, "model.activation", str, "tanh",
                                 lambda v: v in ("tanh", "relu"), "")
    cfg.batch_size = _want(raw, "batch.size", int, 32, lambda v: v >= 1, "")
    cfg.verbosity = _want(raw, "log.verbosity", int, 1, lambda v: v in (0, 1), "")

    cfg.csv_path = raw.get("csv.path")
    if "csv.inputs" in raw:
        cfg.csv_inputs = [c.strip() for c in raw["csv.inputs"].split(",") if c.strip()]
    for key, value in raw.items():
        if key.startswith("csv.targets."):
            tail = key[len("csv.targets."):]
            try:
                tid = int(tail)
            except ValueError:
                raise ConfigError(f"field '{key}': task id '{tail}' is not an integer") from None
            cfg.csv_targets[tid] = [c.strip() for c in value.split(",") if c.strip()]
    if cfg.benchmark_kind == "csv":
        if not cfg.csv_path:
            raise ConfigError("field 'csv.path': required for csv benchmarks")
        if not cfg.csv_inputs:
            raise ConfigError("field 'csv.inputs': required for csv benchmarks")
        if not cfg.csv_targets:
            raise ConfigError("field 'csv.targets.<task>': at least one task required")
        ids = sorted(cfg.csv_targets)
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"field 'csv.targets': task ids must be contiguous from 1, got {ids}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return validate_config(parse_kv_text(text))


def echo_dict(cfg: ExperimentConfig) -> dict:
    """Nested echo of the raw keys (dots become levels), values as typed."""
    nested: dict = {}
    for key, value in sorted(cfg.raw.items()):
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested
