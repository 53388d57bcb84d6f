"""Experiment configuration: strict key-tree loading, hashing, resolution.

Config files are YAML/JSON trees mirroring the dataclasses below.  Unknown
keys are rejected with their full path -- silent hyperparameter typos are the
main reproducibility hazard this guards against.  The single top-level
master_seed drives dataset generation, parameter init, and batch sampling;
per-section seeds are not accepted.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace

import yaml

from . import __version__
from .data import DatasetConfig
from .data import ConfigError as ConfigError  # re-exported; CLI exit code 2


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "branched"  # joint | branched | relabel
    shared_depth: int = 2

    def __post_init__(self):
        if self.kind not in ("joint", "branched", "relabel"):
            raise ConfigError(f"model.kind must be joint|branched|relabel, "
                              f"got {self.kind!r}")
        if not 0 <= self.shared_depth <= 4:
            raise ConfigError("model.shared_depth must be in [0, 4]")


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    batch: int = 180
    branch_batch: int = 60
    iters: int = 2000
    specialist_iters: int = 0  # 0 -> same as iters
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.batch < 2 or self.branch_batch < 2:
            raise ConfigError("batch sizes must be >= 2")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")


@dataclass(frozen=True)
class PartitionSpec:
    source: str = "kmeans"  # kmeans | semantic | random | manual
    n_clusters: int = 3
    restarts: int = 50
    manual_clusters: tuple = ()

    def __post_init__(self):
        if self.source not in ("kmeans", "semantic", "random", "manual"):
            raise ConfigError(
                f"partition.source must be kmeans|semantic|random|manual, "
                f"got {self.source!r}"
            )
        if self.source == "manual" and not self.manual_clusters:
            raise ConfigError("partition.manual_clusters required for manual source")


@dataclass(frozen=True)
class SweepSpec:
    shared_depths: tuple = ()
    branch_counts: tuple = ()
    random_trials: int = 3


@dataclass(frozen=True)
class FoldSpec:
    n_folds: int = 3

    def __post_init__(self):
        if self.n_folds < 1:
            raise ConfigError("folds.n_folds must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainSpec = field(default_factory=TrainSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    folds: FoldSpec = field(default_factory=FoldSpec)
    fdr_target: float = 0.02
    out_dir: str = "runs/exp"
    master_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fdr_target < 1.0:
            raise ConfigError("fdr_target must be in (0, 1)")

    def resolved_dataset(self):
        return replace(self.dataset, master_seed=self.master_seed)

    def with_seed(self, seed):
        return replace(self, master_seed=int(seed))

    def with_out_dir(self, out_dir):
        return replace(self, out_dir=str(out_dir))


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "model": ModelSpec,
    "training": TrainSpec,
    "partition": PartitionSpec,
    "sweep": SweepSpec,
    "folds": FoldSpec,
}

# seeds are set once at the top level
_REJECTED = {"dataset.master_seed"}


def _build_section(cls, tree, path):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(tree).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        full = f"{path}.{key}" if path else key
        if full in _REJECTED:
            raise ConfigError(f"{full}: set the top-level master_seed instead")
        if key not in names:
            raise ConfigError(f"{full}: unknown key")
        if isinstance(value, list):
            value = _tuplify(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _tuplify(value):
    return tuple(_tuplify(v) if isinstance(v, list) else v for v in value)


def from_tree(tree):
    """Build an ExperimentConfig from a parsed key-tree, strictly."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in tree.items():
        if key not in top_fields:
            raise ConfigError(f"{key}: unknown key")
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = _tuplify(value) if isinstance(value, list) else value
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    with open(path) as fh:
        try:
            tree = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_tree(tree)


def to_tree(cfg):
    tree = _clean(dataclasses.asdict(cfg))
    tree["dataset"].pop("master_seed", None)  # derived from the top level
    return tree


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def config_hash(cfg):
    """Stable hash of the experiment parameters (seed included).

    The output directory is a storage location, not an experiment parameter,
    so it does not participate: runs to two directories stay comparable.
    """
    tree = to_tree(cfg)
    tree.pop("out_dir", None)
    blob = json.dumps(tree, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stamp(cfg):
    """Provenance block embedded in every emitted artifact."""
    return {"config_hash": config_hash(cfg), "tool_version": __version__}
