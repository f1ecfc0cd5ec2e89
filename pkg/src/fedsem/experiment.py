"""Experiment configuration and the cluster -> partition -> simulate pipeline."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from fedsem import fileio
from fedsem.datagen import GeneratorSpec, make_testbed
from fedsem.flcore import (AggregatorSpec, ConfigError, Evaluator, RoundConfig, aggregator_from_json,
                           aggregator_to_json, build_clients, run_simulation)
from fedsem.metrics import write_history_csv, write_history_jsonl
from fedsem.partition import PartitionPlan, PartitionSpec, heterogeneity_report, make_plan
from fedsem.semantics import (AnnotationRecord, CategoryMap, balance_clusters, build_tensors,
                              cluster_sizes, kmeans_fit)
from fedsem.trainer import Layout, LocalTrainConfig, save_params

log = logging.getLogger(__name__)

ASSIGNMENT_FILE = "assignment.jsonl"
CLUSTER_SUMMARY_FILE = "cluster_summary.json"
PLAN_FILE = "plan.json"
HETEROGENEITY_FILE = "heterogeneity.csv"
HISTORY_JSONL = "history.jsonl"
HISTORY_CSV = "history.csv"
CONFIG_FILE = "config.json"
PARAMS_FILE = "global_params.bin"


@dataclass(frozen=True)
class ClusteringConfig:
    n: int = 5
    seed: int = 0
    tol: float = 1e-6
    max_iters: int = 300
    n_init: int = 10
    normalize: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.max_iters < 1 or self.n_init < 1:
            raise ValueError("max_iters and n_init must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclass(frozen=True)
class DatasetConfig:
    path: Path | None = None
    test_path: Path | None = None
    generator: GeneratorSpec | None = None
    holdout_fraction: float = 0.2
    holdout_seed: int = 0

    def __post_init__(self):
        if (self.path is None) == (self.generator is None):
            raise ValueError("give exactly one of 'path' or 'generator'")

    def to_json(self) -> dict:
        if self.generator is not None:
            return {"generator": self.generator.to_json(), "holdout_fraction": self.holdout_fraction,
                    "holdout_seed": self.holdout_seed}
        out = {"path": str(self.path)}
        if self.test_path is not None:
            out["test_path"] = str(self.test_path)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    partition: PartitionSpec
    rounds: RoundConfig
    aggregator: AggregatorSpec = field(default_factory=lambda: aggregator_from_json({"name": "fedavg"}))
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    category_map: Path | None = None
    balance: bool = True
    output_dir: Path | None = None

    def to_json(self) -> dict:
        out = {
            "dataset": self.dataset.to_json(),
            "category_map": None if self.category_map is None else str(self.category_map),
            "clustering": _plain(self.clustering),
            "balance": self.balance,
            "partition": self.partition.to_json(),
            "rounds": _plain(self.rounds),
            "aggregator": aggregator_to_json(self.aggregator),
            "local": _plain(self.local),
        }
        if self.output_dir is not None:
            out["output_dir"] = str(self.output_dir)
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Every seed in the config replaced by ``seed``."""
        ds = self.dataset
        if ds.generator is not None:
            ds = replace(ds, generator=replace(ds.generator, seed=seed), holdout_seed=seed)
        return replace(self, dataset=ds, clustering=replace(self.clustering, seed=seed),
                       partition=replace(self.partition, seed=seed),
                       rounds=replace(self.rounds, master_seed=seed))


def _plain(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _section(path: str, raw: Any, build):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected an object")
    try:
        return build(dict(raw))
    except ConfigError as exc:
        if str(exc).startswith("config."):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError, KeyError) as exc:
        msg = exc.args[0] if exc.args else repr(exc)
        if isinstance(exc, KeyError):
            msg = f"missing field {msg!r}"
        elif isinstance(exc, TypeError) and "unexpected keyword" in str(msg):
            msg = "unknown field " + str(msg).split("argument ")[-1]
        raise ConfigError(f"{path}: {msg}") from None


def _resolve(base: Path | None, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() or base is None else base / p


def _dataset(raw: dict, base: Path | None) -> DatasetConfig:
    if "generator" in raw:
        gen = _section("config.dataset.generator", raw.pop("generator"), lambda d: GeneratorSpec(**d))
        return DatasetConfig(generator=gen, **raw)
    for key in ("path", "test_path"):
        if raw.get(key) is not None:
            raw[key] = _resolve(base, raw[key])
            if not raw[key].exists():
                raise ValueError(f"{key} {str(raw[key])!r} does not exist")
    return DatasetConfig(**raw)


KNOWN_KEYS = {"dataset", "category_map", "clustering", "balance", "partition", "rounds",
              "aggregator", "local", "output_dir"}


def config_from_json(raw: Mapping, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed config; errors name the offending field path."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"config.{unknown[0]}: unknown field")
    for key in ("dataset", "partition", "rounds"):
        if key not in raw:
            raise ConfigError(f"config.{key}: missing section")
    dataset = _section("config.dataset", raw["dataset"], lambda d: _dataset(d, base_dir))
    cmap = None
    if raw.get("category_map") is not None:
        cmap = _resolve(base_dir, raw["category_map"])
        if not cmap.exists():
            raise ConfigError(f"config.category_map: {str(cmap)!r} does not exist")
    balance = raw.get("balance", True)
    if not isinstance(balance, bool):
        raise ConfigError("config.balance: expected true or false")
    out = raw.get("output_dir")
    return ExperimentConfig(
        dataset=dataset,
        partition=_section("config.partition", raw["partition"], PartitionSpec.from_json),
        rounds=_section("config.rounds", raw["rounds"], lambda d: RoundConfig(**d)),
        aggregator=_section("config.aggregator", raw.get("aggregator", {"name": "fedavg"}), aggregator_from_json),
        local=_section("config.local", raw.get("local", {}), lambda d: LocalTrainConfig(**d)),
        clustering=_section("config.clustering", raw.get("clustering", {}), lambda d: ClusteringConfig(**d)),
        category_map=cmap, balance=balance,
        output_dir=None if out is None else _resolve(base_dir, out),
    )


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("fedsem") / "configs" / f"{name}.json"))


def load_config(path) -> ExperimentConfig:
    """Read a config file; a bare name such as ``quickstart`` picks a bundled one."""
    path = Path(path)
    if not path.exists() and path.suffix == "" and bundled_config_path(str(path)).exists():
        path = bundled_config_path(str(path))
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: malformed JSON at line {exc.lineno} ({exc.msg})") from None
    return config_from_json(raw, path.parent)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as f:
        json.dump(cfg.to_json(), f, indent=1)
        f.write("\n")


@dataclass
class Dataset:
    train: list[AnnotationRecord]
    test: list[AnnotationRecord]
    category_map: CategoryMap | None
    dims: tuple[int, ...] | None  # None for attribute data


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.generator is not None:
        train, test, _ = make_testbed(ds.generator, ds.holdout_fraction, ds.holdout_seed)
        dims = ds.generator.dims
    else:
        train = fileio.load_annotations(ds.path)
        test = fileio.load_annotations(ds.test_path) if ds.test_path is not None else []
        dims = None
    cmap = None
    if cfg.category_map is not None:
        rels = [r for rec in train + test for r in rec.relations]
        cmap = fileio.load_category_map(cfg.category_map, used_labels=rels)
        dims = cmap.dims
        train = [_to_super(r, cmap) for r in train]
        test = [_to_super(r, cmap) for r in test]
    elif dims is None and not all(r.is_attribute for r in train + test):
        dims = _infer_dims(train + test)
    return Dataset(train, test, cmap, tuple(dims) if dims is not None else None)


def _to_super(rec: AnnotationRecord, cmap: CategoryMap) -> AnnotationRecord:
    if rec.is_attribute:
        return rec
    return AnnotationRecord(rec.sample_id, tuple(cmap.super_triplet(r) for r in rec.relations))


def _infer_dims(records) -> tuple[int, int, int]:
    rels = np.array([r for rec in records for r in rec.relations], dtype=np.int64).reshape(-1, 3)
    if len(rels) == 0:
        raise ConfigError("config.category_map: needed when the data holds no relations to infer dims from")
    n_obj = int(rels[:, :2].max()) + 1
    return n_obj, n_obj, int(rels[:, 2].max()) + 1


def _tensors(data: Dataset, normalize: bool = False):
    if data.train and all(r.is_attribute for r in data.train):
        return build_tensors(data.train, normalize=normalize)
    return build_tensors(data.train, CategoryMap.identity(data.dims), normalize=normalize)


def run_cluster(cfg: ExperimentConfig, out: Path, data: Dataset | None = None) -> dict[str, int]:
    data = data or load_dataset(cfg)
    c = cfg.clustering
    ids = [r.sample_id for r in data.train]
    tensors = _tensors(data, c.normalize)
    model, assignment = kmeans_fit(tensors, c.n, seed=c.seed, max_iters=c.max_iters, tol=c.tol,
                                   sample_ids=ids, n_init=c.n_init)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_assignment(out / ASSIGNMENT_FILE, assignment)
    sizes = cluster_sizes(assignment)
    summary = {"n_clusters": model.n_clusters, "inertia": model.inertia, "n_iter": model.n_iter,
               "inertia_history": model.inertia_history,
               "sizes": [sizes.get(k, 0) for k in range(model.n_clusters)]}
    with open(out / CLUSTER_SUMMARY_FILE, "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    log.info("clustered %d samples into %d clusters, inertia %.4g", len(ids), model.n_clusters, model.inertia)
    return assignment


def run_partition(cfg: ExperimentConfig, out: Path, assignment: dict[str, int] | None = None) -> PartitionPlan:
    if assignment is None:
        path = out / ASSIGNMENT_FILE
        if not path.exists():
            raise ConfigError(f"no {ASSIGNMENT_FILE} in {str(out)!r}; run 'cluster' first")
        assignment = fileio.load_assignment(path)
    if cfg.balance:
        assignment = balance_clusters(assignment, seed=cfg.clustering.seed)
    plan = make_plan(cfg.partition, assignment)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / PLAN_FILE)
    report = heterogeneity_report(plan, assignment)
    report.write_csv(out / HETEROGENEITY_FILE)
    log.info("partitioned %d samples over %d clients, mean cluster entropy %.3f",
             sum(plan.sizes()), len(plan.clients), report.mean_entropy)
    return plan


def run_simulate(cfg: ExperimentConfig, out: Path, reuse: bool = False, data: Dataset | None = None):
    """Run the whole pipeline, or only training when ``reuse`` picks up an existing plan."""
    data = data or load_dataset(cfg)
    if any(r.is_attribute for r in data.train):
        raise ConfigError("config.dataset: simulation needs relation annotations, not attribute vectors")
    if not data.test:
        raise ConfigError("config.dataset.test_path: simulation needs held-out test scenes")
    out.mkdir(parents=True, exist_ok=True)
    if reuse:
        if not (out / PLAN_FILE).exists():
            raise ConfigError(f"--reuse given but {str(out / PLAN_FILE)!r} does not exist; run 'partition' first")
        plan = PartitionPlan.load(out / PLAN_FILE)
    else:
        plan = run_partition(cfg, out, run_cluster(cfg, out, data))
    if len(plan.clients) != cfg.rounds.total_clients:
        raise ConfigError(f"config.rounds.total_clients: {cfg.rounds.total_clients} but the plan has "
                          f"{len(plan.clients)} clients")
    save_config(cfg, out / CONFIG_FILE)
    layout = Layout.for_dims(data.dims)
    by_id = {r.sample_id: r for r in data.train}
    clients = build_clients(plan.clients, by_id, data.dims)
    history = run_simulation(clients, layout, cfg.rounds, cfg.aggregator, cfg.local, Evaluator(data.test, data.dims))
    write_history_jsonl(out / HISTORY_JSONL, history.records)
    write_history_csv(out / HISTORY_CSV, history.records)
    save_params(out / PARAMS_FILE, history.final_params, layout)
    return history
