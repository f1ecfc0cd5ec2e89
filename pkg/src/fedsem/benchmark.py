"""Desk-scale trend benchmark on synthetic scenes.

Compares an IID shard split (every client draws all clusters) with a
non-IID one (one cluster per client) under FedAvg, and the server
optimizers against FedAvg on the non-IID split.

    python3 -m fedsem.benchmark --seeds 0 1 2 3 4
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field

import numpy as np

from fedsem.datagen import GeneratorSpec, make_testbed
from fedsem.flcore import (AggregatorSpec, Evaluator, FedAdam, FedAvg, FedAvgM, RoundConfig, build_clients,
                           run_simulation)
from fedsem.metrics import rounds_to_target
from fedsem.partition import partition_shard
from fedsem.semantics import CategoryMap, balance_clusters, build_tensors, kmeans_fit
from fedsem.trainer import Layout, LocalTrainConfig

RUNS = ("iid/fedavg", "non_iid/fedavg", "non_iid/fedavgm", "non_iid/fedadam")


@dataclass(frozen=True)
class TrendSetup:
    n_clients: int = 20
    n_clusters: int = 5
    rounds: int = 50
    clients_per_round: int = 5
    samples_per_cluster: int = 100
    separation: float = 0.05
    holdout_fraction: float = 0.2
    local: LocalTrainConfig = field(default_factory=lambda: LocalTrainConfig(learning_rate=0.01, epochs=3))
    fedavgm_beta: float = 0.9
    fedadam_eta: float = 0.1
    recall_metric: str = "mr20"
    target_metric: str = "acc"
    target: float = 0.7

    def aggregators(self) -> dict[str, AggregatorSpec]:
        return {"fedavg": FedAvg(), "fedavgm": FedAvgM(self.fedavgm_beta), "fedadam": FedAdam(eta=self.fedadam_eta)}


def run_seed(seed: int, setup: TrendSetup = TrendSetup()) -> dict[str, dict]:
    """Final metrics and rounds-to-target of the four runs for one seed.

    A target never reached counts as ``rounds + 1``.
    """
    gen = GeneratorSpec(n_true_clusters=setup.n_clusters, samples_per_cluster=setup.samples_per_cluster,
                        separation=setup.separation, seed=seed, prior="factorized")
    train, test, _ = make_testbed(gen, setup.holdout_fraction, seed)
    dims = gen.dims
    X = build_tensors(train, CategoryMap.identity(dims))
    _, assignment = kmeans_fit(X, setup.n_clusters, seed=seed, sample_ids=[r.sample_id for r in train])
    assignment = balance_clusters(assignment, seed, n_clusters=setup.n_clusters)
    by_id = {r.sample_id: r for r in train}
    evaluator = Evaluator(test, dims)
    layout = Layout.for_dims(dims)
    round_cfg = RoundConfig(setup.n_clients, setup.clients_per_round, setup.rounds, master_seed=seed)
    aggs = setup.aggregators()
    out = {}
    for run in RUNS:
        split, agg = run.split("/")
        p = setup.n_clusters if split == "iid" else 1
        clients = build_clients(partition_shard(assignment, setup.n_clients, p, seed).clients, by_id, dims)
        hist = run_simulation(clients, layout, round_cfg, aggs[agg], setup.local, evaluator)
        reached = rounds_to_target(hist.records, setup.target_metric, setup.target)
        out[run] = {"acc": hist.final["acc"], setup.recall_metric: hist.final[setup.recall_metric],
                    "rounds_to_target": setup.rounds + 1 if reached is None else reached}
    return out


@dataclass
class TrendResult:
    setup: TrendSetup
    per_seed: dict[int, dict[str, dict]]

    def mean(self, run: str, key: str) -> float:
        return float(np.mean([r[run][key] for r in self.per_seed.values()]))

    def checks(self) -> dict[str, tuple[bool, str]]:
        """Each trend check as (passed, human-readable detail)."""
        k = self.setup.recall_metric
        res = {}
        for key in ("acc", k):
            gap = self.mean("iid/fedavg", key) - self.mean("non_iid/fedavg", key)
            res[f"a_{key}"] = (gap > 0, f"IID - non-IID {key} gap {gap:+.4f}")
        for agg in ("fedavgm", "fedadam"):
            diff = self.mean(f"non_iid/{agg}", k) - self.mean("non_iid/fedavg", k)
            res[f"b_{agg}_{k}"] = (diff >= 0, f"non-IID {agg} - fedavg {k} {diff:+.4f}")
        iid, non = self.mean("iid/fedavg", "rounds_to_target"), self.mean("non_iid/fedavg", "rounds_to_target")
        res["c_rounds"] = (non >= iid, f"rounds to {self.setup.target_metric}>={self.setup.target}: "
                                       f"non-IID {non:.1f} vs IID {iid:.1f}")
        return res


def trend_benchmark(seeds=range(5), setup: TrendSetup = TrendSetup()) -> TrendResult:
    return TrendResult(setup, {s: run_seed(s, setup) for s in seeds})


def main(argv=None, setup: TrendSetup | None = None) -> int:
    ap = argparse.ArgumentParser(prog="fedsem.benchmark", description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = ap.parse_args(argv)
    result = trend_benchmark(args.seeds, setup or TrendSetup())
    for run in RUNS:
        cells = "  ".join(f"{key}={result.mean(run, key):.4f}" for key in ("acc", result.setup.recall_metric,
                                                                           "rounds_to_target"))
        print(f"{run:16s} {cells}")
    checks = result.checks()
    for name, (ok, detail) in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for ok, _ in checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
