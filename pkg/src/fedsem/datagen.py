"""Synthetic multi-semantic datasets with known ground-truth clusters."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from fedsem.semantics import AnnotationRecord


@dataclass(frozen=True)
class GeneratorSpec:
    n_true_clusters: int = 5
    samples_per_cluster: int = 200
    dims: tuple[int, int, int] = (13, 13, 7)
    relations_per_sample: tuple[int, int] = (8, 12)
    separation: float = 0.05
    seed: int = 0
    prior: str = "flat"
    shared_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "relations_per_sample", tuple(int(r) for r in self.relations_per_sample))
        if self.n_true_clusters < 1 or self.samples_per_cluster < 1:
            raise ValueError("cluster and sample counts must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 1 or self.dims[0] != self.dims[1]:
            raise ValueError(f"degenerate dims {self.dims}")
        lo, hi = self.relations_per_sample
        if lo < 1 or hi < lo:
            raise ValueError(f"bad relations_per_sample range {self.relations_per_sample}")
        if not self.separation > 0:
            raise ValueError("separation must be > 0")
        if self.prior not in ("flat", "factorized"):
            raise ValueError(f"unknown prior {self.prior!r}")
        if not 0 <= self.shared_fraction < 1:
            raise ValueError("shared_fraction must be in [0, 1)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["relations_per_sample"] = list(self.relations_per_sample)
        return d


def _dirichlet(rng: np.random.Generator, concentration: float, size: int) -> np.ndarray:
    g = rng.gamma(concentration, size=size)
    if g.sum() == 0:
        g[rng.integers(size)] = 1.0
    return g / g.sum()


def cluster_priors(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    """One categorical distribution over flattened (s, o, p) cells per cluster.

    ``flat`` draws a Dirichlet over all cells at once; ``factorized`` draws
    one Dirichlet per axis and takes their outer product. In factorized
    mode ``shared_fraction`` of the subject and object mass comes from
    dataset-wide distributions common to every cluster, so clusters overlap
    in object vocabulary while keeping their own predicates.
    """
    n_obj, _, n_pred = spec.dims
    cells = int(np.prod(spec.dims))
    priors = np.empty((spec.n_true_clusters, cells))
    lam = spec.shared_fraction
    shared_s = _dirichlet(rng, 1.0, n_obj)
    shared_o = _dirichlet(rng, 1.0, n_obj)
    for k in range(spec.n_true_clusters):
        if spec.prior == "flat":
            priors[k] = _dirichlet(rng, spec.separation, cells)
        else:
            s = (1 - lam) * _dirichlet(rng, spec.separation, n_obj) + lam * shared_s
            o = (1 - lam) * _dirichlet(rng, spec.separation, n_obj) + lam * shared_o
            p = _dirichlet(rng, spec.separation, n_pred)
            priors[k] = np.einsum("i,j,k->ijk", s, o, p).ravel()
    return priors


def generate(spec: GeneratorSpec) -> tuple[list[AnnotationRecord], dict[str, int]]:
    """Draw ``samples_per_cluster`` records per true cluster.

    Records come back in shuffled order so ids carry no cluster information.
    """
    rng = np.random.default_rng(spec.seed)
    priors = cluster_priors(spec, rng)
    lo, hi = spec.relations_per_sample
    total = spec.n_true_clusters * spec.samples_per_cluster
    labels = np.repeat(np.arange(spec.n_true_clusters), spec.samples_per_cluster)
    labels = labels[rng.permutation(total)]
    records, truth = [], {}
    for i, k in enumerate(labels):
        r = int(rng.integers(lo, hi + 1))
        cells = rng.choice(priors.shape[1], size=r, p=priors[k])
        s, o, p = np.unravel_index(cells, spec.dims)
        sid = f"s{i:06d}"
        records.append(AnnotationRecord(sid, tuple(zip(s.tolist(), o.tolist(), p.tolist()))))
        truth[sid] = int(k)
    return records, truth


def make_testbed(spec: GeneratorSpec, holdout_fraction: float, seed: int = 0):
    """Generate a dataset and split it, stratified by true cluster.

    Returns ``(train_records, test_records, truth)``; ``truth`` covers both
    sides. Each cluster contributes ``round(fraction * size)`` test scenes.
    """
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in (0, 1)")
    records, truth = generate(spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    test_ids = set()
    for k in range(spec.n_true_clusters):
        ids = [r.sample_id for r in records if truth[r.sample_id] == k]
        n_test = int(round(holdout_fraction * len(ids)))
        test_ids.update(ids[i] for i in rng.choice(len(ids), size=n_test, replace=False))
    train = [r for r in records if r.sample_id not in test_ids]
    test = [r for r in records if r.sample_id in test_ids]
    if not train or not test:
        raise ValueError(f"holdout_fraction {holdout_fraction} leaves one side of the split empty")
    return train, test, truth
