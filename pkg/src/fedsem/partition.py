"""Split cluster-labelled samples across federated clients.

Three strategies: uniform random, shard-based (each client picks ``p``
clusters) and Dirichlet-based (each client draws cluster proportions from
Dir(alpha)). All of them are deterministic for a fixed seed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fedsem.semantics import cluster_members


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str
    n_clients: int
    seed: int = 0
    p: int | None = None
    alpha: tuple[float, ...] | None = None
    weighted: bool = False

    def __post_init__(self):
        if self.strategy not in ("random", "shard", "dirichlet"):
            raise PartitionError(f"unknown strategy {self.strategy!r}")
        if self.n_clients < 1:
            raise PartitionError("n_clients must be >= 1")
        if self.strategy == "shard" and (self.p is None or self.p < 1):
            raise PartitionError("shard strategy needs p >= 1")
        if self.strategy == "dirichlet":
            if self.alpha is None or len(self.alpha) == 0:
                raise PartitionError("dirichlet strategy needs alpha")
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if any(not a > 0 for a in self.alpha):
                raise PartitionError(f"every alpha must be > 0, got {list(self.alpha)}")

    def to_json(self) -> dict:
        out = {"strategy": self.strategy, "n_clients": self.n_clients, "seed": self.seed}
        if self.p is not None:
            out["p"] = self.p
        if self.alpha is not None:
            out["alpha"] = list(self.alpha)
        if self.weighted:
            out["weighted"] = True
        return out

    @classmethod
    def from_json(cls, d: Mapping) -> "PartitionSpec":
        alpha = d.get("alpha")
        return cls(d["strategy"], int(d["n_clients"]), int(d.get("seed", 0)),
                   None if d.get("p") is None else int(d["p"]),
                   None if alpha is None else tuple(np.atleast_1d(alpha).tolist()), bool(d.get("weighted", False)))


@dataclass
class PartitionPlan:
    clients: dict[int, list[str]]
    spec: PartitionSpec | None = None

    def sizes(self) -> list[int]:
        return [len(self.clients[c]) for c in sorted(self.clients)]

    def all_ids(self) -> list[str]:
        return [sid for c in sorted(self.clients) for sid in self.clients[c]]

    def to_json(self) -> dict:
        return {"spec": self.spec.to_json() if self.spec else None,
                "clients": {str(c): list(ids) for c, ids in sorted(self.clients.items())}}

    @classmethod
    def from_json(cls, d: Mapping) -> "PartitionPlan":
        spec = PartitionSpec.from_json(d["spec"]) if d.get("spec") else None
        return cls({int(c): list(ids) for c, ids in d["clients"].items()}, spec)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """Round ``total * w / sum(w)`` to integers summing exactly to ``total``.

    Leftover units go to the largest fractional parts, lowest index first
    on ties.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        frac = np.where(w > 0, exact - counts, -np.inf)
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_random(sample_ids: Sequence[str], n_clients: int, seed: int = 0) -> PartitionPlan:
    ids = list(sample_ids)
    if len(ids) < n_clients:
        raise PartitionError(f"{len(ids)} samples cannot cover {n_clients} clients")
    order = _rng(seed, 0).permutation(len(ids))
    chunks = np.array_split(order, n_clients)
    return PartitionPlan({u: [ids[i] for i in chunk] for u, chunk in enumerate(chunks)},
                         PartitionSpec("random", n_clients, seed))


def _selector_counts(sizes: np.ndarray, n_clients: int, p: int, weighted: bool) -> np.ndarray:
    n = len(sizes)
    slots = n_clients * p
    if slots < n:
        raise PartitionError(f"{n_clients} clients x p={p} cannot select all {n} clusters; "
                             "a cluster would be selected by zero clients")
    counts = np.ones(n, dtype=np.int64)
    weights = sizes.astype(float) if weighted else np.ones(n)
    remaining = slots - n
    # A cluster can have at most one shard per client.
    while remaining:
        open_ = counts < n_clients
        extra = np.zeros(n, dtype=np.int64)
        extra[open_] = largest_remainder(remaining, weights[open_])
        counts = np.minimum(counts + extra, n_clients)
        remaining = slots - int(counts.sum())
    return counts


def partition_shard(assignment: Mapping[str, int], n_clients: int, p: int, seed: int = 0,
                    weighted: bool = False) -> PartitionPlan:
    """Each client takes ``p`` distinct clusters; each cluster is cut into
    one shard per selecting client.

    Selection slots are laid out cluster by cluster (in a seeded cluster
    order) and dealt to a seeded client order round-robin, so every cluster
    gets the same number of selectors whenever ``n`` divides ``U*p``. With
    ``weighted`` the selector counts follow cluster sizes instead.
    """
    members = cluster_members(assignment)
    labels = sorted(members)
    n = len(labels)
    if n == 0:
        raise PartitionError("empty assignment")
    if p > n:
        raise PartitionError(f"p={p} exceeds the number of clusters n={n}")
    rng = _rng(seed, 1)
    cluster_order = rng.permutation(n)
    client_order = rng.permutation(n_clients)
    sizes = np.array([len(members[c]) for c in labels])
    counts = _selector_counts(sizes[cluster_order], n_clients, p, weighted)

    selectors: dict[int, list[int]] = {labels[ci]: [] for ci in cluster_order}
    slot = 0
    for ci, k in zip(cluster_order, counts):
        for _ in range(k):
            selectors[labels[ci]].append(int(client_order[slot % n_clients]))
            slot += 1

    clients: dict[int, list[str]] = {u: [] for u in range(n_clients)}
    for c in labels:
        ids = members[c]
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        owners = sorted(selectors[c])
        base, extra = divmod(len(shuffled), len(owners))
        start = 0
        for rank, u in enumerate(owners):
            size = base + (1 if rank < extra else 0)
            clients[u].extend(shuffled[start:start + size])
            start += size
    return PartitionPlan(clients, PartitionSpec("shard", n_clients, seed, p=p, weighted=weighted))


def draw_proportions(alpha: Sequence[float], n_clients: int, seed: int = 0) -> np.ndarray:
    """One Dir(alpha) proportion vector per client, from normalised Gamma draws.

    Client ``u`` uses its own seed sub-stream, so rows do not depend on how
    many clients are drawn.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise PartitionError(f"every alpha must be > 0, got {alpha.tolist()}")
    props = np.empty((n_clients, len(alpha)))
    for u in range(n_clients):
        rng = _rng(seed, 2, u)
        g = rng.gamma(alpha)
        total = g.sum()
        if total > 0:
            props[u] = g / total
        else:
            # Every draw underflowed (tiny alpha): all mass on one cluster.
            props[u] = 0.0
            props[u, rng.integers(len(alpha))] = 1.0
    return props


def partition_dirichlet(assignment: Mapping[str, int], n_clients: int, alpha, seed: int = 0) -> PartitionPlan:
    members = cluster_members(assignment)
    labels = sorted(members)
    n = len(labels)
    if n == 0:
        raise PartitionError("empty assignment")
    if np.isscalar(alpha) or len(alpha) == 1:
        # a single value means a symmetric Dirichlet
        alpha = [float(np.ravel(alpha)[0])] * n
    alpha = tuple(float(a) for a in alpha)
    if len(alpha) != n:
        raise PartitionError(f"alpha has {len(alpha)} entries for {n} clusters")
    if any(not a > 0 for a in alpha):
        raise PartitionError(f"every alpha must be > 0, got {list(alpha)}")
    total = sum(len(ids) for ids in members.values())
    if total < n_clients:
        raise PartitionError(f"{total} samples cannot cover {n_clients} clients")

    props = draw_proportions(alpha, n_clients, seed)
    rng = _rng(seed, 3)
    pools = []
    for c in labels:
        ids = members[c]
        pools.append([ids[i] for i in rng.permutation(len(ids))])
    cursor = [0] * n

    base, extra = divmod(total, n_clients)
    clients: dict[int, list[str]] = {}
    for u in range(n_clients):
        need = base + (1 if u < extra else 0)
        mine: list[str] = []
        weights = props[u].copy()
        while need > 0:
            remaining = np.array([len(pools[i]) - cursor[i] for i in range(n)])
            live = remaining > 0
            w = np.where(live, weights, 0.0)
            if w.sum() <= 0:
                # Mass sits only on exhausted clusters: spread over what is left.
                w = remaining.astype(float)
            request = largest_remainder(need, w)
            for i in range(n):
                take = int(min(request[i], remaining[i]))
                mine.extend(pools[i][cursor[i]:cursor[i] + take])
                cursor[i] += take
                need -= take
        clients[u] = mine
    return PartitionPlan(clients, PartitionSpec("dirichlet", n_clients, seed, alpha=alpha))


def make_plan(spec: PartitionSpec, assignment: Mapping[str, int]) -> PartitionPlan:
    if spec.strategy == "random":
        return partition_random(list(assignment), spec.n_clients, spec.seed)
    if spec.strategy == "shard":
        return partition_shard(assignment, spec.n_clients, spec.p, spec.seed, spec.weighted)
    return partition_dirichlet(assignment, spec.n_clients, spec.alpha, spec.seed)


@dataclass
class HeterogeneityReport:
    histograms: np.ndarray          # (U, n) sample counts per client and cluster
    entropy: np.ndarray             # natural-log entropy of each client's cluster mix
    max_proportion: np.ndarray
    coverage: float                 # fraction of assignment ids placed on some client
    disjoint: bool
    cluster_labels: list[int] = field(default_factory=list)

    @property
    def mean_entropy(self) -> float:
        return float(self.entropy.mean())

    @property
    def mean_max_proportion(self) -> float:
        return float(self.max_proportion.mean())

    @property
    def median_max_proportion(self) -> float:
        return float(np.median(self.max_proportion))

    def proportions(self) -> np.ndarray:
        totals = self.histograms.sum(axis=1, keepdims=True)
        return self.histograms / np.where(totals == 0, 1, totals)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["client_id", *[f"cluster_{c}" for c in self.cluster_labels], "entropy", "max_proportion"])
            for u, row in enumerate(self.histograms):
                w.writerow([u, *[int(v) for v in row], f"{self.entropy[u]:.6f}", f"{self.max_proportion[u]:.6f}"])


def heterogeneity_report(plan: PartitionPlan, assignment: Mapping[str, int]) -> HeterogeneityReport:
    labels = sorted(set(assignment.values()))
    col = {c: j for j, c in enumerate(labels)}
    clients = sorted(plan.clients)
    hist = np.zeros((len(clients), len(labels)), dtype=np.int64)
    seen: set[str] = set()
    disjoint = True
    for row, u in enumerate(clients):
        for sid in plan.clients[u]:
            if sid not in assignment:
                raise KeyError(f"sample {sid!r} on client {u} is missing from the assignment")
            if sid in seen:
                disjoint = False
            seen.add(sid)
            hist[row, col[assignment[sid]]] += 1
    totals = hist.sum(axis=1, keepdims=True)
    props = hist / np.where(totals == 0, 1, totals)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(props > 0, -props * np.log(props), 0.0)
    entropy = terms.sum(axis=1)
    coverage = len(seen) / len(assignment) if assignment else math.nan
    return HeterogeneityReport(hist, entropy, props.max(axis=1), coverage, disjoint, labels)
