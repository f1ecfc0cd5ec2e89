"""Category tensors and semantic clustering.

Each annotated sample is turned into a flat tensor whose axes are the label
vocabularies (subject x object x predicate super-classes), then the whole
collection is clustered with Lloyd's K-means.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

ATTRIBUTE_COUNT = 40


class MappingError(KeyError):
    pass


class InvalidRecordError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class BalanceError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    """One sample's label set: relation triplets or a +-1 attribute vector."""

    sample_id: str
    relations: tuple[tuple[int, int, int], ...] = ()
    attributes: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(tuple(int(v) for v in r) for r in self.relations))
        if self.attributes is not None:
            object.__setattr__(self, "attributes", tuple(int(a) for a in self.attributes))
        if not self.relations and not self.attributes:
            raise InvalidRecordError(f"record {self.sample_id!r} has neither relations nor attributes")
        for r in self.relations:
            if len(r) != 3:
                raise InvalidRecordError(f"record {self.sample_id!r}: relation {r} is not a triplet")

    @property
    def is_attribute(self) -> bool:
        return self.attributes is not None and not self.relations

    def to_json(self) -> dict:
        if self.is_attribute:
            return {"sample_id": self.sample_id, "attributes": list(self.attributes)}
        return {"sample_id": self.sample_id, "relations": [list(r) for r in self.relations]}


@dataclass(frozen=True)
class CategoryMap:
    """Fine-grained label -> super-class maps for the two vocabularies."""

    object_map: Mapping[int, int]
    predicate_map: Mapping[int, int]
    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or dims[0] != dims[1] or min(dims) < 1:
            raise DimensionError(f"relation dims must be [N_obj, N_obj, N_pred], got {list(self.dims)}")
        object.__setattr__(self, "dims", dims)
        for name, mapping, size in (("object_map", self.object_map, dims[0]),
                                    ("predicate_map", self.predicate_map, dims[2])):
            supers = set(mapping.values())
            if supers != set(range(size)):
                raise MappingError(f"{name}: super-class indices must be dense in [0, {size}), got {sorted(supers)}")

    @classmethod
    def identity(cls, dims: Sequence[int]) -> "CategoryMap":
        n_obj, _, n_pred = dims
        return cls({i: i for i in range(n_obj)}, {i: i for i in range(n_pred)}, tuple(dims))

    def super_triplet(self, relation) -> tuple[int, int, int]:
        s, o, p = relation
        for label in (s, o):
            if label not in self.object_map:
                raise MappingError(f"unmapped fine object label {label}")
        if p not in self.predicate_map:
            raise MappingError(f"unmapped fine predicate label {p}")
        return self.object_map[s], self.object_map[o], self.predicate_map[p]


@dataclass
class CategoryTensor:
    dims: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != int(np.prod(self.dims)):
            raise DimensionError(f"tensor length {self.values.size} does not match dims {self.dims}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidRecordError("tensor values must be finite")

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.dims)


def build_category_tensor(record: AnnotationRecord, category_map: CategoryMap) -> CategoryTensor:
    """Count relations per (subject, object, predicate) super-class cell."""
    if not record.relations:
        raise InvalidRecordError(f"record {record.sample_id!r} has an empty relation list")
    dims = category_map.dims
    tensor = np.zeros(dims, dtype=np.float64)
    for rel in record.relations:
        s, o, p = category_map.super_triplet(rel)
        tensor[s, o, p] += 1.0
    return CategoryTensor(dims, tensor.ravel())


def build_attribute_tensor(record: AnnotationRecord, attribute_count: int = ATTRIBUTE_COUNT) -> CategoryTensor:
    attrs = record.attributes
    if attrs is None or len(attrs) != attribute_count:
        n = 0 if attrs is None else len(attrs)
        raise InvalidRecordError(f"record {record.sample_id!r}: expected {attribute_count} attributes, got {n}")
    bad = [a for a in attrs if a not in (-1, 1)]
    if bad:
        raise InvalidRecordError(f"record {record.sample_id!r}: attribute value {bad[0]} not in {{-1, +1}}")
    return CategoryTensor((attribute_count,), np.asarray(attrs, dtype=np.float64))


def build_tensors(records: Sequence[AnnotationRecord], category_map: CategoryMap | None = None,
                  normalize: bool = False) -> np.ndarray:
    """Stack the tensors of a whole dataset into an (N, D) matrix.

    Attribute-mode records need no map. With ``normalize`` each row is
    scaled to unit L1 norm (off by default).
    """
    rows = []
    for rec in records:
        if rec.is_attribute:
            rows.append(build_attribute_tensor(rec, len(rec.attributes)).values)
        else:
            if category_map is None:
                raise MappingError("relation records need a category map")
            rows.append(build_category_tensor(rec, category_map).values)
    if not rows:
        return np.zeros((0, 0))
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise DimensionError(f"mixed tensor lengths {sorted(lengths)}")
    X = np.vstack(rows)
    if normalize:
        norms = np.abs(X).sum(axis=1, keepdims=True)
        X = X / np.where(norms == 0, 1.0, norms)
    return X


@dataclass
class ClusterModel:
    n_clusters: int
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)


def _as_matrix(tensors) -> np.ndarray:
    if isinstance(tensors, np.ndarray):
        X = np.asarray(tensors, dtype=np.float64)
        return X.reshape(len(X), -1) if X.ndim != 2 else X
    tensors = list(tensors)
    if not tensors:
        return np.zeros((0, 0))
    rows = [t.values if isinstance(t, CategoryTensor) else np.asarray(t, dtype=np.float64).ravel()
            for t in tensors]
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise DimensionError(f"all tensors must share dimensionality, got {sorted(dims)}")
    return np.vstack(rows)


def _exact_sq_dist(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def squared_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape ``(len(X), len(centroids))``.

    Uses the |x|^2 - 2x.c + |c|^2 expansion, then recomputes by explicit
    differences every row whose two smallest entries are within rounding
    noise, so exact ties survive and argmin picks the lowest index.
    """
    x2 = np.einsum("ij,ij->i", X, X)
    c2 = np.einsum("ij,ij->i", centroids, centroids)
    d2 = np.maximum(x2[:, None] - 2.0 * (X @ centroids.T) + c2[None, :], 0.0)
    if centroids.shape[0] > 1:
        part = np.partition(d2, 1, axis=1)
        noise = 1e-9 * (x2 + c2.max() + 1.0)
        suspect = np.flatnonzero(part[:, 1] - part[:, 0] <= noise)
    else:
        suspect = np.arange(len(X))
    if suspect.size:
        d2[suspect] = _exact_sq_dist(X[suspect], centroids)
    return d2


def _kmeans_pp(X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: draw a few D^2-weighted candidates per step and keep
    the one that lowers the potential most."""
    trials = 2 + int(np.log(n))
    centers = [X[rng.integers(len(X))]]
    closest = _exact_sq_dist(X, centers[0][None, :])[:, 0]
    for _ in range(1, n):
        total = closest.sum()
        if total > 0:
            cand = rng.choice(len(X), size=trials, p=closest / total)
        else:
            cand = rng.integers(len(X), size=1)
        d_cand = np.minimum(closest[None, :], squared_distances(X, X[cand]).T)
        best = int(np.argmin(d_cand.sum(axis=1)))
        centers.append(X[cand[best]])
        closest = d_cand[best]
    return np.array(centers)


def _lloyd(X, centroids, max_iters, tol):
    n = len(centroids)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = squared_distances(X, centroids)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(len(X)), labels]
        counts = np.bincount(labels, minlength=n)
        for empty in np.flatnonzero(counts == 0):
            # Move the point farthest from its centroid into the empty cluster,
            # never stealing the last member of another cluster.
            order = np.argsort(-point_cost, kind="stable")
            for idx in order:
                if counts[labels[idx]] > 1:
                    counts[labels[idx]] -= 1
                    labels[idx] = empty
                    counts[empty] = 1
                    point_cost[idx] = 0.0
                    break
        history.append(float(point_cost.sum()))
        new_centroids = np.zeros_like(centroids)
        np.add.at(new_centroids, labels, X)
        new_centroids /= counts[:, None]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = squared_distances(X, centroids)
    final = d2.argmin(axis=1)
    # Coincident centroids can leave a cluster empty under a fresh argmin;
    # the repaired labels from the last iteration are then kept.
    if np.bincount(final, minlength=n).min() > 0:
        labels = final
    inertia = float(d2[np.arange(len(X)), labels].sum())
    history.append(inertia)
    return centroids, labels, inertia, n_iter, history


def kmeans_fit(tensors, n: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6,
               sample_ids: Sequence[str] | None = None, n_init: int = 10):
    """Lloyd K-means with k-means++ seeding on flattened tensors.

    Returns ``(model, assignment)`` where ``assignment`` maps sample id to
    cluster index (ids default to row positions as strings). With
    ``n_init > 1`` several seedings derived from ``seed`` are run and the
    lowest-inertia result is kept (earliest run wins ties).
    """
    X = _as_matrix(tensors)
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(X):
        raise ValueError(f"cannot fit {n} clusters to {len(X)} samples")
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(X))]
    if len(sample_ids) != len(X):
        raise DimensionError("sample_ids length does not match tensor count")

    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.default_rng(child)
        result = _lloyd(X, _kmeans_pp(X, n, rng), max_iters, tol)
        if best is None or result[2] < best[2]:
            best = result
    centroids, labels, inertia, n_iter, history = best
    model = ClusterModel(n, centroids, inertia, n_iter, history)
    assignment = {sid: int(lab) for sid, lab in zip(sample_ids, labels)}
    return model, assignment


def kmeans_assign(model: ClusterModel, tensor) -> int:
    x = tensor.values if isinstance(tensor, CategoryTensor) else np.asarray(tensor, dtype=np.float64).ravel()
    if x.size != model.centroids.shape[1]:
        raise DimensionError(f"tensor length {x.size} != centroid length {model.centroids.shape[1]}")
    return int(squared_distances(x[None, :], model.centroids)[0].argmin())


def cluster_members(assignment: Mapping[str, int]) -> dict[int, list[str]]:
    """Invert an assignment into cluster -> ids, keeping input order."""
    members: dict[int, list[str]] = defaultdict(list)
    for sid, c in assignment.items():
        members[c].append(sid)
    return dict(sorted(members.items()))


def cluster_sizes(assignment: Mapping[str, int]) -> dict[int, int]:
    return {c: len(ids) for c, ids in cluster_members(assignment).items()}


def balance_clusters(assignment: Mapping[str, int], seed: int = 0,
                     n_clusters: int | None = None) -> dict[str, int]:
    """Downsample every cluster to the size of the smallest one.

    Sampling is uniform without replacement. Pass ``n_clusters`` to have a
    cluster that received no samples reported as an error.
    """
    members = cluster_members(assignment)
    expected = range(n_clusters) if n_clusters is not None else members.keys()
    for c in expected:
        if not members.get(c):
            raise BalanceError(f"cannot balance: cluster {c} is empty")
    if not members:
        raise BalanceError("cannot balance an empty assignment")
    m = min(len(ids) for ids in members.values())
    rng = np.random.default_rng(seed)
    keep = set()
    for c, ids in members.items():
        picked = rng.choice(len(ids), size=m, replace=False)
        keep.update(ids[i] for i in picked)
    return {sid: c for sid, c in assignment.items() if sid in keep}


def iter_tensors(records: Iterable[AnnotationRecord], category_map: CategoryMap | None = None):
    for rec in records:
        if rec.is_attribute:
            yield build_attribute_tensor(rec, len(rec.attributes))
        else:
            yield build_category_tensor(rec, category_map)
