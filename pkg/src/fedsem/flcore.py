"""Federated rounds: client selection, local training and server aggregation.

Server optimisers work on the pseudo-gradient ``delta_k = w_global - w_k``,
so subtracting the (momentum- or Adam-processed) weighted delta moves the
global model towards the clients. With zero momentum this is exactly FedAvg.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence, Union

import numpy as np

from fedsem.metrics import RECALL_KS
from fedsem.trainer import Layout, LocalTrainConfig, featurize_many, local_train, loss_and_grad, predict_proba

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FedAvg:
    name = "fedavg"


@dataclass(frozen=True)
class FedAvgM:
    beta: float = 0.9
    name = "fedavgm"

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ConfigError(f"FedAvgM beta must be in [0, 1), got {self.beta}")


@dataclass(frozen=True)
class FedAdam:
    eta: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-3
    name = "fedadam"

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("FedAdam betas must be in [0, 1)")
        if not (self.eta > 0 and self.eps > 0):
            raise ConfigError("FedAdam eta and eps must be > 0")


AggregatorSpec = Union[FedAvg, FedAvgM, FedAdam]


def aggregator_from_json(d: Mapping) -> AggregatorSpec:
    d = dict(d)
    name = d.pop("name", "fedavg").lower()
    kinds = {"fedavg": FedAvg, "fedavgm": FedAvgM, "fedadam": FedAdam}
    if name not in kinds:
        raise ConfigError(f"unknown aggregator {name!r}")
    try:
        return kinds[name](**d)
    except TypeError as exc:
        raise ConfigError(f"aggregator {name}: {exc}") from None


def aggregator_to_json(spec: AggregatorSpec) -> dict:
    out = {"name": spec.name}
    if isinstance(spec, FedAvgM):
        out["beta"] = spec.beta
    elif isinstance(spec, FedAdam):
        out.update(eta=spec.eta, beta1=spec.beta1, beta2=spec.beta2, eps=spec.eps)
    return out


@dataclass
class ServerState:
    params: np.ndarray
    velocity: np.ndarray
    m: np.ndarray
    v: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, params: np.ndarray) -> "ServerState":
        params = np.asarray(params, dtype=np.float64)
        return cls(params.copy(), np.zeros_like(params), np.zeros_like(params), np.zeros_like(params))


@dataclass(frozen=True)
class RoundConfig:
    total_clients: int
    clients_per_round: int
    total_rounds: int
    eval_every: int = 1
    master_seed: int = 0

    def __post_init__(self):
        if self.total_clients < 1:
            raise ConfigError("total_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ConfigError("clients_per_round must be in [1, total_clients]")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class ClientUpdate:
    client_id: int
    n_samples: int
    params: np.ndarray
    delta: np.ndarray

    @classmethod
    def from_params(cls, client_id: int, n_samples: int, params, global_params) -> "ClientUpdate":
        if n_samples < 1:
            raise ValueError(f"client {client_id}: n_samples must be >= 1")
        params = np.asarray(params, dtype=np.float64)
        global_params = np.asarray(global_params, dtype=np.float64)
        if params.shape != global_params.shape:
            raise ValueError(f"client {client_id}: parameter shape {params.shape} != {global_params.shape}")
        return cls(client_id, n_samples, params, global_params - params)


def select_clients(total_clients: int, count: int, round_index: int, master_seed: int) -> list[int]:
    if count > total_clients:
        raise ConfigError(f"cannot select {count} of {total_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 101, round_index]))
    return sorted(int(c) for c in rng.choice(total_clients, size=count, replace=False))


def client_seed(master_seed: int, client_id: int, round_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, 202, client_id, round_index])


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shape = ordered[0].params.shape
    for u in ordered:
        if u.params.shape != shape:
            raise ValueError(f"client {u.client_id}: shape {u.params.shape} != {shape}")
    return ordered


def _weighted_sum(updates: Sequence[ClientUpdate], attr: str) -> np.ndarray:
    # Offsets from the first client are averaged, so a lone client or a set
    # of identical clients comes back bit-for-bit.
    ordered = _ordered(updates)
    total = sum(u.n_samples for u in ordered)
    ref = getattr(ordered[0], attr)
    acc = np.zeros_like(ref)
    for u in ordered[1:]:
        acc += u.n_samples * (getattr(u, attr) - ref)
    return ref + acc / total


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-count-weighted mean of the client parameters."""
    return _weighted_sum(updates, "params")


def weighted_delta(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return _weighted_sum(updates, "delta")


def _check_shape(state: ServerState, updates):
    for u in updates:
        if u.delta.shape != state.params.shape:
            raise ValueError(f"client {u.client_id}: shape {u.delta.shape} != {state.params.shape}")


def server_update_fedavg(state: ServerState, updates) -> ServerState:
    return replace(state, params=aggregate_fedavg(updates), round=state.round + 1)


def server_update_fedavgm(state: ServerState, updates, beta: float) -> ServerState:
    _check_shape(state, updates)
    velocity = beta * state.velocity + weighted_delta(updates)
    return replace(state, params=state.params - velocity, velocity=velocity, round=state.round + 1)


def server_update_fedadam(state: ServerState, updates, spec: FedAdam) -> ServerState:
    """Adam on the pseudo-gradient, without bias correction."""
    _check_shape(state, updates)
    delta = weighted_delta(updates)
    m = spec.beta1 * state.m + (1 - spec.beta1) * delta
    v = spec.beta2 * state.v + (1 - spec.beta2) * delta * delta
    params = state.params - spec.eta * m / (np.sqrt(v) + spec.eps)
    return replace(state, params=params, m=m, v=v, round=state.round + 1)


def apply_aggregator(spec: AggregatorSpec, state: ServerState, updates) -> ServerState:
    if isinstance(spec, FedAvgM):
        return server_update_fedavgm(state, updates, spec.beta)
    if isinstance(spec, FedAdam):
        return server_update_fedadam(state, updates, spec)
    return server_update_fedavg(state, updates)


@dataclass
class ClientData:
    features: np.ndarray
    labels: np.ndarray
    n_samples: int


def build_clients(plan_clients: Mapping[int, Sequence[str]], records_by_id: Mapping, dims) -> dict[int, ClientData]:
    """Relation examples per client; ``n_samples`` counts annotated samples."""
    clients = {}
    for cid, ids in sorted(plan_clients.items()):
        rels = [r for sid in ids for r in records_by_id[sid].relations]
        X, y = featurize_many(rels, dims)
        clients[int(cid)] = ClientData(X, y, len(ids))
    return clients


class Evaluator:
    """Scores a global model on held-out scenes.

    For each scene the candidates are every ordered pair of object
    categories present in the scene (self-pairs included) crossed with
    every predicate; triplets are ranked by softmax probability, ties
    broken by ascending (subject, object, predicate).
    """

    def __init__(self, test_records, dims, ks: Sequence[int] = RECALL_KS):
        self.dims = tuple(dims)
        self.ks = tuple(ks)
        n_pred = self.dims[2]
        rels = [r for rec in test_records for r in rec.relations]
        self.X, self.y = featurize_many(rels, self.dims)
        self.scenes = []
        pair_rows = []
        offset = 0
        for rec in test_records:
            gt = sorted(set(rec.relations))
            cats = sorted({c for s, o, _ in gt for c in (s, o)})
            pairs = [(a, b) for a in cats for b in cats]
            trip = np.array([(a, b, p) for a, b in pairs for p in range(n_pred)], dtype=np.int64)
            gt_set = set(gt)
            is_gt = np.array([tuple(t) in gt_set for t in trip.tolist()])
            self.scenes.append((rec.sample_id, offset, len(pairs), trip, is_gt))
            pair_rows.extend(pairs)
            offset += len(pairs)
        pair_feats, _ = featurize_many([(a, b, 0) for a, b in pair_rows], self.dims)
        self.pair_features = pair_feats
        gt_preds = [t[2] for _, _, _, trip, is_gt in self.scenes for t in trip[is_gt]]
        self.gt_per_class = np.bincount(np.array(gt_preds, dtype=np.int64), minlength=n_pred)

    def rank(self, params: np.ndarray, layout: Layout):
        """Yield ``(scene_id, triplets, scores, order)`` for each test scene."""
        probs = predict_proba(params, layout, self.pair_features)
        for sid, off, n_pairs, trip, is_gt in self.scenes:
            scores = probs[off:off + n_pairs].ravel()
            order = np.lexsort((trip[:, 2], trip[:, 1], trip[:, 0], -scores))
            yield sid, trip, scores, order, is_gt

    def evaluate(self, params: np.ndarray, layout: Layout) -> dict:
        loss, _ = loss_and_grad(params, layout, self.X, self.y)
        probs = predict_proba(params, layout, self.X)
        acc = float(np.mean(probs.argmax(axis=1) == self.y))
        n_pred = self.dims[2]
        hits = {k: np.zeros(n_pred) for k in self.ks}
        for _, trip, _, order, is_gt in self.rank(params, layout):
            for k in self.ks:
                top = order[:k]
                hit_preds = trip[top][is_gt[top], 2]
                hits[k] += np.bincount(hit_preds, minlength=n_pred)
        present = self.gt_per_class > 0
        out = {"loss": loss, "acc": acc}
        total_gt = self.gt_per_class.sum()
        for k in self.ks:
            out[f"r{k}"] = float(hits[k].sum() / total_gt)
        for k in self.ks:
            out[f"mr{k}"] = float(np.mean(hits[k][present] / self.gt_per_class[present]))
        return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDSEM_THREADS", "1")))
    except ValueError:
        return 1


def run_round(state: ServerState, clients: Mapping[int, ClientData], layout: Layout,
              aggregator: AggregatorSpec, train_cfg: LocalTrainConfig, round_cfg: RoundConfig,
              round_index: int, evaluator: Evaluator | None = None, strict: bool = True,
              evaluate: bool = True):
    """One round: select, train locally from the current global model, aggregate.

    ``round_index`` starts at 1. Returns the new state and the round record.
    """
    t0 = time.perf_counter()
    selected = select_clients(round_cfg.total_clients, round_cfg.clients_per_round,
                              round_index, round_cfg.master_seed)
    active = []
    for cid in selected:
        data = clients.get(cid)
        if data is None or len(data.labels) == 0:
            if strict:
                raise ConfigError(f"client {cid} has no training data")
            log.warning("round %d: skipping client %d with no data", round_index, cid)
            continue
        active.append(cid)

    def train(cid):
        data = clients[cid]
        seed = client_seed(round_cfg.master_seed, cid, round_index)
        w = local_train(state.params, layout, data.features, data.labels, train_cfg, seed)
        return ClientUpdate.from_params(cid, data.n_samples, w, state.params)

    workers = min(_threads(), len(active))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            updates = list(pool.map(train, active))
    else:
        updates = [train(cid) for cid in active]

    new_state = apply_aggregator(aggregator, state, updates) if updates else replace(state, round=state.round + 1)
    record = {"round": round_index, "clients": active}
    if evaluator is not None and evaluate:
        record.update(evaluator.evaluate(new_state.params, layout))
    record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
    return new_state, record


def run_simulation(clients: Mapping[int, ClientData], layout: Layout, round_cfg: RoundConfig,
                   aggregator: AggregatorSpec, train_cfg: LocalTrainConfig, evaluator: Evaluator | None,
                   init_params: np.ndarray | None = None, strict: bool = True,
                   record_timing: bool = False) -> "RoundHistory":
    """Run every round and return the evaluated records (the last is marked final).

    Wall-clock time is left out of the records unless ``record_timing`` is
    set, so identical configurations produce identical histories.
    """
    state = ServerState.initial(layout.zeros() if init_params is None else init_params)
    history = []
    for r in range(1, round_cfg.total_rounds + 1):
        last = r == round_cfg.total_rounds
        scheduled = r % round_cfg.eval_every == 0 or last
        state, record = run_round(state, clients, layout, aggregator, train_cfg, round_cfg, r,
                                  evaluator, strict, evaluate=scheduled)
        if not record_timing:
            record.pop("wall_ms")
        if scheduled:
            record["final"] = last
            history.append(record)
    return RoundHistory(history, state.params)


@dataclass
class RoundHistory:
    records: list[dict]
    final_params: np.ndarray

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def final(self) -> dict:
        return self.records[-1]
