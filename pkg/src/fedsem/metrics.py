"""Evaluation metrics: triplet recall, mean recall, accuracy, rounds-to-target
and communication cost."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

RECALL_KS = (20, 50, 100)
CSV_COLUMNS = ("round", "loss", "acc", "r20", "r50", "r100", "mr20", "mr50", "mr100")

Triplet = tuple[int, int, int]


class UndefinedMetric(ValueError):
    """Raised when a metric has no ground truth to be computed against."""


@dataclass
class TripletPrediction:
    scene_id: str
    ranked: list[tuple[Triplet, float]]

    @classmethod
    def from_scores(cls, scene_id: str, scored: Iterable[tuple[Triplet, float]]) -> "TripletPrediction":
        """Sort by score descending, then triplet ascending, dropping duplicates."""
        best: dict[Triplet, float] = {}
        for trip, score in scored:
            trip = tuple(int(v) for v in trip)
            if trip not in best or score > best[trip]:
                best[trip] = float(score)
        ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))
        return cls(scene_id, ranked)

    def top(self, k: int) -> set[Triplet]:
        return {t for t, _ in self.ranked[:k]}


def _hits(gt: set, pred: TripletPrediction, k: int) -> int:
    if k < 1:
        raise ValueError("K must be >= 1")
    return len(gt & pred.top(k))


def recall_at_k(gt: Iterable[Triplet], pred: TripletPrediction, k: int) -> float:
    gt = {tuple(t) for t in gt}
    if not gt:
        raise UndefinedMetric(f"scene {pred.scene_id!r} has no ground-truth triplets")
    return _hits(gt, pred, k) / len(gt)


def micro_recall_at_k(gt_scenes: Mapping[str, Iterable[Triplet]], preds: Mapping[str, TripletPrediction],
                      k: int) -> float:
    """Total hits over total ground truth; scenes without ground truth are skipped."""
    hits = total = 0
    for sid, gt in gt_scenes.items():
        gt = {tuple(t) for t in gt}
        if not gt:
            continue
        hits += _hits(gt, preds[sid], k)
        total += len(gt)
    if total == 0:
        raise UndefinedMetric("no ground-truth triplets")
    return hits / total


def per_predicate_recall(gt_scenes, preds, k: int) -> dict[int, float]:
    hits: dict[int, int] = defaultdict(int)
    totals: dict[int, int] = defaultdict(int)
    for sid, gt in gt_scenes.items():
        gt = {tuple(t) for t in gt}
        if not gt:
            continue
        top = preds[sid].top(k)
        for trip in gt:
            totals[trip[2]] += 1
            hits[trip[2]] += trip in top
    return {p: hits[p] / totals[p] for p in sorted(totals)}


def mean_recall_at_k(gt_scenes: Mapping[str, Iterable[Triplet]], preds: Mapping[str, TripletPrediction],
                     k: int) -> float:
    # Predicate classes absent from the ground truth are left out of the mean.
    per_class = per_predicate_recall(gt_scenes, preds, k)
    if not per_class:
        raise UndefinedMetric("no ground-truth triplets")
    return float(np.mean(list(per_class.values())))


def accuracy(gt_labels: Sequence, predicted: Sequence) -> float:
    gt = np.asarray(gt_labels)
    pred = np.asarray(predicted)
    if gt.shape != pred.shape:
        raise ValueError(f"length mismatch: {gt.shape} vs {pred.shape}")
    if gt.size == 0:
        raise ValueError("accuracy of an empty label set")
    return float(np.mean(gt == pred))


def rounds_to_target(history: Sequence[Mapping], metric: str, target: float) -> int | None:
    """Round number of the first record whose ``metric`` reaches ``target``.

    Records without a ``round`` field are numbered from 1. Returns None
    when the target is never reached.
    """
    if history and not any(metric in rec for rec in history):
        raise KeyError(f"unknown metric {metric!r}")
    for i, rec in enumerate(history, start=1):
        value = rec.get(metric)
        if value is not None and value >= target:
            return int(rec.get("round", i))
    return None


def communication_cost(param_count: float, rounds: float) -> float:
    return param_count * rounds


def relative_cost(cost: float, baseline: float) -> float:
    return cost / baseline


@dataclass
class MetricRecord:
    round: int
    loss: float
    acc: float
    r20: float
    r50: float
    r100: float
    mr20: float
    mr50: float
    mr100: float

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def write_history_jsonl(path, records: Sequence[Mapping]):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(dict(rec), sort_keys=False) + "\n")


def read_history_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_history_csv(path, records: Sequence[Mapping]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow([rec["round"], *(repr(float(rec[c])) for c in CSV_COLUMNS[1:])])
