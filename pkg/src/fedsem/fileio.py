"""Readers and writers for annotation, category-map and assignment files."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from fedsem.semantics import AnnotationRecord, CategoryMap, InvalidRecordError, MappingError


class AnnotationFormatError(ValueError):
    pass


def _parse_record(obj, lineno: int) -> AnnotationRecord:
    if not isinstance(obj, dict) or not isinstance(obj.get("sample_id"), str):
        raise AnnotationFormatError(f"line {lineno}: expected an object with a string sample_id")
    rels = obj.get("relations")
    attrs = obj.get("attributes")
    if rels is None and attrs is None:
        raise AnnotationFormatError(f"line {lineno}: record needs 'relations' or 'attributes'")
    try:
        if rels is not None:
            if not all(isinstance(r, list) and len(r) == 3 and all(isinstance(v, int) for v in r) for r in rels):
                raise AnnotationFormatError(f"line {lineno}: relations must be [s, o, p] integer triplets")
            return AnnotationRecord(obj["sample_id"], tuple(tuple(r) for r in rels))
        if not all(isinstance(a, int) for a in attrs):
            raise AnnotationFormatError(f"line {lineno}: attributes must be integers")
        return AnnotationRecord(obj["sample_id"], attributes=tuple(attrs))
    except InvalidRecordError as exc:
        raise AnnotationFormatError(f"line {lineno}: {exc}") from None


def load_annotations(path, dims: Sequence[int] | None = None) -> list[AnnotationRecord]:
    """Parse a JSON Lines annotation file.

    With ``dims`` every relation index is range-checked against
    ``(N_subject, N_object, N_predicate)``.
    """
    records, seen = [], set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno)
            if rec.sample_id in seen:
                raise AnnotationFormatError(f"line {lineno}: duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            if dims is not None:
                for r in rec.relations:
                    if not all(0 <= v < d for v, d in zip(r, dims)):
                        raise AnnotationFormatError(f"line {lineno}: relation {list(r)} out of range for dims {list(dims)}")
            records.append(rec)
    return records


def write_annotations(path, records: Iterable[AnnotationRecord]):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json()) + "\n")


def _int_map(raw: Mapping, name: str) -> dict[int, int]:
    try:
        return {int(k): int(v) for k, v in raw.items()}
    except (TypeError, ValueError):
        raise MappingError(f"{name} must map integer fine labels to integer super-classes") from None


def load_category_map(path, used_labels: Iterable | None = None) -> CategoryMap:
    """Load ``{"object_map", "predicate_map", "dims"}``.

    ``used_labels`` (relation triplets from the data) are checked against
    the map so a missing fine label fails here rather than mid-pipeline.
    """
    with open(path) as f:
        raw = json.load(f)
    for key in ("object_map", "predicate_map", "dims"):
        if key not in raw:
            raise MappingError(f"category map is missing {key!r}")
    cmap = CategoryMap(_int_map(raw["object_map"], "object_map"),
                       _int_map(raw["predicate_map"], "predicate_map"), tuple(raw["dims"]))
    if used_labels is not None:
        for rel in used_labels:
            cmap.super_triplet(rel)
    return cmap


def write_category_map(path, cmap: CategoryMap):
    with open(path, "w") as f:
        json.dump({"object_map": {str(k): v for k, v in sorted(cmap.object_map.items())},
                   "predicate_map": {str(k): v for k, v in sorted(cmap.predicate_map.items())},
                   "dims": list(cmap.dims)}, f, indent=1)


def write_assignment(path, assignment: Mapping[str, int]):
    with open(path, "w") as f:
        for sid, c in assignment.items():
            f.write(json.dumps({"sample_id": sid, "cluster": int(c)}) + "\n")


def load_assignment(path) -> dict[str, int]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                try:
                    obj = json.loads(line)
                    out[obj["sample_id"]] = int(obj["cluster"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise AnnotationFormatError(f"{Path(path).name} line {lineno}: bad assignment row") from None
    return out
