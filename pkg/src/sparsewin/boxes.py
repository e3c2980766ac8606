"""Axis-aligned detection boxes: IoU, score-greedy suppression, and the
cross-slice merge that resolves conflicts by largest area.

Score-based suppression keeps the highest-confidence box of each overlapping
cluster, which favors clipped fragments at slice seams; the cross-slice merge
first suppresses each slice's set locally, unions the survivors, and then
repeatedly keeps the largest-area box while discarding everything that
overlaps it at or above the threshold, so a complete box beats its
higher-scoring fragments.  Suppression is class-aware throughout: boxes of
different classes never interact.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class DetBox:
    """Scored axis-aligned box; coordinates may be slice-local or global."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    cls: int = 0
    slice_id: int = -1

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2, self.score):
            if not math.isfinite(v):
                raise ValueError(f"box has non-finite field: {self}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class CnmsConfig:
    """Cross-slice threshold plus the per-slice local suppression threshold."""

    iou_threshold: float = 0.5
    local_iou_threshold: float = 0.5

    def __post_init__(self):
        for v in (self.iou_threshold, self.local_iou_threshold):
            if not 0.0 < v < 1.0:
                raise ValueError(f"IoU thresholds must lie in (0, 1), got {v}")


def iou(a: DetBox, b: DetBox) -> float:
    """Intersection over union, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(boxes: Sequence[DetBox], iou_threshold: float) -> list[DetBox]:
    """Greedy score-descending suppression per class.

    Boxes overlapping a kept box at IoU >= threshold are dropped; ties break
    by score descending, then input position ascending.  Input order is
    preserved in the output.
    """
    keep: list[int] = []
    for cls in _classes(boxes):
        members = [i for i, b in enumerate(boxes) if b.cls == cls]
        members.sort(key=lambda i: (-boxes[i].score, i))
        kept_cls: list[int] = []
        for i in members:
            if all(iou(boxes[i], boxes[j]) < iou_threshold for j in kept_cls):
                kept_cls.append(i)
        keep.extend(kept_cls)
    return [boxes[i] for i in sorted(keep)]


def _area_priority_merge(boxes: Sequence[DetBox], tau: float) -> list[DetBox]:
    """Keep the largest-area remaining box, dropping its >= tau overlaps.

    Area ties break by higher score, then lower input position.  Equivalent
    to the iterative argmax-area loop because suppression never changes the
    ordering keys of survivors.
    """
    keep: list[int] = []
    for cls in _classes(boxes):
        members = [i for i, b in enumerate(boxes) if b.cls == cls]
        members.sort(key=lambda i: (-boxes[i].area, -boxes[i].score, i))
        kept_cls: list[int] = []
        for i in members:
            if all(iou(boxes[i], boxes[j]) < tau for j in kept_cls):
                kept_cls.append(i)
        keep.extend(kept_cls)
    return [boxes[i] for i in sorted(keep)]


def cross_slice_nms(b1: Sequence[DetBox], b2: Sequence[DetBox],
                    cfg: CnmsConfig = CnmsConfig()) -> list[DetBox]:
    """Merge two slices' candidates: local NMS each, union, area-priority."""
    return cross_slice_nms_multi([b1, b2], cfg)


def cross_slice_nms_multi(box_sets: Iterable[Sequence[DetBox]],
                          cfg: CnmsConfig = CnmsConfig()) -> list[DetBox]:
    """Generalization to any number of slices: the union of locally
    suppressed sets goes through one area-priority pass."""
    pool: list[DetBox] = []
    for boxes in box_sets:
        pool.extend(nms(boxes, cfg.local_iou_threshold))
    return _area_priority_merge(pool, cfg.iou_threshold)


def _classes(boxes: Sequence[DetBox]) -> list[int]:
    seen: list[int] = []
    for b in boxes:
        if b.cls not in seen:
            seen.append(b.cls)
    return seen


# -- box I/O: one JSON object per line, and a CSV twin ---------------------------

_FIELDS = ("x1", "y1", "x2", "y2", "score", "class", "slice")


def box_to_obj(b: DetBox) -> dict:
    return {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
            "score": b.score, "class": b.cls, "slice": b.slice_id}


def box_from_obj(obj: dict) -> DetBox:
    return DetBox(x1=float(obj["x1"]), y1=float(obj["y1"]),
                  x2=float(obj["x2"]), y2=float(obj["y2"]),
                  score=float(obj["score"]), cls=int(obj.get("class", 0)),
                  slice_id=int(obj.get("slice", -1)))


def write_jsonl(fp, boxes: Iterable[DetBox]) -> None:
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, "w") as fh:
            write_jsonl(fh, boxes)
        return
    for b in boxes:
        fp.write(json.dumps(box_to_obj(b)) + "\n")


def read_jsonl(fp) -> list[DetBox]:
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp) as fh:
            return read_jsonl(fh)
    return [box_from_obj(json.loads(line)) for line in fp if line.strip()]


def write_csv(fp, boxes: Iterable[DetBox]) -> None:
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, "w", newline="") as fh:
            write_csv(fh, boxes)
        return
    writer = csv.writer(fp)
    writer.writerow(_FIELDS)
    for b in boxes:
        writer.writerow([b.x1, b.y1, b.x2, b.y2, b.score, b.cls, b.slice_id])


def read_csv(fp) -> list[DetBox]:
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, newline="") as fh:
            return read_csv(fh)
    reader = csv.DictReader(fp)
    return [box_from_obj({"x1": r["x1"], "y1": r["y1"], "x2": r["x2"],
                          "y2": r["y2"], "score": r["score"],
                          "class": r["class"], "slice": r["slice"]})
            for r in reader]
