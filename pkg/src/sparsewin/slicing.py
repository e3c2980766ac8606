"""Image slicing for large scenes and the two-scale detect-and-merge pipeline.

Training-style slicing cuts a uniform n-by-n grid and drops slices that
contain no annotated boxes.  Inference-style slicing walks fixed-size
windows at stride (size - overlap), clamping the final window to the image
edge.  Detections come back in slice-local (scaled) coordinates, are clipped
to their slice, mapped to global pixels, filtered by the area threshold that
splits responsibility between the fine and coarse passes, and merged across
slices.

Scenes here are synthetic: axis-aligned ground-truth boxes over an extent,
with sizes spanning the three standard area bins (up to ~100x scale ratio).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from sparsewin.boxes import (
    CnmsConfig,
    DetBox,
    box_from_obj,
    box_to_obj,
    cross_slice_nms_multi,
    iou,
    nms,
)

# area bins for synthetic object sizes: small < 96^2 <= medium < 288^2 <= large
SMALL_SIDE = 96.0
LARGE_SIDE = 288.0
DEFAULT_AREA_THRESHOLD = LARGE_SIDE * LARGE_SIDE


@dataclass(frozen=True)
class SliceSpec:
    """A window into the global image; ``scale`` multiplies coordinates on
    the way in (model input space) and divides on the way out."""

    x: float
    y: float
    width: float
    height: float
    scale: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"slice extent must be positive: {self}")
        if self.scale <= 0:
            raise ValueError(f"slice scale must be positive: {self}")


@dataclass(frozen=True)
class ScaleFilter:
    """Splits detection responsibility at an area threshold (global pixels^2):
    the fine role keeps boxes with area <= threshold, the coarse role the rest."""

    area_threshold: float
    role: str

    def __post_init__(self):
        if self.area_threshold <= 0:
            raise ValueError("area threshold must be positive")
        if self.role not in ("fine", "coarse"):
            raise ValueError(f"role must be fine or coarse, got {self.role!r}")

    def keeps(self, box: DetBox) -> bool:
        if self.role == "fine":
            return box.area <= self.area_threshold
        return box.area > self.area_threshold


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic ground truth: image extent plus annotated boxes."""

    width: float
    height: float
    boxes: tuple[DetBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError(f"box {b} outside extent "
                                 f"{self.width}x{self.height}")

    def to_json(self) -> dict:
        return {"version": 1, "width": self.width, "height": self.height,
                "boxes": [box_to_obj(b) for b in self.boxes]}

    @staticmethod
    def from_json(obj: dict) -> "SceneSpec":
        return SceneSpec(width=float(obj["width"]), height=float(obj["height"]),
                         boxes=tuple(box_from_obj(o) for o in obj["boxes"]))


def grid_slices(extent: tuple[float, float], grid_n: int) -> list[SliceSpec]:
    """Cut the extent into grid_n x grid_n equal tiles covering it exactly."""
    w, h = extent
    if grid_n < 1:
        raise ValueError(f"grid must be >= 1, got {grid_n}")
    if w < grid_n or h < grid_n:
        raise ValueError(f"extent {w}x{h} smaller than a {grid_n}x{grid_n} grid")
    xs = [w * i / grid_n for i in range(grid_n + 1)]
    ys = [h * i / grid_n for i in range(grid_n + 1)]
    return [SliceSpec(xs[i], ys[j], xs[i + 1] - xs[i], ys[j + 1] - ys[j])
            for j in range(grid_n) for i in range(grid_n)]


def filter_empty(slices: Sequence[SliceSpec], scene: SceneSpec) -> list[SliceSpec]:
    """Keep slices that strictly overlap at least one ground-truth box."""
    def hits(s: SliceSpec) -> bool:
        for b in scene.boxes:
            if (b.x1 < s.x + s.width and b.x2 > s.x
                    and b.y1 < s.y + s.height and b.y2 > s.y):
                return True
        return False

    return [s for s in slices if hits(s)]


def slice_origins(extent: float, size: float, overlap: float) -> list[float]:
    """Window origins along one axis: stride size-overlap, final one clamped
    so its far edge meets the image edge; duplicate origins collapse."""
    if not 0 <= overlap < size:
        raise ValueError(f"overlap {overlap} must satisfy 0 <= overlap < size {size}")
    if size >= extent:
        return [0.0]
    stride = size - overlap
    origins: list[float] = []
    o = 0.0
    while o + size < extent:
        origins.append(o)
        o += stride
    last = extent - size
    if not origins or origins[-1] != last:
        origins.append(last)
    return origins


def overlap_slices(extent: tuple[float, float], size: float,
                   overlap: float, scale: float = 1.0) -> list[SliceSpec]:
    """Overlapping windows covering the extent; a window larger than the
    image collapses to one clamped slice covering it."""
    w, h = extent
    size_x, size_y = min(size, w), min(size, h)
    xs = slice_origins(w, size_x, min(overlap, max(size_x - 1, 0)))
    ys = slice_origins(h, size_y, min(overlap, max(size_y - 1, 0)))
    return [SliceSpec(x, y, size_x, size_y, scale) for y in ys for x in xs]


def to_local(box: DetBox, spec: SliceSpec) -> DetBox:
    """Global pixels -> slice coordinates: translate by origin, then scale."""
    return DetBox((box.x1 - spec.x) * spec.scale, (box.y1 - spec.y) * spec.scale,
                  (box.x2 - spec.x) * spec.scale, (box.y2 - spec.y) * spec.scale,
                  box.score, box.cls, box.slice_id)


def to_global(box: DetBox, spec: SliceSpec) -> DetBox:
    """Inverse of :func:`to_local`: un-scale, then translate by the origin."""
    return DetBox(box.x1 / spec.scale + spec.x, box.y1 / spec.scale + spec.y,
                  box.x2 / spec.scale + spec.x, box.y2 / spec.scale + spec.y,
                  box.score, box.cls, box.slice_id)


def clip_to_slice(box: DetBox, spec: SliceSpec) -> DetBox | None:
    """Clip a slice-local box to the slice window; None if nothing remains."""
    x1 = max(box.x1, 0.0)
    y1 = max(box.y1, 0.0)
    x2 = min(box.x2, spec.width * spec.scale)
    y2 = min(box.y2, spec.height * spec.scale)
    if x2 <= x1 or y2 <= y1:
        return None
    return DetBox(x1, y1, x2, y2, box.score, box.cls, box.slice_id)


def scale_filter(boxes: Iterable[DetBox], f: ScaleFilter) -> list[DetBox]:
    return [b for b in boxes if f.keeps(b)]


@dataclass(frozen=True)
class ScalePass:
    """One slicing scale of the pipeline and its responsibility filter."""

    size: float
    overlap: float
    filter: ScaleFilter
    scale: float = 1.0


def two_scale_passes(extent: tuple[float, float], overlap_ratio: float = 0.25,
                     area_threshold: float = DEFAULT_AREA_THRESHOLD
                     ) -> tuple[ScalePass, ScalePass]:
    """Whole-extent coarse pass plus quarter-extent fine pass, sharing one
    overlap ratio."""
    w, h = extent
    coarse = max(w, h)
    fine = coarse / 4.0
    return (
        ScalePass(fine, fine * overlap_ratio, ScaleFilter(area_threshold, "fine")),
        ScalePass(coarse, coarse * overlap_ratio,
                  ScaleFilter(area_threshold, "coarse")),
    )


Detector = Callable[[SliceSpec], list[DetBox]]


def oracle_detector(scene: SceneSpec, partial: str = "drop") -> Detector:
    """Perfect detector in slice-local coordinates.

    Boxes fully inside the slice come back exact.  Boxes only partly visible
    are skipped by default (``partial="drop"``: an idealized detector does
    not guess at objects it cannot see whole) or clipped to the slice with
    ``partial="clip"``, the behavior that reproduces seam fragments.
    """
    if partial not in ("drop", "clip"):
        raise ValueError(f"partial must be drop or clip, got {partial!r}")

    def detect(spec: SliceSpec) -> list[DetBox]:
        out = []
        for b in scene.boxes:
            local = to_local(b, spec)
            clipped = clip_to_slice(local, spec)
            if clipped is None:
                continue
            if partial == "clip" or clipped == local:
                out.append(clipped)
        return out

    return detect


def run_pipeline(scene: SceneSpec, detector: Detector,
                 passes: Sequence[ScalePass],
                 cfg: CnmsConfig = CnmsConfig(), merge: str = "cnms",
                 workers: int | None = None) -> list[DetBox]:
    """Slice at every pass scale, detect, map to global pixels, filter each
    pass by its role, then merge across all slices."""
    if merge not in ("cnms", "nms"):
        raise ValueError(f"merge must be cnms or nms, got {merge!r}")
    extent = (scene.width, scene.height)
    per_slice_sets: list[list[DetBox]] = []
    slice_id = 0
    for p in passes:
        slices = overlap_slices(extent, p.size, p.overlap, scale=p.scale)
        if workers and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                raw = list(pool.map(detector, slices))
        else:
            raw = [detector(s) for s in slices]
        for spec, local_boxes in zip(slices, raw):
            cleaned = []
            for b in local_boxes:
                clipped = clip_to_slice(b, spec)
                if clipped is None:
                    continue
                global_box = to_global(clipped, spec)
                cleaned.append(DetBox(global_box.x1, global_box.y1,
                                      global_box.x2, global_box.y2,
                                      global_box.score, global_box.cls,
                                      slice_id))
            per_slice_sets.append(scale_filter(cleaned, p.filter))
            slice_id += 1
    if merge == "nms":
        union = [b for s in per_slice_sets for b in s]
        return nms(union, cfg.iou_threshold)
    return cross_slice_nms_multi(per_slice_sets, cfg)


def match_report(detections: Sequence[DetBox], scene: SceneSpec,
                 match_iou: float = 0.5) -> dict:
    """Greedy one-to-one matching of detections to ground truth."""
    unmatched = list(range(len(scene.boxes)))
    matched = 0
    for d in sorted(detections, key=lambda b: -b.score):
        best, best_iou = None, match_iou
        for gi in unmatched:
            g = scene.boxes[gi]
            if g.cls != d.cls:
                continue
            v = iou(d, g)
            if v >= best_iou:
                best, best_iou = gi, v
        if best is not None:
            unmatched.remove(best)
            matched += 1
    n_det, n_gt = len(detections), len(scene.boxes)
    return {
        "detections": n_det,
        "ground_truth": n_gt,
        "matched": matched,
        "recall": matched / n_gt if n_gt else 1.0,
        "precision": matched / n_det if n_det else 1.0,
    }


# -- synthetic scenes --------------------------------------------------------------


def random_scene(rng: np.random.Generator, extent: tuple[float, float],
                 n_boxes: int, side_range: tuple[float, float] = (4.0, 400.0),
                 max_pairwise_iou: float = 0.2, cls_count: int = 1,
                 max_tries: int = 200) -> SceneSpec:
    """Boxes with log-uniform sides (spanning ~100x) and bounded mutual IoU,
    so a perfect detector's boxes never suppress each other."""
    w, h = extent
    lo, hi = side_range
    boxes: list[DetBox] = []
    for _ in range(n_boxes):
        for _ in range(max_tries):
            bw = min(float(np.exp(rng.uniform(np.log(lo), np.log(hi)))), w)
            bh = min(float(np.exp(rng.uniform(np.log(lo), np.log(hi)))), h)
            x1 = float(rng.uniform(0, w - bw))
            y1 = float(rng.uniform(0, h - bh))
            cand = DetBox(x1, y1, x1 + bw, y1 + bh,
                          score=float(np.round(rng.uniform(0.5, 1.0), 6)),
                          cls=int(rng.integers(cls_count)))
            if all(iou(cand, b) < max_pairwise_iou for b in boxes):
                boxes.append(cand)
                break
    return SceneSpec(w, h, tuple(boxes))


def render_scene(scene: SceneSpec, spec: SliceSpec,
                 noise_seed: int = 0) -> np.ndarray:
    """Rasterize the slice: smooth background, noisy texture inside boxes.

    Output extent is the slice size times its scale, rounded up, 3 channels.
    """
    h = int(math.ceil(spec.height * spec.scale))
    w = int(math.ceil(spec.width * spec.scale))
    ys = (np.arange(h) / spec.scale) + spec.y
    xs = (np.arange(w) / spec.scale) + spec.x
    image = np.zeros((h, w, 3))
    image[..., 0] = 0.1 + 0.2 * np.sin(ys / 97.0)[:, None]
    image[..., 1] = 0.1 + 0.2 * np.cos(xs / 89.0)[None, :]
    rng = np.random.default_rng(noise_seed)
    for b in scene.boxes:
        inside = ((ys[:, None] >= b.y1) & (ys[:, None] < b.y2)
                  & (xs[None, :] >= b.x1) & (xs[None, :] < b.x2))
        if inside.any():
            image[inside] = rng.standard_normal((int(inside.sum()), 3))
    return image
