"""Analytic operation counting with foreground/background attribution.

Every formula here mirrors the exact op sequence the forward pass executes
under the cost model in :mod:`sparsewin.tensor` (multiply-accumulate = 2,
softmax 5/element, layernorm 7/element, gelu 8/element, elementwise 1/output
element, reductions 1/input element, data movement free), so analytic counts
equal metered execution counts integer-for-integer.  Counts cover inference
mode.

Local-block cost is exactly (kept windows) x (per-window cost): the sparse
sublayers norm, attend, and add residuals on gathered windows only.  Window
costs attribute to the foreground or background bucket by whether the window
footprint overlaps an annotated box; stage-wide costs (embedding, merging,
pooling, global blocks, scoring, fusion) split pro rata by the foreground
window fraction, with the integer remainder going to background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sparsewin.backbone import BackboneConfig, StageConfig, stage_token_extents
from sparsewin.sparsify import SparseSelection, select_topk
from sparsewin.slicing import SceneSpec
from sparsewin.tensor import (
    GELU_FLOPS_PER_ELEMENT,
    LAYERNORM_FLOPS_PER_ELEMENT,
    SOFTMAX_FLOPS_PER_ELEMENT,
)
from sparsewin.windowing import WindowGrid, make_grid


def linear_flops(n: int, d_in: int, d_out: int) -> int:
    return 2 * n * d_in * d_out + n * d_out


def layernorm_flops(n: int, dim: int) -> int:
    return LAYERNORM_FLOPS_PER_ELEMENT * n * dim


def mlp_flops(n: int, dim: int, hidden: int) -> int:
    return (linear_flops(n, dim, hidden)
            + GELU_FLOPS_PER_ELEMENT * n * hidden
            + linear_flops(n, hidden, dim))


def attention_flops(batch: int, n: int, dim: int, heads: int, *,
                    biased: bool, masked: bool) -> int:
    """Multi-head self-attention over ``batch`` independent token groups."""
    f = 3 * linear_flops(batch * n, dim, dim)        # q, k, v projections
    f += 2 * batch * n * n * dim                     # q @ k^T
    f += batch * heads * n * n                       # score scaling
    if biased:
        f += batch * heads * n * n                   # relative-position bias
    if masked:
        f += batch * heads * n * n                   # additive shift mask
    f += SOFTMAX_FLOPS_PER_ELEMENT * batch * heads * n * n
    f += 2 * batch * n * n * dim                     # attn @ v
    f += linear_flops(batch * n, dim, dim)           # output projection
    return f


def conv_core_flops(n: int, dim: int) -> int:
    """3x3 depthwise (9 taps multiplied, 8 accumulations, bias) + pointwise."""
    return (9 + 8 + 1) * n * dim + linear_flops(n, dim, dim)


def transformer_block_flops(n: int, dim: int, heads: int, hidden: int, *,
                            kind: str, biased: bool, masked: bool) -> int:
    """Pre-norm block: norm, core, add, norm, mlp, add, over ``n`` tokens."""
    if kind == "attention":
        core = attention_flops(1, n, dim, heads, biased=biased, masked=masked)
    else:
        core = conv_core_flops(n, dim)
    return (layernorm_flops(n, dim) + core + n * dim
            + layernorm_flops(n, dim) + mlp_flops(n, dim, hidden) + n * dim)


def local_block_flops_per_window(sc: StageConfig, hidden: int,
                                 masked: bool) -> int:
    """Cost of one kept window through one local block (attention + ffn)."""
    m2 = sc.window * sc.window
    if sc.kind == "attention":
        core = attention_flops(1, m2, sc.dim, sc.heads, biased=True,
                               masked=masked)
    else:
        core = conv_core_flops(m2, sc.dim)
    return (layernorm_flops(m2, sc.dim) + core + m2 * sc.dim
            + layernorm_flops(m2, sc.dim) + mlp_flops(m2, sc.dim, hidden)
            + m2 * sc.dim)


def aggregate_flops(grid: WindowGrid, dim: int) -> int:
    area = grid.h_pad * grid.w_pad
    return 2 * area * dim + grid.n_windows * dim


def inverse_aggregate_flops(grid: WindowGrid, dim: int) -> int:
    return grid.h_pad * grid.w_pad * dim


def score_flops(grid: WindowGrid, dim: int, transform: str) -> int:
    """Residual transform, window projection to one logit, softmax."""
    area = grid.h_pad * grid.w_pad
    if transform in ("raw", "aggregated"):
        residual = 0
    elif transform == "identity":
        residual = area * dim
    else:  # abs, squared: residual plus one elementwise pass
        residual = 2 * area * dim
    d = grid.window * grid.window * dim
    return (residual + linear_flops(grid.n_windows, d, 1)
            + SOFTMAX_FLOPS_PER_ELEMENT * grid.n_windows)


def fuse_flops(grid: WindowGrid, dim: int) -> int:
    """Inference fusion: one add over the unpadded map."""
    return grid.h * grid.w * dim


@dataclass
class StageCost:
    """Fixed per-stage cost components plus the linear kept-window cost."""

    grid: WindowGrid
    components: dict[str, int]
    local_per_window: int
    n_local_blocks: int

    @property
    def fixed(self) -> int:
        return sum(self.components.values())

    def total(self, kept: int) -> int:
        return self.fixed + self.local_per_window * kept


@dataclass
class BackboneCost:
    """Per-stage costs for one input extent; stage 0 carries the embedding,
    later stages carry their preceding merge."""

    config: BackboneConfig
    extents: list[tuple[int, int]]
    stages: list[StageCost]

    def kept_counts(self) -> list[int]:
        return [max(1, int(math.floor(sc.ratio * s.grid.n_windows + 0.5)))
                for sc, s in zip(self.config.stages, self.stages)]

    def total(self, kept: Sequence[int] | None = None) -> int:
        kept = list(kept) if kept is not None else self.kept_counts()
        return sum(s.total(k) for s, k in zip(self.stages, kept))


def count_stage(sc: StageConfig, grid: WindowGrid, hidden: int,
                transform: str = "identity") -> StageCost:
    n = grid.n_windows
    components = {
        "aggregate": aggregate_flops(grid, sc.dim),
        "global": sum(
            transformer_block_flops(n, sc.dim, sc.heads, hidden,
                                    kind=sc.kind, biased=False, masked=False)
            for _ in range(sc.global_depth)),
        "broadcast": inverse_aggregate_flops(grid, sc.dim) * (
            2 if transform != "raw" else 1),
        "score": score_flops(grid, sc.dim, transform),
        "fuse": fuse_flops(grid, sc.dim),
    }
    shift_possible = min(grid.h_pad, grid.w_pad) > sc.window
    per_window = sum(
        local_block_flops_per_window(sc, hidden,
                                     masked=(i % 2 == 1 and shift_possible))
        for i in range(sc.local_depth))
    return StageCost(grid, components, per_window, sc.local_depth)


def count_block(sc: StageConfig, sel: SparseSelection, grid: WindowGrid,
                hidden: int) -> int:
    """Blocks-only count for one stage: global blocks plus kept-window locals."""
    cost = count_stage(sc, grid, hidden)
    return cost.components["global"] + cost.local_per_window * sel.kept_count


def count_backbone(cfg: BackboneConfig, extent: tuple[int, int]) -> BackboneCost:
    """Analytic inference cost of the whole backbone on (height, width)."""
    h, w = extent
    extents = stage_token_extents(cfg, h, w)
    stages: list[StageCost] = []
    for i, sc in enumerate(cfg.stages):
        th, tw = extents[i]
        grid = make_grid(th, tw, sc.window)
        cost = count_stage(sc, grid, cfg.hidden(sc.dim), cfg.scorer_transform)
        if i == 0:
            cost.components["embed"] = linear_flops(
                th * tw, cfg.patch_size ** 2 * cfg.in_channels, sc.dim)
        else:
            prev = cfg.stages[i - 1]
            cost.components["merge"] = linear_flops(
                th * tw, 4 * prev.dim, sc.dim)
        stages.append(cost)
    return BackboneCost(cfg, extents, stages)


# -- foreground / background attribution ------------------------------------------


def foreground_masks(scene: SceneSpec, cfg: BackboneConfig,
                     extent: tuple[int, int]) -> list[np.ndarray]:
    """Per-stage booleans: a window is foreground when its pixel footprint
    strictly overlaps any annotated box."""
    h, w = extent
    masks = []
    for i, (sc, (th, tw)) in enumerate(zip(cfg.stages,
                                           stage_token_extents(cfg, h, w))):
        grid = make_grid(th, tw, sc.window)
        token_px = cfg.patch_size * (2 ** i)
        win_px = token_px * sc.window
        mask = np.zeros(grid.n_windows, dtype=bool)
        for wy in range(grid.windows_y):
            for wx in range(grid.windows_x):
                x1, y1 = wx * win_px, wy * win_px
                x2, y2 = x1 + win_px, y1 + win_px
                for b in scene.boxes:
                    if b.x1 < x2 and b.x2 > x1 and b.y1 < y2 and b.y2 > y1:
                        mask[wy * grid.windows_x + wx] = True
                        break
        masks.append(mask)
    return masks


def _split_prorata(total: int, n_fg: int, n_all: int) -> tuple[int, int]:
    fg = total * n_fg // n_all if n_all else 0
    return fg, total - fg


@dataclass
class FlopsReport:
    """Foreground/background/total counts per stage and overall (exact ints)."""

    per_stage: list[dict]
    foreground: int
    background: int

    @property
    def total(self) -> int:
        return self.foreground + self.background

    def to_json(self) -> dict:
        return {"per_stage": self.per_stage,
                "foreground": self.foreground,
                "background": self.background,
                "total": self.total,
                "gflops": {"foreground": gflops(self.foreground),
                           "background": gflops(self.background),
                           "total": gflops(self.total)}}


def gflops(count: int) -> float:
    """Count in units of 1e9, rounded to four significant digits."""
    value = count / 1e9
    if value == 0.0:
        return 0.0
    exp = math.floor(math.log10(abs(value)))
    return round(value, 3 - exp)


def attribute_fg_bg(cost: BackboneCost, masks: Sequence[np.ndarray],
                    selections: Sequence[SparseSelection | np.ndarray]
                    ) -> FlopsReport:
    """Split costs into foreground and background buckets, exactly."""
    per_stage = []
    fg_total = 0
    bg_total = 0
    for stage, mask, sel in zip(cost.stages, masks, selections):
        kept = sel.kept_indices if isinstance(sel, SparseSelection) else \
            np.asarray(sel, dtype=np.intp)
        n_fg_kept = int(mask[kept].sum())
        fg = stage.local_per_window * n_fg_kept
        bg = stage.local_per_window * (len(kept) - n_fg_kept)
        fixed_fg, fixed_bg = _split_prorata(stage.fixed, int(mask.sum()),
                                            mask.size)
        fg += fixed_fg
        bg += fixed_bg
        per_stage.append({"foreground": fg, "background": bg,
                          "total": fg + bg, "kept": len(kept),
                          "windows": mask.size})
        fg_total += fg
        bg_total += bg
    return FlopsReport(per_stage, fg_total, bg_total)


def foreground_first_selections(cost: BackboneCost,
                                masks: Sequence[np.ndarray],
                                kept: Sequence[int] | None = None
                                ) -> list[SparseSelection]:
    """Selections a trained scorer would approximate: foreground windows rank
    ahead of background, ties by window index."""
    kept = list(kept) if kept is not None else cost.kept_counts()
    out = []
    for stage, mask, k in zip(cost.stages, masks, kept):
        scores = np.where(mask, 1.0, 0.0)
        out.append(select_topk(scores, max(k / mask.size, 1e-9))
                   if k < mask.size else SparseSelection.full(mask.size))
    return out


def sweep_ratios(cfg: BackboneConfig, extent: tuple[int, int],
                 ratios: Sequence[float], scene: SceneSpec | None = None,
                 stage_variants: bool = False) -> list[dict]:
    """One report row per keeping ratio (and optionally per stage-wise
    variant [k,1,1,1] / [1,1,1,k]), attributed against ``scene``."""
    rows = []
    for k in ratios:
        schedules = {"schedule": [k ** (i + 1) for i in range(len(cfg.stages))]}
        if stage_variants:
            ones = [1.0] * len(cfg.stages)
            first = list(ones)
            first[0] = k
            last = list(ones)
            last[-1] = k
            schedules["stage-first"] = first
            schedules["stage-last"] = last
        for label, schedule in schedules.items():
            run_cfg = cfg.with_ratios(schedule)
            cost = count_backbone(run_cfg, extent)
            masks = (foreground_masks(scene, run_cfg, extent) if scene
                     else [np.zeros(s.grid.n_windows, dtype=bool)
                           for s in cost.stages])
            selections = foreground_first_selections(cost, masks)
            report = attribute_fg_bg(cost, masks, selections)
            rows.append({
                "label": label,
                "ratio": k,
                "schedule": schedule,
                "flops_foreground": report.foreground,
                "flops_background": report.background,
                "flops_total": report.total,
                "gflops_foreground": gflops(report.foreground),
                "gflops_background": gflops(report.background),
                "gflops_total": gflops(report.total),
            })
    return rows


def sweep_to_csv(rows: Sequence[dict]) -> str:
    header = ("label,ratio,schedule,gflops_foreground,gflops_background,"
              "gflops_total")
    lines = [header]
    for r in rows:
        schedule = "/".join(f"{v:g}" for v in r["schedule"])
        lines.append(f"{r['label']},{r['ratio']:g},{schedule},"
                     f"{r['gflops_foreground']:g},{r['gflops_background']:g},"
                     f"{r['gflops_total']:g}")
    return "\n".join(lines) + "\n"
