"""Backbone assembly: patch embedding, staged global-then-local blocks with a
per-stage keeping-ratio schedule, and patch merging between stages.

Per stage: the padded token map is pooled per window, global blocks attend
jointly over the pooled tokens, the pooled result is broadcast back and fused
into the map, and the local blocks then attend within the kept windows only
(alternating unshifted/shifted).  Windows are scored once per stage, before
the fusion, because the training-mode fusion weights the global term by
(1 - score); the same scores drive the top-K selection used by every local
block of the stage.

In a stage with depth d, the first ceil(d/2) blocks are global and the rest
local.  No merge precedes stage 1; merges sit between stages.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from sparsewin.attention import (
    BlockParams,
    block_params,
    global_block,
    local_block,
)
from sparsewin.sparsify import (
    ScorerParams,
    SparseSelection,
    fuse_global,
    gumbel_relax,
    schedule_ratios,
    score_windows,
    scorer_params,
    select_topk,
    window_logits,
)
from sparsewin.tensor import (
    LayerParams,
    Tensor,
    concat,
    linear,
    load_tensor,
    reshape,
    save_tensor,
    softmax,
    take_rows,
)
from sparsewin.windowing import (
    WindowConfig,
    WindowGrid,
    aggregate,
    crop,
    inverse_aggregate,
    make_grid,
    pad_to_windows,
)

CONFIG_VERSION = 1
BLOCK_KINDS = ("attention", "convolution")


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    window: int
    ratio: float = 1.0
    kind: str = "attention"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"stage depth must be >= 1, got {self.depth}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"keeping ratio must be in (0, 1], got {self.ratio}")
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def global_depth(self) -> int:
        return -(-self.depth // 2)

    @property
    def local_depth(self) -> int:
        return self.depth - self.global_depth


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int
    stages: tuple[StageConfig, ...]
    mode: str = "infer"
    mlp_ratio: float = 2.0
    gumbel_temperature: float = 1.0
    scorer_transform: str = "identity"
    in_channels: int = 3

    def __post_init__(self):
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be train or infer, got {self.mode!r}")
        if self.patch_size < 1:
            raise ValueError("patch size must be >= 1")
        object.__setattr__(self, "stages", tuple(self.stages))
        for a, b in zip(self.stages, self.stages[1:]):
            if b.dim != 2 * a.dim:
                raise ValueError(
                    f"stage dims must double across merges, got {a.dim} -> {b.dim}")

    def hidden(self, dim: int) -> int:
        return int(round(dim * self.mlp_ratio))

    def to_json(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "patch_size": self.patch_size,
            "mode": self.mode,
            "mlp_ratio": self.mlp_ratio,
            "gumbel_temperature": self.gumbel_temperature,
            "scorer_transform": self.scorer_transform,
            "in_channels": self.in_channels,
            "stages": [{"depth": s.depth, "dim": s.dim, "heads": s.heads,
                        "window": s.window, "ratio": s.ratio, "kind": s.kind}
                       for s in self.stages],
        }

    @staticmethod
    def from_json(obj: dict) -> "BackboneConfig":
        version = obj.get("version")
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version!r}")
        stages = tuple(StageConfig(**s) for s in obj["stages"])
        return BackboneConfig(
            patch_size=obj["patch_size"],
            stages=stages,
            mode=obj.get("mode", "infer"),
            mlp_ratio=obj.get("mlp_ratio", 2.0),
            gumbel_temperature=obj.get("gumbel_temperature", 1.0),
            scorer_transform=obj.get("scorer_transform", "identity"),
            in_channels=obj.get("in_channels", 3),
        )

    def with_ratios(self, ratios) -> "BackboneConfig":
        ratios = list(ratios)
        if len(ratios) != len(self.stages):
            raise ValueError(
                f"{len(ratios)} ratios for {len(self.stages)} stages")
        stages = tuple(replace(s, ratio=r) for s, r in zip(self.stages, ratios))
        return replace(self, stages=stages)


def default_config(keep_ratio: float = 0.7, mode: str = "infer",
                   kind: str = "attention", window: int = 7,
                   depth: int = 2) -> BackboneConfig:
    """Desk-scale four-stage configuration."""
    dims = (32, 64, 128, 256)
    heads = (2, 2, 4, 4)
    ratios = schedule_ratios(keep_ratio)
    stages = tuple(
        StageConfig(depth=depth, dim=d, heads=h, window=window, ratio=r, kind=kind)
        for d, h, r in zip(dims, heads, ratios))
    return BackboneConfig(patch_size=4, stages=stages, mode=mode)


@dataclass
class StageParams:
    global_blocks: list[BlockParams]
    local_blocks: list[BlockParams]
    scorer: ScorerParams


@dataclass
class BackboneParams:
    patch_embed: LayerParams
    merges: list[LayerParams]
    stages: list[StageParams]

    def named_tensors(self):
        """Stable (name, tensor) walk over every parameter."""
        def from_layer(prefix, layer):
            for key in sorted(layer.tensors):
                yield f"{prefix}.{key}", layer.tensors[key]

        def from_block(prefix, block):
            yield from from_layer(f"{prefix}.norm1", block.norm1)
            core = block.core
            if hasattr(core, "depthwise"):
                yield f"{prefix}.conv.depthwise", core.depthwise
                yield f"{prefix}.conv.dw_bias", core.dw_bias
                yield from from_layer(f"{prefix}.conv.pointwise", core.pointwise)
            else:
                yield from from_layer(f"{prefix}.attn.qkv", core.qkv)
                yield from from_layer(f"{prefix}.attn.out", core.out)
                if core.bias_table is not None:
                    yield f"{prefix}.attn.bias_table", core.bias_table
            yield from from_layer(f"{prefix}.norm2", block.norm2)
            yield from from_layer(f"{prefix}.mlp", block.mlp)

        yield from from_layer("patch_embed", self.patch_embed)
        for i, merge in enumerate(self.merges):
            yield from from_layer(f"merge{i}", merge)
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage.global_blocks):
                yield from from_block(f"stage{si}.global{bi}", block)
            for bi, block in enumerate(stage.local_blocks):
                yield from from_block(f"stage{si}.local{bi}", block)
            yield from from_layer(f"stage{si}.scorer", stage.scorer.mlp)

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    from sparsewin.attention import linear_params

    dim0 = cfg.stages[0].dim
    w, b = linear_params(rng, cfg.patch_size ** 2 * cfg.in_channels, dim0)
    embed = LayerParams("linear", {"w": w, "b": b})
    merges = []
    for prev, nxt in zip(cfg.stages, cfg.stages[1:]):
        mw, mb = linear_params(rng, 4 * prev.dim, nxt.dim)
        merges.append(LayerParams("linear", {"w": mw, "b": mb}))
    stages = []
    for sc in cfg.stages:
        hidden = cfg.hidden(sc.dim)
        globals_ = [block_params(rng, sc.dim, sc.heads, hidden, kind=sc.kind)
                    for _ in range(sc.global_depth)]
        locals_ = [block_params(rng, sc.dim, sc.heads, hidden,
                                window=sc.window, kind=sc.kind)
                   for _ in range(sc.local_depth)]
        stages.append(StageParams(
            global_blocks=globals_,
            local_blocks=locals_,
            scorer=scorer_params(rng, sc.window, sc.dim,
                                 transform=cfg.scorer_transform),
        ))
    return BackboneParams(patch_embed=embed, merges=merges, stages=stages)


# -- checkpoint I/O ----------------------------------------------------------------


def save_params(path, params: BackboneParams) -> None:
    """One blob of binary tensors plus a manifest of names and shapes."""
    import os
    os.makedirs(path, exist_ok=True)
    names = []
    with open(os.path.join(path, "tensors.bin"), "wb") as fh:
        for name, t in params.named_tensors():
            names.append({"name": name, "shape": list(t.shape)})
            save_tensor(fh, t)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump({"version": CONFIG_VERSION, "tensors": names}, fh, indent=1)


def load_params(path, cfg: BackboneConfig,
                rng: np.random.Generator | None = None) -> BackboneParams:
    """Rebuild parameters for ``cfg`` and fill them from a checkpoint."""
    import os
    params = init_params(cfg, rng or np.random.default_rng(0))
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    entries = {e["name"]: tuple(e["shape"]) for e in manifest["tensors"]}
    with open(os.path.join(path, "tensors.bin"), "rb") as fh:
        for entry in manifest["tensors"]:
            loaded = load_tensor(fh)
            if tuple(loaded.shape) != tuple(entry["shape"]):
                raise ValueError(
                    f"checkpoint tensor {entry['name']} shaped {loaded.shape}, "
                    f"manifest says {entry['shape']}")
            entries[entry["name"]] = loaded
    for name, t in params.named_tensors():
        if name not in entries:
            raise ValueError(f"checkpoint missing tensor {name}")
        loaded = entries[name]
        if loaded.shape != t.shape:
            raise ValueError(
                f"checkpoint tensor {name} shaped {loaded.shape}, "
                f"model expects {t.shape}")
        t.data[...] = loaded.data
    return params


# -- forward ------------------------------------------------------------------------


def patch_embed(image: Tensor, patch: int, params: LayerParams) -> Tensor:
    """Linear projection of non-overlapping patches; pads to full patches."""
    h, w, ci = image.shape
    cfg = WindowConfig(patch)
    padded, grid = pad_to_windows(image, cfg)
    hp, wp = grid.h_pad, grid.w_pad
    hy, wx = hp // patch, wp // patch
    ids = np.arange(hp * wp).reshape(hy, patch, wx, patch)
    order = np.ascontiguousarray(ids.transpose(0, 2, 1, 3)).reshape(-1)
    rows = take_rows(reshape(padded, (hp * wp, ci)), order)
    flat = reshape(rows, (hy * wx, patch * patch * ci))
    return reshape(linear(flat, params["w"], params["b"]), (hy, wx, -1))


def patch_merge(z: Tensor, params: LayerParams) -> Tensor:
    """Concatenate each 2x2 token group (4C) and project to 2C."""
    h, w, c = z.shape
    if h % 2 or w % 2:
        padded, _ = pad_to_windows(z, WindowConfig(2))
        z = padded
        h, w = z.shape[:2]
    h2, w2 = h // 2, w // 2
    ids = np.arange(h * w).reshape(h, w)
    flat = reshape(z, (h * w, c))
    groups = [take_rows(flat, ids[dy::2, dx::2].reshape(-1))
              for dy, dx in ((0, 0), (1, 0), (0, 1), (1, 1))]
    merged = concat(groups, axis=1)
    return reshape(linear(merged, params["w"], params["b"]), (h2, w2, -1))


@dataclass
class StageResult:
    features: Tensor
    scores: Tensor
    selection: SparseSelection
    grid: WindowGrid


def run_stage(z: Tensor, sp: StageParams, sc: StageConfig, *,
              mode: str = "infer", temperature: float = 1.0,
              noise: np.ndarray | None = None,
              rng: np.random.Generator | None = None) -> StageResult:
    """One stage: pooled global blocks, scoring, fusion, sparse local blocks."""
    h, w, _ = z.shape
    cfg = WindowConfig(sc.window)
    zp, grid = pad_to_windows(z, cfg)

    zbar = aggregate(zp, cfg, grid)
    reconstruction = None
    if sp.scorer.uses_reconstruction:
        reconstruction = inverse_aggregate(zbar, cfg, grid)
    pooled = zbar
    for gb in sp.global_blocks:
        pooled = global_block(pooled, gb)
    z_global = crop(inverse_aggregate(pooled, cfg, grid), h, w)

    logits = window_logits(zp, cfg, grid, sp.scorer, reconstruction)
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("training mode needs gumbel noise or an rng")
            noise = rng.uniform(size=grid.n_windows)
        scores = gumbel_relax(logits, temperature, noise)
    else:
        scores = softmax(logits, axis=0)

    selection = select_topk(scores, sc.ratio)
    z = fuse_global(z, z_global, scores, mode == "train", cfg)
    for i, lb in enumerate(sp.local_blocks):
        z = local_block(z, selection, lb, shifted=(i % 2 == 1))
    return StageResult(z, scores, selection, grid)


def run_backbone(image: Tensor, cfg: BackboneConfig, params: BackboneParams, *,
                 mode: str | None = None,
                 rng: np.random.Generator | None = None) -> list[StageResult]:
    """Embed, then run each stage with a patch merge between stages."""
    mode = mode or cfg.mode
    z = patch_embed(image, cfg.patch_size, params.patch_embed)
    results: list[StageResult] = []
    for i, (sc, sp) in enumerate(zip(cfg.stages, params.stages)):
        if i > 0:
            z = patch_merge(z, params.merges[i - 1])
        result = run_stage(z, sp, sc, mode=mode,
                           temperature=cfg.gumbel_temperature, rng=rng)
        results.append(result)
        z = result.features
    return results


def stage_token_extents(cfg: BackboneConfig, image_h: int,
                        image_w: int) -> list[tuple[int, int]]:
    """Token-map (h, w) per stage for an image extent, without running."""
    h = -(-image_h // cfg.patch_size)
    w = -(-image_w // cfg.patch_size)
    extents = [(h, w)]
    for _ in cfg.stages[1:]:
        h = -(-h // 2)
        w = -(-w // 2)
        extents.append((h, w))
    return extents
