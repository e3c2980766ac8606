"""Attention and feed-forward blocks.

Three building blocks share pre-norm residual wiring (norm -> sublayer ->
add): a global block that self-attends jointly over all pooled window
tokens, a local block that attends within kept windows only (optionally on
the half-window cyclic shift, with the region mask that forbids attention
across wrapped-around content), and a convolutional stand-in that swaps
each self-attention for a 3x3 depthwise + 1x1 pointwise pair.

Sparse sublayers touch kept windows only: gathered windows are normed,
transformed, given their residual, and scattered back, so tokens of
non-kept windows leave the block bit-identical to how they entered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from sparsewin.sparsify import SparseSelection, fuse_local
from sparsewin.tensor import (
    LayerParams,
    Tensor,
    add,
    layernorm,
    linear,
    matmul,
    mlp_forward,
    mul,
    reshape,
    scatter_rows,
    softmax,
    take_rows,
    transpose,
)
from sparsewin.windowing import (
    WindowConfig,
    WindowGrid,
    crop,
    cyclic_shift,
    cyclic_unshift,
    make_grid,
    pad_to_windows,
    window_partition,
    window_reverse,
)

MASK_NEG = -1e9


@dataclass
class AttentionParams:
    """Projections, head layout, and the relative-position bias table.

    The bias table has one row per relative offset in [-(M-1), M-1]^2 and one
    column per head; ``window`` is None for attention without the bias
    (the global block attends over pooled tokens where relative window
    offsets carry no meaning).
    """

    num_heads: int
    qkv: LayerParams
    out: LayerParams
    bias_table: Tensor | None = None
    window: int | None = None
    scale: float | None = None

    def __post_init__(self):
        dim = self.qkv["wq"].shape[0]
        if dim % self.num_heads:
            raise ValueError(f"dim {dim} not divisible by {self.num_heads} heads")
        if self.scale is None:
            self.scale = (dim // self.num_heads) ** -0.5
        if self.bias_table is not None:
            if self.window is None:
                raise ValueError("bias table needs a window size")
            rows = (2 * self.window - 1) ** 2
            if self.bias_table.shape != (rows, self.num_heads):
                raise ValueError(
                    f"bias table shaped {self.bias_table.shape}, "
                    f"expected ({rows}, {self.num_heads})")


@dataclass(frozen=True)
class ShiftMask:
    """Additive per-window mask (0 allowed, large negative forbidden)."""

    values: np.ndarray  # (n_windows, M*M, M*M)

    def take(self, kept: np.ndarray) -> np.ndarray:
        return self.values[np.asarray(kept, dtype=np.intp)]


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """Flat index into the (2M-1)^2 bias table for every token pair."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij"), axis=0).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.intp)


@lru_cache(maxsize=None)
def _shift_mask_values(window: int, h_pad: int, w_pad: int, shift: int) -> np.ndarray:
    """Forbid attention between tokens from different pre-shift regions.

    The label canvas is written directly in shifted-frame coordinates: only
    the last window row/column mixes wrapped-around content, so windows fully
    inside the interior band stay unmasked.
    """
    labels = np.zeros((h_pad, w_pad), dtype=np.intp)
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    tag = 0
    for hs in spans:
        for ws in spans:
            labels[hs, ws] = tag
            tag += 1
    wy, wx = h_pad // window, w_pad // window
    per_window = (labels.reshape(wy, window, wx, window)
                  .transpose(0, 2, 1, 3).reshape(wy * wx, window * window))
    diff = per_window[:, :, None] != per_window[:, None, :]
    return np.where(diff, MASK_NEG, 0.0)


def build_shift_mask(grid: WindowGrid, shift: int) -> ShiftMask:
    return ShiftMask(_shift_mask_values(grid.window, grid.h_pad, grid.w_pad, shift))


def multi_head_attention(x: Tensor, p: AttentionParams,
                         mask: np.ndarray | None = None) -> Tensor:
    """Self-attention over (batch, tokens, dim); batch items never interact."""
    b, n, c = x.shape
    h = p.num_heads
    d = c // h

    def split_heads(t):
        return transpose(reshape(t, (b, n, h, d)), (0, 2, 1, 3))

    q = split_heads(linear(x, p.qkv["wq"], p.qkv["bq"]))
    k = split_heads(linear(x, p.qkv["wk"], p.qkv["bk"]))
    v = split_heads(linear(x, p.qkv["wv"], p.qkv["bv"]))

    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), p.scale)
    if p.bias_table is not None:
        m2 = p.window * p.window
        if n != m2:
            raise ValueError(f"bias table is for {m2} tokens per window, got {n}")
        idx = relative_position_index(p.window).reshape(-1)
        bias = reshape(transpose(reshape(take_rows(p.bias_table, idx),
                                         (n, n, h)), (2, 0, 1)), (1, h, n, n))
        scores = add(scores, bias)
    if mask is not None:
        if mask.shape != (b, n, n):
            raise ValueError(
                f"mask shaped {mask.shape} does not match windows ({b}, {n}, {n})")
        scores = add(scores, Tensor(mask.reshape(b, 1, n, n)))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, n, c))
    return linear(ctx, p.out["w"], p.out["b"])


def w_msa(windows: Tensor, p: AttentionParams,
          mask: np.ndarray | None = None) -> Tensor:
    """Per-window multi-head self-attention on (K, M*M, C) gathered windows."""
    return multi_head_attention(windows, p, mask=mask)


@dataclass
class ConvParams:
    """3x3 depthwise + 1x1 pointwise stand-in for window self-attention."""

    depthwise: Tensor   # (3, 3, C)
    dw_bias: Tensor     # (C,)
    pointwise: LayerParams  # w (C, C), b (C,)


@dataclass
class BlockParams:
    """One pre-norm transformer-style block (attention or conv core)."""

    norm1: LayerParams
    core: AttentionParams | ConvParams
    norm2: LayerParams
    mlp: LayerParams
    window: int | None = None


@lru_cache(maxsize=None)
def _conv_offset_indices(batch: int, h: int, w: int) -> tuple:
    """Source row indices into the (batch, h+2, w+2) zero-padded maps for
    each 3x3 offset, plus the scatter targets building that padded map."""
    hp, wp = h + 2, w + 2
    base = (np.arange(batch)[:, None, None] * (hp * wp)
            + (np.arange(h) + 1)[None, :, None] * wp
            + (np.arange(w) + 1)[None, None, :])
    pad_targets = base.reshape(-1)
    offsets = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            offsets.append((base + dy * wp + dx).reshape(-1))
    return pad_targets, tuple(offsets)


def conv_local_layer(z: Tensor, p: ConvParams) -> Tensor:
    """Depthwise 3x3 (zero-padded borders) then pointwise 1x1, per map.

    Accepts a single (H, W, C) map or a batch (K, H, W, C) of windows.
    """
    squeeze = z.ndim == 3
    if squeeze:
        z = reshape(z, (1,) + z.shape)
    k, h, w, c = z.shape
    pad_targets, offsets = _conv_offset_indices(k, h, w)
    padded = scatter_rows(Tensor(np.zeros((k * (h + 2) * (w + 2), c))),
                          pad_targets, reshape(z, (k * h * w, c)))
    acc = None
    dw_rows = reshape(p.depthwise, (9, c))
    for o, idx in enumerate(offsets):
        term = mul(take_rows(padded, idx), take_rows(dw_rows, np.array([o])))
        acc = term if acc is None else add(acc, term)
    out = add(acc, p.dw_bias)
    out = linear(out, p.pointwise["w"], p.pointwise["b"])
    out = reshape(out, (k, h, w, c))
    return reshape(out, (h, w, c)) if squeeze else out


def _core_delta(tokens: Tensor, block: BlockParams, window_hw: tuple[int, int],
                mask: np.ndarray | None) -> Tensor:
    """Normed sublayer output for gathered (K, N, C) window tokens."""
    t = layernorm(tokens, block.norm1)
    if isinstance(block.core, ConvParams):
        k, n, c = tokens.shape
        h, w = window_hw
        return reshape(conv_local_layer(reshape(t, (k, h, w, c)), block.core),
                       (k, n, c))
    return w_msa(t, block.core, mask=mask)


def global_block(zbar: Tensor, block: BlockParams) -> Tensor:
    """Joint self-attention over every pooled window token, then the MLP."""
    wy, wx, c = zbar.shape
    tokens = reshape(zbar, (1, wy * wx, c))
    tokens = add(tokens, _core_delta(tokens, block, (wy, wx), None))
    tokens = add(tokens, mlp_forward(layernorm(tokens, block.norm2), block.mlp))
    return reshape(tokens, (wy, wx, c))


def local_shift(grid: WindowGrid, shifted: bool) -> int:
    """Half-window shift, disabled when the padded map is a single window."""
    if not shifted or min(grid.h_pad, grid.w_pad) <= grid.window:
        return 0
    return grid.window // 2


def local_block(z: Tensor, sel: SparseSelection, block: BlockParams,
                shifted: bool = False) -> Tensor:
    """Window attention and feed-forward applied to kept windows only.

    Both sublayers gather the same kept windows; the attention sublayer uses
    the cyclically shifted partition when ``shifted``, the feed-forward the
    unshifted one.  Non-kept windows pass through unchanged.
    """
    h, w, c = z.shape
    m = block.window
    if m is None:
        raise ValueError("local_block needs BlockParams.window")
    cfg = WindowConfig(m)
    grid = make_grid(h, w, m)
    if sel.total != grid.n_windows:
        raise ValueError(
            f"selection over {sel.total} windows does not match grid "
            f"with {grid.n_windows}")
    if sel.kept_count == 0:
        return z
    shift = local_shift(grid, shifted)
    mask = build_shift_mask(grid, shift).take(sel.kept_indices) if shift else None

    # attention sublayer on the (possibly shifted) window partition
    zp, _ = pad_to_windows(z, cfg)
    wins = reshape(window_partition(cyclic_shift(zp, shift), grid),
                   (grid.n_windows, m * m, c))
    kept = take_rows(wins, sel.kept_indices)
    kept = add(kept, _core_delta(kept, block, (m, m), mask))
    merged = fuse_local(wins, kept, sel)
    z = crop(cyclic_unshift(window_reverse(
        reshape(merged, (grid.n_windows, m, m, c)), grid), shift), h, w)

    # feed-forward sublayer on the unshifted partition
    zp, _ = pad_to_windows(z, cfg)
    wins = reshape(window_partition(zp, grid), (grid.n_windows, m * m, c))
    kept = take_rows(wins, sel.kept_indices)
    kept = add(kept, mlp_forward(layernorm(kept, block.norm2), block.mlp))
    merged = fuse_local(wins, kept, sel)
    return crop(window_reverse(reshape(merged, (grid.n_windows, m, m, c)), grid),
                h, w)


# -- parameter factories ---------------------------------------------------------


def layernorm_params(dim: int) -> LayerParams:
    return LayerParams("layernorm", {
        "gain": Tensor(np.ones(dim), requires_grad=True),
        "bias": Tensor(np.zeros(dim), requires_grad=True),
    })


def linear_params(rng: np.random.Generator, d_in: int, d_out: int,
                  std: float = 0.02) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.standard_normal((d_in, d_out)) * std, requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return w, b


def mlp_params(rng: np.random.Generator, dim: int, hidden: int) -> LayerParams:
    w1, b1 = linear_params(rng, dim, hidden)
    w2, b2 = linear_params(rng, hidden, dim)
    return LayerParams("linear", {"w1": w1, "b1": b1, "w2": w2, "b2": b2})


def attention_params(rng: np.random.Generator, dim: int, num_heads: int,
                     window: int | None = None) -> AttentionParams:
    names = {}
    for tag in ("q", "k", "v"):
        wt, bt = linear_params(rng, dim, dim)
        names[f"w{tag}"] = wt
        names[f"b{tag}"] = bt
    wo, bo = linear_params(rng, dim, dim)
    bias_table = None
    if window is not None:
        # zero-initialized: the table only moves outputs once trained/perturbed
        bias_table = Tensor(np.zeros(((2 * window - 1) ** 2, num_heads)),
                            requires_grad=True)
    return AttentionParams(
        num_heads=num_heads,
        qkv=LayerParams("attention-projection", names),
        out=LayerParams("linear", {"w": wo, "b": bo}),
        bias_table=bias_table,
        window=window,
    )


def conv_params(rng: np.random.Generator, dim: int, std: float = 0.02) -> ConvParams:
    w, b = linear_params(rng, dim, dim)
    return ConvParams(
        depthwise=Tensor(rng.standard_normal((3, 3, dim)) * std, requires_grad=True),
        dw_bias=Tensor(np.zeros(dim), requires_grad=True),
        pointwise=LayerParams("linear", {"w": w, "b": b}),
    )


def block_params(rng: np.random.Generator, dim: int, num_heads: int,
                 hidden: int, window: int | None = None,
                 kind: str = "attention") -> BlockParams:
    if kind == "attention":
        core = attention_params(rng, dim, num_heads, window=window)
    elif kind == "convolution":
        core = conv_params(rng, dim)
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    return BlockParams(
        norm1=layernorm_params(dim),
        core=core,
        norm2=layernorm_params(dim),
        mlp=mlp_params(rng, dim, hidden),
        window=window,
    )
