"""Straight-line numpy oracles.

Everything here is written independently of the tensor/attention modules:
plain numpy with explicit per-head and per-window loops, no gradient
machinery, no shared helpers.  The dense backbone implements keep-all
inference semantics and is the equivalence target for the sparse path at
keeping ratio 1; the box-set oracles are literal translations of the greedy
suppression rules used to cross-check the production implementations.
"""

from __future__ import annotations

import math

import numpy as np


# -- dense network oracle -----------------------------------------------------


def ref_layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                  eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def ref_gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def ref_relative_index(window: int) -> np.ndarray:
    n = window * window
    idx = np.zeros((n, n), dtype=int)
    for a in range(n):
        for b in range(n):
            dy = a // window - b // window
            dx = a % window - b % window
            idx[a, b] = (dy + window - 1) * (2 * window - 1) + (dx + window - 1)
    return idx


def ref_attention(tokens: np.ndarray, p: dict, window: int | None = None,
                  mask: np.ndarray | None = None) -> np.ndarray:
    """Self-attention over (N, C) tokens, one head at a time."""
    n, c = tokens.shape
    heads = p["heads"]
    d = c // heads
    q = tokens @ p["wq"] + p["bq"]
    k = tokens @ p["wk"] + p["bk"]
    v = tokens @ p["wv"] + p["bv"]
    out = np.zeros((n, c))
    rel = ref_relative_index(window) if p.get("bias_table") is not None else None
    for h in range(heads):
        qs = q[:, h * d:(h + 1) * d]
        ks = k[:, h * d:(h + 1) * d]
        vs = v[:, h * d:(h + 1) * d]
        scores = qs @ ks.T / math.sqrt(d)
        if rel is not None:
            scores = scores + p["bias_table"][rel, h]
        if mask is not None:
            scores = scores + mask
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights = weights / weights.sum(axis=1, keepdims=True)
        out[:, h * d:(h + 1) * d] = weights @ vs
    return out @ p["wo"] + p["bo"]


def ref_mlp(x: np.ndarray, p: dict) -> np.ndarray:
    return ref_gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def ref_depthwise_pointwise(x: np.ndarray, p: dict) -> np.ndarray:
    """3x3 depthwise conv with zero borders, then 1x1 pointwise, over (H, W, C)."""
    h, w, c = x.shape
    out = np.zeros((h, w, c))
    kernel = p["depthwise"]
    for y in range(h):
        for xx in range(w):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    sy, sx = y + dy, xx + dx
                    if 0 <= sy < h and 0 <= sx < w:
                        out[y, xx] += kernel[dy + 1, dx + 1] * x[sy, sx]
    out = out + p["dw_bias"]
    return out @ p["pw"] + p["pw_b"]


def _block_core(tokens: np.ndarray, block: dict, hw: tuple[int, int],
                mask: np.ndarray | None) -> np.ndarray:
    t = ref_layernorm(tokens, block["g1"], block["c1"])
    if block.get("conv") is not None:
        h, w = hw
        return ref_depthwise_pointwise(t.reshape(h, w, -1), block["conv"]).reshape(
            tokens.shape)
    return ref_attention(t, block["attn"], window=block.get("window"), mask=mask)


def ref_global_block(zbar: np.ndarray, block: dict) -> np.ndarray:
    wy, wx, c = zbar.shape
    tokens = zbar.reshape(wy * wx, c)
    tokens = tokens + _block_core(tokens, block, (wy, wx), None)
    tokens = tokens + ref_mlp(ref_layernorm(tokens, block["g2"], block["c2"]),
                              block["mlp"])
    return tokens.reshape(wy, wx, c)


def _pad_map(z: np.ndarray, m: int) -> np.ndarray:
    h, w, c = z.shape
    hp = -(-h // m) * m
    wp = -(-w // m) * m
    out = np.zeros((hp, wp, c))
    out[:h, :w] = z
    return out


def ref_shift_mask(hp: int, wp: int, m: int, shift: int) -> np.ndarray:
    # labels live in shifted-frame coordinates; no roll is applied
    labels = np.zeros((hp, wp), dtype=int)
    tag = 0
    for hs in (slice(0, hp - m), slice(hp - m, hp - shift), slice(hp - shift, hp)):
        for ws in (slice(0, wp - m), slice(wp - m, wp - shift), slice(wp - shift, wp)):
            labels[hs, ws] = tag
            tag += 1
    wy, wx = hp // m, wp // m
    masks = np.zeros((wy * wx, m * m, m * m))
    for win in range(wy * wx):
        y0 = (win // wx) * m
        x0 = (win % wx) * m
        lab = labels[y0:y0 + m, x0:x0 + m].reshape(-1)
        masks[win] = np.where(lab[:, None] != lab[None, :], -1e9, 0.0)
    return masks


def ref_local_block_dense(z: np.ndarray, block: dict, shifted: bool) -> np.ndarray:
    """Dense (keep-all) window block: attention sublayer then feed-forward."""
    h, w, c = z.shape
    m = block["window"]
    zp = _pad_map(z, m)
    hp, wp, _ = zp.shape
    shift = m // 2 if shifted and min(hp, wp) > m else 0

    shifted_map = np.roll(np.roll(zp, -shift, axis=0), -shift, axis=1)
    masks = ref_shift_mask(hp, wp, m, shift) if shift else None
    out = np.zeros_like(shifted_map)
    wy, wx = hp // m, wp // m
    for win in range(wy * wx):
        y0 = (win // wx) * m
        x0 = (win % wx) * m
        tokens = shifted_map[y0:y0 + m, x0:x0 + m].reshape(m * m, c)
        mask = masks[win] if masks is not None else None
        out[y0:y0 + m, x0:x0 + m] = (
            tokens + _block_core(tokens, block, (m, m), mask)).reshape(m, m, c)
    zp = np.roll(np.roll(out, shift, axis=0), shift, axis=1)
    z = zp[:h, :w]

    zp = _pad_map(z, m)
    out = np.zeros_like(zp)
    for win in range(wy * wx):
        y0 = (win // wx) * m
        x0 = (win % wx) * m
        tokens = zp[y0:y0 + m, x0:x0 + m].reshape(m * m, c)
        tokens = tokens + ref_mlp(
            ref_layernorm(tokens, block["g2"], block["c2"]), block["mlp"])
        out[y0:y0 + m, x0:x0 + m] = tokens.reshape(m, m, c)
    return out[:h, :w]


def ref_window_means(z: np.ndarray, m: int) -> np.ndarray:
    zp = _pad_map(z, m)
    hp, wp, c = zp.shape
    wy, wx = hp // m, wp // m
    out = np.zeros((wy, wx, c))
    for yy in range(wy):
        for xx in range(wx):
            out[yy, xx] = zp[yy * m:(yy + 1) * m, xx * m:(xx + 1) * m].mean(
                axis=(0, 1))
    return out


def ref_stage_dense(z: np.ndarray, stage: dict) -> np.ndarray:
    """Keep-all inference stage: pooled global blocks, fusion, dense locals."""
    h, w, c = z.shape
    m = stage["window"]
    zbar = ref_window_means(z, m)
    for block in stage["global_blocks"]:
        zbar = ref_global_block(zbar, block)
    z_global = np.repeat(np.repeat(zbar, m, axis=0), m, axis=1)[:h, :w]
    z = z + z_global
    for i, block in enumerate(stage["local_blocks"]):
        z = ref_local_block_dense(z, block, shifted=(i % 2 == 1))
    return z


def ref_patch_embed(image: np.ndarray, patch: int, w: np.ndarray,
                    b: np.ndarray) -> np.ndarray:
    h, wd, ci = image.shape
    hp = -(-h // patch) * patch
    wp = -(-wd // patch) * patch
    padded = np.zeros((hp, wp, ci))
    padded[:h, :wd] = image
    hy, wx = hp // patch, wp // patch
    out = np.zeros((hy, wx, w.shape[1]))
    for y in range(hy):
        for x in range(wx):
            flat = padded[y * patch:(y + 1) * patch,
                          x * patch:(x + 1) * patch].reshape(-1)
            out[y, x] = flat @ w + b
    return out


def ref_patch_merge(z: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, wd, c = z.shape
    if h % 2 or wd % 2:
        padded = np.zeros((h + h % 2, wd + wd % 2, c))
        padded[:h, :wd] = z
        z = padded
        h, wd = z.shape[:2]
    merged = np.concatenate([z[0::2, 0::2], z[1::2, 0::2],
                             z[0::2, 1::2], z[1::2, 1::2]], axis=-1)
    return merged @ w + b


def ref_backbone_dense(image: np.ndarray, net: dict) -> list[np.ndarray]:
    """Keep-all inference through embed, stages, and the merges between them."""
    z = ref_patch_embed(image, net["patch"], net["embed_w"], net["embed_b"])
    outputs = []
    for i, stage in enumerate(net["stages"]):
        if i > 0:
            merge = net["merges"][i - 1]
            z = ref_patch_merge(z, merge["w"], merge["b"])
        z = ref_stage_dense(z, stage)
        outputs.append(z)
    return outputs


# -- box-set oracles -----------------------------------------------------------


def ref_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def ref_greedy_nms(boxes: list, threshold: float) -> list:
    """Score-greedy suppression, O(n^2), class-aware; returns survivors."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = None
        for i in remaining:
            if best is None:
                best = i
            else:
                bi, bb = boxes[i], boxes[best]
                if (bi.score, -i) > (bb.score, -best):
                    best = i
        keep.append(best)
        survivors = []
        for i in remaining:
            if i == best:
                continue
            if boxes[i].cls == boxes[best].cls and ref_iou(
                    _rect(boxes[i]), _rect(boxes[best])) >= threshold:
                continue
            survivors.append(i)
        remaining = survivors
    return [boxes[i] for i in sorted(keep)]


def ref_area_merge(box_sets: list, tau: float, tau_local: float) -> list:
    """Suppress each set score-greedily, union, then keep by largest area."""
    pool = []
    for boxes in box_sets:
        pool.extend(ref_greedy_nms(list(boxes), tau_local))
    remaining = list(range(len(pool)))
    keep = []
    while remaining:
        best = None
        for i in remaining:
            if best is None:
                best = i
            else:
                bi, bb = pool[i], pool[best]
                ai = (bi.x2 - bi.x1) * (bi.y2 - bi.y1)
                ab = (bb.x2 - bb.x1) * (bb.y2 - bb.y1)
                if (ai, bi.score, -i) > (ab, bb.score, -best):
                    best = i
        keep.append(best)
        survivors = []
        for i in remaining:
            if i == best:
                continue
            if pool[i].cls == pool[best].cls and ref_iou(
                    _rect(pool[i]), _rect(pool[best])) >= tau:
                continue
            survivors.append(i)
        remaining = survivors
    return [pool[i] for i in sorted(keep)]


def _rect(b) -> tuple:
    return (b.x1, b.y1, b.x2, b.y2)


# -- adapters ------------------------------------------------------------------
# Data extraction only: these copy raw arrays out of production parameter
# containers so the straight-line code above never touches tensor machinery.


def block_arrays(block) -> dict:
    out = {
        "g1": block.norm1["gain"].data.copy(),
        "c1": block.norm1["bias"].data.copy(),
        "g2": block.norm2["gain"].data.copy(),
        "c2": block.norm2["bias"].data.copy(),
        "mlp": {k: v.data.copy() for k, v in block.mlp.items()},
        "window": block.window,
    }
    core = block.core
    if hasattr(core, "depthwise"):
        out["conv"] = {
            "depthwise": core.depthwise.data.copy(),
            "dw_bias": core.dw_bias.data.copy(),
            "pw": core.pointwise["w"].data.copy(),
            "pw_b": core.pointwise["b"].data.copy(),
        }
    else:
        attn = {k: v.data.copy() for k, v in core.qkv.items()}
        attn["wo"] = core.out["w"].data.copy()
        attn["bo"] = core.out["b"].data.copy()
        attn["heads"] = core.num_heads
        attn["bias_table"] = (None if core.bias_table is None
                              else core.bias_table.data.copy())
        out["attn"] = attn
    return out


def net_arrays(params, cfg) -> dict:
    return {
        "patch": cfg.patch_size,
        "embed_w": params.patch_embed["w"].data.copy(),
        "embed_b": params.patch_embed["b"].data.copy(),
        "merges": [{"w": m["w"].data.copy(), "b": m["b"].data.copy()}
                   for m in params.merges],
        "stages": [{
            "window": sc.window,
            "global_blocks": [block_arrays(b) for b in sp.global_blocks],
            "local_blocks": [block_arrays(b) for b in sp.local_blocks],
        } for sc, sp in zip(cfg.stages, params.stages)],
    }
