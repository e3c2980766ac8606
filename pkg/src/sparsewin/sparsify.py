"""Window scoring and sparse selection.

A per-window scorer ranks windows by how badly the window-mean reconstruction
represents their tokens (high score = high intra-window variance), a top-K
rule turns scores into a keep/drop mask, and two fusion ops merge global
features into the token map and scatter kept-window outputs back into the
full window tensor.  Training-time selection is relaxed with Gumbel noise so
gradients reach the scorer parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sparsewin.tensor import (
    LayerParams,
    Tensor,
    add,
    gelu,
    linear,
    mlp_forward,
    mul,
    reshape,
    scatter_rows,
    softmax,
    sub,
)
from sparsewin.windowing import (
    WindowConfig,
    WindowGrid,
    aggregate,
    crop,
    inverse_aggregate,
    pad_to_windows,
    window_partition,
    window_reverse,
)

RESIDUAL_TRANSFORMS = ("identity", "abs", "squared", "raw", "aggregated")


@dataclass
class ScorerParams:
    """Per-window scorer: a projection of the (M*M*C)-sized window feature to
    one logit, fed by a configurable residual transform.

    ``transform`` selects what the projection sees: the reconstruction
    residual as-is ("identity"), its absolute value ("abs") or square
    ("squared"), the raw window tokens ("raw"), or the reconstruction itself
    ("aggregated").
    """

    mlp: LayerParams
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in RESIDUAL_TRANSFORMS:
            raise ValueError(
                f"unknown residual transform {self.transform!r}; "
                f"expected one of {RESIDUAL_TRANSFORMS}")

    @property
    def uses_reconstruction(self) -> bool:
        return self.transform != "raw"


def scorer_params(rng: np.random.Generator, window: int, dim: int,
                  transform: str = "identity", hidden: int | None = None,
                  std: float = 0.02) -> ScorerParams:
    """Single linear projection by default; ``hidden`` adds one gelu layer."""
    d = window * window * dim
    if hidden is None:
        mlp = LayerParams("linear", {
            "w": Tensor(rng.standard_normal((d, 1)) * std, requires_grad=True),
            "b": Tensor(np.zeros(1), requires_grad=True),
        })
    else:
        mlp = LayerParams("linear", {
            "w1": Tensor(rng.standard_normal((d, hidden)) * std, requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.standard_normal((hidden, 1)) * std, requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        })
    return ScorerParams(mlp=mlp, transform=transform)


@dataclass(frozen=True)
class SparseSelection:
    """Keep/drop decision over the windows of one grid.

    ``kept_indices`` is strictly increasing; ``mask`` is its indicator.  The
    implied one-hot selection matrix S (rows = kept windows) satisfies
    S @ S.T = identity.
    """

    total: int
    kept_indices: np.ndarray
    mask: np.ndarray = field(repr=False)

    @property
    def kept_count(self) -> int:
        return int(len(self.kept_indices))

    def onehot(self) -> np.ndarray:
        s = np.zeros((self.kept_count, self.total))
        s[np.arange(self.kept_count), self.kept_indices] = 1.0
        return s

    @staticmethod
    def full(total: int) -> "SparseSelection":
        idx = np.arange(total, dtype=np.intp)
        return SparseSelection(total, idx, np.ones(total, dtype=bool))


def window_logits(z: Tensor, cfg: WindowConfig, grid: WindowGrid,
                  params: ScorerParams, reconstruction: Tensor | None = None
                  ) -> Tensor:
    """One raw score per window from the padded map ``z``.

    ``reconstruction`` is the window-mean broadcast of ``z``; it is computed
    here when not supplied (and skipped entirely by the "raw" transform).
    """
    m = grid.window
    if params.transform == "raw":
        base = z
    else:
        if reconstruction is None:
            reconstruction = inverse_aggregate(aggregate(z, cfg, grid), cfg, grid)
        if params.transform == "aggregated":
            base = reconstruction
        else:
            residual = sub(z, reconstruction)
            if params.transform == "abs":
                base = abs(residual)
            elif params.transform == "squared":
                base = mul(residual, residual)
            else:
                base = residual
    flat = reshape(window_partition(base, grid), (grid.n_windows, -1))
    if "w1" in params.mlp:
        logits = mlp_forward(flat, params.mlp, activation=gelu)
    else:
        logits = linear(flat, params.mlp["w"], params.mlp["b"])
    return reshape(logits, (grid.n_windows,))


def score_windows(z: Tensor, cfg: WindowConfig, grid: WindowGrid,
                  params: ScorerParams, reconstruction: Tensor | None = None
                  ) -> Tensor:
    """Softmax-normalized window scores; nonnegative, summing to one."""
    return softmax(window_logits(z, cfg, grid, params, reconstruction), axis=0)


def select_topk(scores, ratio: float) -> SparseSelection:
    """Keep the max(1, round(ratio * N)) highest-scoring windows.

    Ties at the cut keep the lower window index; rounding is half-up.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"keeping ratio must be in (0, 1], got {ratio}")
    values = np.asarray(scores.data if isinstance(scores, Tensor) else scores,
                        dtype=np.float64).reshape(-1)
    n = values.size
    k = max(1, int(math.floor(ratio * n + 0.5)))
    order = np.argsort(-values, kind="stable")
    kept = np.sort(order[:k]).astype(np.intp)
    mask = np.zeros(n, dtype=bool)
    mask[kept] = True
    return SparseSelection(n, kept, mask)


def schedule_ratios(k: float) -> list[float]:
    """Per-stage keeping ratios [k, k^2, k^3, k^4]."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"keeping ratio must be in (0, 1], got {k}")
    return [k, k ** 2, k ** 3, k ** 4]


def gumbel_relax(logits: Tensor, temperature: float, noise: np.ndarray) -> Tensor:
    """softmax((logits + g) / T) with g = -log(-log(u)) from uniform noise.

    Differentiable in ``logits``; the caller owns the noise stream.  Noise is
    clipped away from {0, 1} so the transform stays finite.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    u = np.clip(np.asarray(noise, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    if u.shape != logits.shape:
        raise ValueError(f"noise shaped {u.shape} does not match logits {logits.shape}")
    g = -np.log(-np.log(u))
    return softmax(mul(add(logits, Tensor(g)), 1.0 / temperature), axis=0)


def fuse_global(z: Tensor, z_global: Tensor, s: Tensor, training: bool,
                cfg: WindowConfig) -> Tensor:
    """Merge the broadcast global features into the token map.

    Inference adds them directly; training weights each window's global
    contribution by (1 - score) so gradients reach the scorer.
    """
    if z.shape != z_global.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {z_global.shape}")
    if not training:
        return add(z, z_global)
    h, w, c = z.shape
    gp, grid = pad_to_windows(z_global, cfg)
    if s.shape != (grid.n_windows,):
        raise ValueError(
            f"scores shaped {s.shape} do not cover {grid.n_windows} windows")
    m = grid.window
    weights = reshape(sub(1.0, s), (grid.n_windows, 1, 1))
    windows = reshape(window_partition(gp, grid), (grid.n_windows, m * m, c))
    weighted = window_reverse(reshape(mul(windows, weights),
                                      (grid.n_windows, m, m, c)), grid)
    return add(z, crop(weighted, h, w))


def fuse_local(windows: Tensor, kept_outputs: Tensor,
               sel: SparseSelection) -> Tensor:
    """Scatter kept-window outputs back; non-kept windows stay untouched."""
    if windows.shape[0] != sel.total:
        raise ValueError(
            f"window tensor has {windows.shape[0]} windows, selection covers "
            f"{sel.total}")
    if kept_outputs.shape[0] != sel.kept_count:
        raise ValueError(
            f"kept outputs cover {kept_outputs.shape[0]} windows, selection "
            f"keeps {sel.kept_count}")
    return scatter_rows(windows, sel.kept_indices, kept_outputs)


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-D array as an ASCII portable graymap, min-max scaled."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"portable graymap needs a 2-D array, got {values.shape}")
    lo, hi = values.min(), values.max()
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * maxval).astype(int)
    else:
        scaled = np.zeros(values.shape, dtype=int)
    h, w = values.shape
    lines = [f"P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
