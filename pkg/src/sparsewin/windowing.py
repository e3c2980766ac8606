"""Window geometry over token maps: padding, partition, cyclic shift, and
weighted per-window pooling with its broadcast inverse.

A feature map is a rank-3 tensor (H, W, C).  Maps are padded with zeros on
the bottom/right to a multiple of the window side, windows are traversed in
row-major order, and every geometric move below is a pure copy, so
partition/reverse and shift/unshift round-trip bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from sparsewin.tensor import Tensor, mul, reshape, scatter_rows, take_rows, tensor_sum


@dataclass(frozen=True)
class WindowConfig:
    """Window side length and per-offset pooling weights (default uniform)."""

    window: int
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.alpha is not None:
            alpha = np.asarray(self.alpha, dtype=np.float64)
            if alpha.shape != (self.window, self.window):
                raise ValueError(
                    f"alpha shaped {alpha.shape} does not match window {self.window}")
            if alpha.sum() <= 0:
                raise ValueError("alpha weights must sum to a positive value")
            object.__setattr__(self, "alpha", alpha)

    def alpha_flat(self) -> np.ndarray:
        m = self.window
        if self.alpha is None:
            return np.ones(m * m)
        return self.alpha.reshape(m * m)


@dataclass(frozen=True)
class WindowGrid:
    """Padded extent and window layout for one map size."""

    window: int
    h: int
    w: int
    h_pad: int
    w_pad: int
    windows_y: int
    windows_x: int

    @property
    def pad_b(self) -> int:
        return self.h_pad - self.h

    @property
    def pad_r(self) -> int:
        return self.w_pad - self.w

    @property
    def n_windows(self) -> int:
        return self.windows_y * self.windows_x


def make_grid(h: int, w: int, window: int) -> WindowGrid:
    if h < 1 or w < 1:
        raise ValueError(f"map extent must be positive, got {h}x{w}")
    wy = -(-h // window)
    wx = -(-w // window)
    return WindowGrid(window, h, w, wy * window, wx * window, wy, wx)


@lru_cache(maxsize=None)
def _partition_index(window: int, h_pad: int, w_pad: int) -> np.ndarray:
    """Row-major token order -> (window-major, row-major within window)."""
    wy, wx = h_pad // window, w_pad // window
    ids = np.arange(h_pad * w_pad).reshape(wy, window, wx, window)
    return np.ascontiguousarray(ids.transpose(0, 2, 1, 3)).reshape(-1)


@lru_cache(maxsize=None)
def _reverse_index(window: int, h_pad: int, w_pad: int) -> np.ndarray:
    return np.argsort(_partition_index(window, h_pad, w_pad))


@lru_cache(maxsize=None)
def _shift_index(h: int, w: int, shift: int) -> np.ndarray:
    ids = np.arange(h * w).reshape(h, w)
    return np.roll(np.roll(ids, -shift, axis=0), -shift, axis=1).reshape(-1)


def pad_to_windows(z: Tensor, cfg: WindowConfig) -> tuple[Tensor, WindowGrid]:
    """Append zero rows/columns so both extents are multiples of the window."""
    h, w, c = z.shape
    grid = make_grid(h, w, cfg.window)
    if grid.pad_b == 0 and grid.pad_r == 0:
        return z, grid
    base = Tensor(np.zeros((grid.h_pad * grid.w_pad, c)))
    dest = (np.arange(h)[:, None] * grid.w_pad + np.arange(w)[None, :]).reshape(-1)
    padded = scatter_rows(base, dest, reshape(z, (h * w, c)))
    return reshape(padded, (grid.h_pad, grid.w_pad, c)), grid


def crop(z: Tensor, h: int, w: int) -> Tensor:
    """Drop padded rows/columns, returning the top-left (h, w) region."""
    hp, wp, c = z.shape
    if (hp, wp) == (h, w):
        return z
    keep = (np.arange(h)[:, None] * wp + np.arange(w)[None, :]).reshape(-1)
    return reshape(take_rows(reshape(z, (hp * wp, c)), keep), (h, w, c))


def window_partition(z: Tensor, grid: WindowGrid) -> Tensor:
    """Split a padded map into (n_windows, M, M, C), windows in row-major order."""
    hp, wp, c = z.shape
    if (hp, wp) != (grid.h_pad, grid.w_pad):
        raise ValueError(
            f"window_partition needs a padded {grid.h_pad}x{grid.w_pad} map, got {hp}x{wp}")
    m = grid.window
    rows = take_rows(reshape(z, (hp * wp, c)), _partition_index(m, hp, wp))
    return reshape(rows, (grid.n_windows, m, m, c))


def window_reverse(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    n, m, m2, c = windows.shape
    if n != grid.n_windows or m != grid.window or m2 != grid.window:
        raise ValueError(
            f"windows shaped {windows.shape} do not match grid "
            f"({grid.n_windows} windows of {grid.window})")
    rows = take_rows(reshape(windows, (n * m * m, c)),
                     _reverse_index(m, grid.h_pad, grid.w_pad))
    return reshape(rows, (grid.h_pad, grid.w_pad, c))


def cyclic_shift(z: Tensor, shift: int) -> Tensor:
    """Roll the map by (-shift, -shift) on the torus."""
    if shift == 0:
        return z
    h, w, c = z.shape
    return reshape(take_rows(reshape(z, (h * w, c)), _shift_index(h, w, shift)),
                   (h, w, c))


def cyclic_unshift(z: Tensor, shift: int) -> Tensor:
    """Exact inverse of :func:`cyclic_shift`."""
    if shift == 0:
        return z
    h, w, c = z.shape
    ids = np.arange(h * w).reshape(h, w)
    perm = np.roll(np.roll(ids, shift, axis=0), shift, axis=1).reshape(-1)
    return reshape(take_rows(reshape(z, (h * w, c)), perm), (h, w, c))


def aggregate(z: Tensor, cfg: WindowConfig, grid: WindowGrid) -> Tensor:
    """Weighted mean of each window: (H_pad, W_pad, C) -> (wy, wx, C)."""
    alpha = cfg.alpha_flat()
    total = alpha.sum()
    if total <= 0:
        raise ValueError("alpha weights must sum to a positive value")
    m = grid.window
    windows = reshape(window_partition(z, grid), (grid.n_windows, m * m, -1))
    weighted = mul(windows, Tensor(alpha.reshape(1, m * m, 1)))
    pooled = mul(tensor_sum(weighted, axis=1), 1.0 / total)
    return reshape(pooled, (grid.windows_y, grid.windows_x, -1))


def inverse_aggregate(zbar: Tensor, cfg: WindowConfig, grid: WindowGrid) -> Tensor:
    """Broadcast each window value back to tokens, scaled by the offset weight."""
    wy, wx, c = zbar.shape
    if (wy, wx) != (grid.windows_y, grid.windows_x):
        raise ValueError(
            f"aggregated map shaped {zbar.shape} does not match grid "
            f"({grid.windows_y}x{grid.windows_x})")
    m = grid.window
    rows = reshape(zbar, (grid.n_windows, 1, c))
    tokens = mul(rows, Tensor(cfg.alpha_flat().reshape(1, m * m, 1)))
    return window_reverse(reshape(tokens, (grid.n_windows, m, m, c)), grid)
