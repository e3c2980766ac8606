"""Sparse window attention at large-image scale: backbone, box merging,
tiled inference, and analytic op accounting, all in float64 numpy."""

from sparsewin.tensor import (
    FlopCounter,
    LayerParams,
    Tensor,
    finite_diff_check,
    gradients,
)

__all__ = [
    "FlopCounter",
    "LayerParams",
    "Tensor",
    "finite_diff_check",
    "gradients",
]

__version__ = "0.1.0"
