"""flowedit: text-guided image editing via optimized vector flow fields.

An image edit is a pair of fields applied by a differentiable warp: per-pixel
spatial offsets (dx, dy) and a per-pixel color-value offset. Fields are either
explicit rasterized tensors or small coordinate MLPs, optimized under a
pluggable guidance scorer, or predicted in one shot by a trained network.
"""

from ._kernels import BACKEND as kernel_backend
from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "kernel_backend"]

__version__ = "0.1.0"
