"""Backend selection for the convolution kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``CHL_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("CHL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, impl=None) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1. Shapes: (N,C,H,W), (O,C,3,3), (O,)."""
    return (impl or _impl).conv3x3_forward(x, w, b)


def conv3x3_input_grad(dy: np.ndarray, w: np.ndarray, impl=None) -> np.ndarray:
    # Same-padded 3x3 conv transposes to a conv with flipped, channel-swapped weights.
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return (impl or _impl).conv3x3_forward(dy, wt, np.zeros(wt.shape[0]))


def conv3x3_weight_grad(x: np.ndarray, dy: np.ndarray, impl=None) -> np.ndarray:
    return (impl or _impl).conv3x3_weight_grad(x, dy)


def squareplus_with_grad(x: np.ndarray, impl=None) -> tuple[np.ndarray, np.ndarray]:
    """Smooth ReLU ``0.5 * (x + sqrt(x^2 + 4))`` and its derivative."""
    return (impl or _impl).squareplus_with_grad(x)


def avg_pool2(x: np.ndarray, impl=None) -> np.ndarray:
    return (impl or _impl).avg_pool2(x)


def avg_pool2_backward_mul(dy: np.ndarray, scale: np.ndarray, impl=None) -> np.ndarray:
    return (impl or _impl).avg_pool2_backward_mul(dy, scale)


def sparse_nmf(v, w, h, sparsity, max_iterations, tolerance, impl=None):
    """Run sparse NMF iterations from an initial (w, h). Returns (w, h, history)."""
    return (impl or _impl).sparse_nmf(v, w, h, float(sparsity), int(max_iterations), float(tolerance))
