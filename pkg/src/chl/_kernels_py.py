"""Pure-numpy versions of the convolution kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if w.shape[1] != x.shape[1]:
        raise ValueError("weight shape does not match input channels")
    y = np.tensordot(_windows(x), w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv3x3_weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if dy.shape[0] != x.shape[0] or dy.shape[2:] != x.shape[2:]:
        raise ValueError("gradient shape does not match input")
    return np.tensordot(dy, _windows(x), axes=([0, 2, 3], [0, 2, 3]))


def squareplus_with_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(x * x + 4.0)
    return 0.5 * (x + r), 0.5 * (1.0 + x / r)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward_mul(dy: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25 * scale


def _recon_from_stats(vv, w, vht, hht):
    return 0.5 * (vv - 2.0 * np.sum(w * vht) + np.sum((w.T @ w) * hht))


def _objective(v, w, h, lam):
    r = v - w @ h
    return 0.5 * float(np.sum(r * r)) + lam * float(np.sum(h))


def sparse_nmf(v, w, h, lam, max_iterations, tolerance):
    v = np.asarray(v, dtype=np.float64)
    w = np.array(w, dtype=np.float64)
    h = np.array(h, dtype=np.float64)
    vv = float(np.sum(v * v))
    obj = _objective(v, w, h, lam)
    history = [obj]
    step = None
    for _ in range(max_iterations):
        hht = h @ h.T
        vht = v @ h.T
        grad = w @ hht - vht
        if step is None:
            step = 1.0 / max(np.linalg.norm(hht, 2), 1e-12)
        recon = _recon_from_stats(vv, w, vht, hht)
        new_w = w
        t = step * 2.0
        for _ in range(30):
            cand = np.maximum(w - t * grad, 0.0)
            norms = np.sqrt(np.sum(cand * cand, axis=0))
            if np.all(norms > 1e-12):
                cand = cand / norms
                if _recon_from_stats(vv, cand, vht, hht) <= recon:
                    new_w = cand
                    step = t
                    break
            t *= 0.5
        numer = new_w.T @ v
        denom = (new_w.T @ new_w) @ h + lam
        new_h = np.divide(h * numer, denom, out=np.zeros_like(h), where=denom > 0)
        new_obj = _objective(v, new_w, new_h, lam)
        if new_obj > obj:
            break
        wh = w @ h
        change = np.linalg.norm(new_w @ new_h - wh) / max(np.linalg.norm(wh), 1e-300)
        w, h, obj = new_w, new_h, new_obj
        history.append(obj)
        if change < tolerance:
            break
    return w, h, history
