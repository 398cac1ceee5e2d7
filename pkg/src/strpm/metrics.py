"""Frame quality metrics."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

PSNR_CAP = 100.0


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr(pred, truth) -> float:
    """10 log10(1 / MSE) for frames in [0, 1]; 100 dB when MSE < 1e-10."""
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ValueError(f"psnr: shape mismatch {p.shape} vs {t.shape}")
    err = float(np.mean((p - t) ** 2))
    if err < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / err)


def psnr_per_sample(pred, truth) -> np.ndarray:
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ValueError(f"psnr: shape mismatch {p.shape} vs {t.shape}")
    err = np.mean((p - t) ** 2, axis=tuple(range(1, p.ndim)))
    out = np.full(err.shape, PSNR_CAP)
    ok = err >= 1e-10
    out[ok] = 10.0 * np.log10(1.0 / err[ok])
    return out


def perceptual_proxy(D, pred, truth) -> float:
    """MSE between discriminator tap features of two frames (lower is closer)."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = truth if isinstance(truth, Tensor) else Tensor(truth)
    if p.shape != t.shape:
        raise ValueError(f"perceptual_proxy: shape mismatch {p.shape} vs {t.shape}")
    return T.mse(D(p)[1], D(t)[1]).item()


def perceptual_proxy_per_sample(D, pred, truth) -> np.ndarray:
    fp = D(pred if isinstance(pred, Tensor) else Tensor(pred))[1].data
    ft = D(truth if isinstance(truth, Tensor) else Tensor(truth))[1].data
    return np.mean((fp - ft) ** 2, axis=(1, 2, 3))
