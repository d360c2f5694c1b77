"""Reconstruction, inpainting and VQ-side losses plus PSNR/SSIM metrics.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with
C1=(0.01)^2, C2=(0.03)^2 on [0,1]-ranged images; windows are 'valid'
(no padding). All loss functions are differentiable through the
autograd engine; ``psnr`` is a plain metric on numpy arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError

log = logging.getLogger(__name__)

_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    alpha: float = 0.7   # L1 vs SSIM mix in the reconstruction loss
    beta: float = 0.25   # VQ commitment weight


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    """1-D normalized Gaussian; the 2-D window is its separable outer product."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return (g / g.sum()).astype(np.float32)


def _window_for(h: int, w: int, size: int = 11, sigma: float = 1.5):
    m = min(h, w)
    if m < size:
        size = m if m % 2 == 1 else m - 1
        size = max(size, 1)
        sigma = sigma * size / 11.0
        log.warning("ssim: image %dx%d smaller than window, shrinking to %d", h, w, size)
    return _gauss_kernel(size, sigma), size


def _corr1d_valid(a: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(a, len(g), axis=axis)
    return win @ g


def _blur_np(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _corr1d_valid(_corr1d_valid(a, g, 2), g, 1)


def _blur_grad(grad: np.ndarray, g: np.ndarray) -> np.ndarray:
    # valid correlation's adjoint: zero-pad, then correlate with the flipped kernel
    r = len(g) - 1
    c, ho, wo = grad.shape
    gp = np.zeros((c, ho + 2 * r, wo + 2 * r), dtype=np.float32)
    gp[:, r:r + ho, r:r + wo] = grad
    return _blur_np(gp, g[::-1].copy())


def _blur(x: Tensor, g: np.ndarray) -> Tensor:
    """Depthwise valid-mode Gaussian window average (separable, fixed kernel)."""
    out = Tensor._op(np.ascontiguousarray(_blur_np(x.data, g)), (x,))
    if out.requires_grad:
        def _bw():
            x._accum(_blur_grad(out.grad, g))
        out._backward = _bw
    return out


def ssim(x: Tensor | np.ndarray, y: Tensor | np.ndarray) -> Tensor:
    """Mean local SSIM over all channels and window positions, in [-1, 1]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.data.shape != y.data.shape:
        raise DimensionError(f"ssim shapes {x.data.shape} vs {y.data.shape}")
    _, h, w = x.data.shape
    k, _ = _window_for(h, w)
    mx = _blur(x, k)
    my = _blur(y, k)
    mxx = _blur(x * x, k)
    myy = _blur(y * y, k)
    mxy = _blur(x * y, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (mx * my * 2.0 + _C1) * (cov * 2.0 + _C2)
    den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
    return (num / den).mean()


def reconstruction_loss(xhat: Tensor, x: Tensor | np.ndarray, alpha: float = 0.7) -> Tensor:
    """alpha * mean|xhat-x| + (1-alpha) * (1 - SSIM(xhat, x))."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if xhat.data.shape != x.data.shape:
        raise DimensionError(f"reconstruction_loss shapes {xhat.data.shape} vs {x.data.shape}")
    l1 = ag.tabs(xhat - x).mean()
    if alpha >= 1.0:
        return l1 * alpha
    return l1 * alpha + (1.0 - ssim(xhat, x)) * (1.0 - alpha)


def inpainting_loss(xhat: Tensor, x: Tensor | np.ndarray, mask: np.ndarray,
                    alpha: float = 0.7) -> Tensor:
    """Reconstruction loss restricted to undistorted pixels.

    ``mask`` is [H,W] with 1 marking distorted pixels. The L1 term is
    weighted by (1-mask) but normalized by the full pixel count; the SSIM
    statistics exclude distorted pixels entirely (mask-renormalized
    windows), so the gradient at masked pixels is exactly zero. Windows
    with no valid pixels contribute nothing.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != xhat.data.shape[1:]:
        raise DimensionError(f"mask shape {mask.shape} vs frame {xhat.data.shape}")
    if not mask.any():
        return reconstruction_loss(xhat, x, alpha)
    valid = Tensor((1.0 - mask)[None, :, :])
    c, h, w = xhat.data.shape
    l1 = (ag.tabs(xhat - x) * valid).sum() * (1.0 / (c * h * w))
    if alpha >= 1.0:
        return l1 * alpha

    k, _ = _window_for(h, w)
    # mask-derived weights are constants: no gradient flows through them
    wmass = _blur_np(valid.data[:1], k)  # [1,Ho,Wo] valid mass per window
    keep = wmass > 1e-6
    if not keep.any():
        return l1 * alpha  # fully masked: no supervised SSIM windows
    inv = Tensor(np.where(keep, 1.0 / np.maximum(wmass, 1e-12), 0.0).astype(np.float32))
    weights = np.where(keep, wmass, 0.0).astype(np.float32)

    xm = xhat * valid
    ym = x * valid
    mx = _blur(xm, k) * inv
    my = _blur(ym, k) * inv
    mxx = _blur(xm * xhat, k) * inv
    myy = _blur(ym * x, k) * inv
    mxy = _blur(xm * x, k) * inv
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (mx * my * 2.0 + _C1) * (cov * 2.0 + _C2)
    den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
    wsum = float(weights.sum()) * c
    masked_ssim = ((num / den) * Tensor(weights)).sum() * (1.0 / wsum)
    return l1 * alpha + (1.0 - masked_ssim) * (1.0 - alpha)


def psnr(xhat: np.ndarray, x: np.ndarray, cap: float = 100.0) -> float:
    """10*log10(1/MSE) for [0,1]-ranged images, capped at 100 dB."""
    xhat = xhat.data if isinstance(xhat, Tensor) else np.asarray(xhat)
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    mse = float(np.mean((xhat.astype(np.float64) - x.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)
