"""Training losses and image quality metrics.

Charbonnier distance (smooth L1), its edge variant over Laplacian-filtered
images, the weighted total, and the PSNR / SSIM evaluation metrics.

The per-pixel Charbonnier is evaluated as ``eps + mean(sqrt(d^2 + eps^2) -
eps)``: identical in exact arithmetic to the plain mean, but anchored so
the zero-difference case returns eps to the last bit (the plain mean
drifts by an ulp under pairwise summation).  A ``reduction="global"``
mode evaluates the single-norm form ``sqrt(sum(d^2) + eps^2)`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .validation import DimensionError, ValidationError

CHARBONNIER_EPS = 1e-4
EDGE_WEIGHT = 0.05
PSNR_CAP = 99.0

LAPLACIAN_4 = np.array(
    [[0.0, 1.0, 0.0],
     [1.0, -4.0, 1.0],
     [0.0, 1.0, 0.0]]
)


@dataclass
class LossReport:
    """Scalar record of one loss evaluation; total == char + lam * edge."""

    char: float
    edge: float
    total: float
    lam: float


def _pair(pred, target, op):
    if not isinstance(pred, T.Tensor):
        pred = T.Tensor(pred)
    if isinstance(target, T.Tensor):
        target = target.data  # target never carries gradient
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != tuple(target.shape):
        raise DimensionError(f"{op}: shapes {pred.shape} and {target.shape} disagree")
    return pred, T.Tensor(target)


def charbonnier(pred, target, eps: float = CHARBONNIER_EPS, reduction: str = "mean") -> T.Tensor:
    """Smooth L1 distance; >= eps, equal iff pred == target."""
    pred, target = _pair(pred, target, "charbonnier")
    d2 = T.square(T.sub(pred, target))
    if reduction == "mean":
        excess = T.sub(T.sqrt(T.add(d2, eps * eps)), eps)
        return T.add(T.mean(excess), eps)
    if reduction == "global":
        return T.sqrt(T.add(T.tsum(d2), eps * eps))
    raise ValidationError(f"charbonnier: unknown reduction {reduction!r}")


def _laplacian(img: T.Tensor) -> T.Tensor:
    channels = img.shape[-1]
    kernel = np.zeros((3, 3, channels, channels), dtype=img.dtype)
    for c in range(channels):
        kernel[:, :, c, c] = LAPLACIAN_4
    return T.conv2d(img, T.Tensor(kernel))


def edge_loss(pred, target, eps: float = CHARBONNIER_EPS, reduction: str = "mean") -> T.Tensor:
    """Charbonnier between Laplacian-filtered images (zero 'same' padding)."""
    pred, target = _pair(pred, target, "edge_loss")
    if pred.data.ndim != 3:
        raise DimensionError(f"edge_loss: expected H x W x C images, got {pred.shape}")
    return charbonnier(_laplacian(pred), _laplacian(target).data, eps=eps, reduction=reduction)


def total_loss(pred, target, lam: float = EDGE_WEIGHT, eps: float = CHARBONNIER_EPS,
               reduction: str = "mean"):
    """Charbonnier + lam * edge; returns (scalar Tensor, LossReport)."""
    char_t = charbonnier(pred, target, eps=eps, reduction=reduction)
    edge_t = edge_loss(pred, target, eps=eps, reduction=reduction)
    total_t = T.add(char_t, T.scalar_mul(edge_t, lam))
    char, edge = char_t.item(), edge_t.item()
    return total_t, LossReport(char=char, edge=edge, total=char + lam * edge, lam=lam)


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} disagree")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM, dynamic range 1, averaged over channels and positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} disagree")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise DimensionError(f"ssim: expected H x W [x C] images, got shape {a.shape}")
    h, w, channels = a.shape
    if h < window or w < window:
        raise ValidationError(f"ssim: image {h}x{w} smaller than the {window}x{window} window")
    kern = _gaussian_window(window, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2

    def filt(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (window, window))
        return np.einsum("ijkl,kl->ij", win, kern, optimize=True)

    values = []
    for c in range(channels):
        x, y = a[:, :, c], b[:, :, c]
        mu_x, mu_y = filt(x), filt(y)
        sig_x = filt(x * x) - mu_x * mu_x
        sig_y = filt(y * y) - mu_y * mu_y
        sig_xy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
        values.append(num / den)
    return float(np.mean(values))
