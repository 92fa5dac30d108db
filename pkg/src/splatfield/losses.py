"""Photometric and feature losses with analytic gradients.

All functions return (value, grad_wrt_first_arg) so the training loop never
needs autodiff. Gradients are exact for the implemented forward definitions
and are checked against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ssim_window(dtype) -> np.ndarray:
    r = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    w = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return (w / w.sum()).astype(dtype)


def _blur(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable symmetric blur with zero padding.

    Zero padding makes the operator self-adjoint, which the backward pass
    relies on.
    """
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    grad = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), grad.astype(pred.dtype)


def ssim(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM over pixels and channels, with d(mean SSIM)/d(pred).

    Gaussian 11x11 window, sigma 1.5, constants C1=0.01^2, C2=0.03^2 for a
    [0, 1] data range.
    """
    x = np.asarray(pred)
    y = np.asarray(target)
    w = _ssim_window(x.dtype)

    mu_x = _blur(x, w)
    mu_y = _blur(y, w)
    gxx = _blur(x * x, w)
    gyy = _blur(y * y, w)
    gxy = _blur(x * y, w)
    sx = gxx - mu_x * mu_x
    sy = gyy - mu_y * mu_y
    sxy = gxy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sx + sy + SSIM_C2
    denom = b1 * b2
    s = (a1 * a2) / denom
    value = float(np.mean(s))

    u = 1.0 / s.size
    d_a1 = u * a2 / denom
    d_a2 = u * a1 / denom
    d_b1 = -u * s / b1
    d_b2 = -u * s / b2

    w_mu = 2.0 * mu_y * (d_a1 - d_a2) + 2.0 * mu_x * (d_b1 - d_b2)
    w_gxx = d_b2
    w_gxy = 2.0 * d_a2

    grad = _blur(w_mu, w) + 2.0 * x * _blur(w_gxx, w) + y * _blur(w_gxy, w)
    return value, grad.astype(x.dtype)


def rgb_loss(
    pred: np.ndarray, target: np.ndarray, lambda_ssim: float
) -> tuple[float, np.ndarray, dict]:
    """(1 - lambda) * L1 + lambda * (1 - SSIM), with gradient wrt pred."""
    l1, g1 = l1_loss(pred, target)
    sv, gs = ssim(pred, target)
    loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - sv)
    grad = (1.0 - lambda_ssim) * g1 - lambda_ssim * gs
    return loss, grad.astype(pred.dtype), {"l1": l1, "ssim": sv}


def cosine_feature_loss(
    pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None, eps: float = 1e-8
) -> tuple[float, np.ndarray]:
    """Mean (1 - cosine similarity) over rows selected by mask.

    pred rows may have any norm; target rows are expected unit norm. Rows
    with pred norm below eps use a fixed denominator so the loss stays finite.
    Returns the gradient with pred's full shape (zeros off-mask).
    """
    p = pred.reshape(-1, pred.shape[-1])
    t = target.reshape(-1, target.shape[-1])
    if mask is None:
        idx = np.arange(p.shape[0])
    else:
        idx = np.flatnonzero(mask.reshape(-1))
    grad = np.zeros_like(p)
    if idx.size == 0:
        return 0.0, grad.reshape(pred.shape)

    f = p[idx]
    tt = t[idx]
    dots = np.einsum("nd,nd->n", f, tt)
    norms = np.linalg.norm(f, axis=1)
    safe = np.maximum(norms, eps)
    cos = dots / safe
    loss = float(np.mean(1.0 - cos))

    inv = 1.0 / safe
    g = -(tt * inv[:, None])
    live = norms > eps
    g[live] += (cos[live] * inv[live] ** 2)[:, None] * f[live]
    grad[idx] = g / idx.size
    return loss, grad.reshape(pred.shape).astype(pred.dtype)
