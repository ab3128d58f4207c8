"""Photometric losses with analytic gradients.

L_gs = 0.8 * L1 + 0.2 * (1 - SSIM), computed on [0,1] float images.
SSIM uses an 11x11 Gaussian window (sigma 1.5) applied per channel with
zero padding, so the convolution operator is self-adjoint and the
backward pass reuses the same filter.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_WIN_SIZE = 11
_WIN_SIGMA = 1.5


def _gaussian_window():
    r = _WIN_SIZE // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / _WIN_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window()


def _filt(img):
    """Per-channel windowed mean with zero padding, (H, W, C) in and out."""
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = convolve(img[:, :, c], _WINDOW, mode="constant", cval=0.0)
    return out


def l1_loss(x, y):
    """Mean absolute error and its gradient w.r.t. x."""
    diff = x - y
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def ssim_forward(x, y):
    """Mean SSIM over the full map plus intermediates for backward.

    x, y: (H, W, C) floats in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu_x = _filt(x)
    mu_y = _filt(y)
    xx = _filt(x * x) - mu_x * mu_x
    yy = _filt(y * y) - mu_y * mu_y
    xy = _filt(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * xy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = xx + yy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    aux = {"x": x, "y": y, "mu_x": mu_x, "mu_y": mu_y,
           "a1": a1, "a2": a2, "b1": b1, "b2": b2, "smap": smap}
    return float(smap.mean()), aux


def ssim_backward(aux, upstream=1.0):
    """d(mean SSIM)/dx scaled by `upstream`.

    Derivation: the map M = A1*A2/(B1*B2) depends on x through mu_x,
    conv(x^2) and conv(x*y); each path routes back through the same
    self-adjoint window filter.
    """
    x, y = aux["x"], aux["y"]
    mu_x, mu_y = aux["mu_x"], aux["mu_y"]
    a1, a2, b1, b2, smap = aux["a1"], aux["a2"], aux["b1"], aux["b2"], aux["smap"]
    u = upstream / smap.size
    bb = b1 * b2
    d_mu = 2.0 * mu_y * (a2 - a1) / bb + 2.0 * mu_x * smap * (1.0 / b2 - 1.0 / b1)
    d_sq = -smap / b2          # via conv(x^2)
    d_xy = 2.0 * a1 / bb       # via conv(x*y)
    grad = _filt(u * d_mu) + 2.0 * x * _filt(u * d_sq) + y * _filt(u * d_xy)
    return grad


def l_gs(render_rgb, target_rgb):
    """Photometric loss and gradient w.r.t. the render.

    Returns (value, grad, components) with components holding the raw
    L1 and SSIM terms for logging.
    """
    l1, dl1 = l1_loss(render_rgb, target_rgb)
    ssim_val, aux = ssim_forward(render_rgb, target_rgb)
    value = 0.8 * l1 + 0.2 * (1.0 - ssim_val)
    grad = 0.8 * dl1 + ssim_backward(aux, upstream=-0.2)
    return value, grad, {"l1": l1, "ssim": ssim_val}
