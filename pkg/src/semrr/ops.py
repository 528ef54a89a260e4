"""Differentiable image operations shared by the loss stack and the metrics.

Everything here is plain tensor math (no learned parameters): Gaussian
windows, the windowed structural-similarity index, luminance conversion,
Gaussian-smoothed Sobel gradient magnitude ("soft" edges), and per-image
Frobenius distances. All functions accept (C, H, W) or (N, C, H, W) tensors
and are safe for autograd, including the sqrt subgradients at zero.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

#: ITU-R BT.601 luma weights for RGB -> gray
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def gaussian_kernel_1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian taps; radius defaults to ceil(3 * sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized size x size Gaussian window (outer product of 1-D taps)."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {size}")
    g = gaussian_kernel_1d(sigma, radius=size // 2)
    w = np.outer(g, g)
    return w / w.sum()


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (N, C, H, W) tensor, got shape {tuple(x.shape)}")


def safe_sqrt(x: torch.Tensor, floor: float = 1e-24) -> torch.Tensor:
    # exact 0 (with a zero subgradient instead of autograd NaNs) at and below
    # the floor, so rounding noise in cancelled sums does not read as signal
    return torch.sqrt(torch.clamp(x, min=floor)) * (x > floor)


def luminance(image: torch.Tensor) -> torch.Tensor:
    """Collapse an RGB tensor to single-channel luma (N, 1, H, W)."""
    x, squeeze = _as_batched(image)
    if x.shape[1] == 1:
        y = x
    elif x.shape[1] == 3:
        w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        y = (x * w).sum(dim=1, keepdim=True)
    else:
        raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")
    return y.squeeze(0) if squeeze else y


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding (shape preserving)."""
    x, squeeze = _as_batched(image)
    taps = gaussian_kernel_1d(sigma)
    r = len(taps) // 2
    k = torch.as_tensor(taps, dtype=x.dtype, device=x.device)
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    flat = F.pad(flat, (r, r, 0, 0), mode="reflect")
    flat = F.conv2d(flat, k.view(1, 1, 1, -1))
    flat = F.pad(flat, (0, 0, r, r), mode="reflect")
    flat = F.conv2d(flat, k.view(1, 1, -1, 1))
    out = flat.reshape(n, c, h, w)
    return out.squeeze(0) if squeeze else out


def sobel_gradients(gray: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal/vertical Sobel responses of a single-channel tensor."""
    x, squeeze = _as_batched(gray)
    if x.shape[1] != 1:
        raise ValueError("sobel_gradients expects a single-channel input")
    kx = torch.as_tensor(_SOBEL_X, dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    ky = torch.as_tensor(_SOBEL_Y, dtype=x.dtype, device=x.device).view(1, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    if squeeze:
        return gx.squeeze(0), gy.squeeze(0)
    return gx, gy


def soft_edge(image: torch.Tensor, sigma: float = 1.4) -> torch.Tensor:
    """Differentiable edge strength: Gaussian blur then Sobel magnitude.

    Output is (N, 1, H, W) (or (1, H, W) for unbatched input). Adding a
    constant offset to the image leaves the result unchanged, and constant
    images map to exact zeros.
    """
    gray = luminance(image)
    smoothed = gaussian_blur(gray, sigma)
    gx, gy = sobel_gradients(smoothed)
    return safe_sqrt(gx * gx + gy * gy)


def frobenius_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image Frobenius norm of (a - b), averaged over the batch."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    xa, _ = _as_batched(a)
    xb, _ = _as_batched(b)
    diff = xa - xb
    per_image = safe_sqrt((diff * diff).sum(dim=(1, 2, 3)))
    return per_image.mean()


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    window_sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
) -> torch.Tensor:
    """Mean structural similarity over valid Gaussian windows.

    Local statistics are computed per channel with a Gaussian window applied
    only where it fully fits (no padding); the local map is averaged over
    space, channels and batch. Symmetric in (a, b); returns a scalar tensor.
    """
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    xa, _ = _as_batched(a)
    xb, _ = _as_batched(b)
    n, c, h, w = xa.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window_size}")
    win = torch.as_tensor(gaussian_window(window_size, window_sigma), dtype=xa.dtype, device=xa.device)
    win = win.view(1, 1, window_size, window_size)

    fa = xa.reshape(n * c, 1, h, w)
    fb = xb.reshape(n * c, 1, h, w)
    mu_a = F.conv2d(fa, win)
    mu_b = F.conv2d(fb, win)
    var_a = F.conv2d(fa * fa, win) - mu_a * mu_a
    var_b = F.conv2d(fb * fb, win) - mu_b * mu_b
    cov = F.conv2d(fa * fb, win) - mu_a * mu_b

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()
