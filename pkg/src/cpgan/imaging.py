"""Image and copy-mask primitives: compositing, border-zeroing, Gaussian blur.

Single images are numpy arrays of shape ``(H, W, 3)`` and masks ``(H, W)``,
all real valued in [0, 1]. Training code works on torch batches in NCHW
layout (masks ``(N, 1, H, W)``); the ``*_batch`` functions are the
differentiable counterparts used there.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ContractError

MIN_SIZE = 8


def check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if min(image.shape[:2]) < MIN_SIZE:
        raise ContractError(f"images must be at least {MIN_SIZE}x{MIN_SIZE}, got {image.shape[:2]}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ContractError("image values must lie in [0, 1]")


def check_mask(mask: np.ndarray, shape: tuple[int, int] | None = None) -> None:
    if mask.ndim != 2:
        raise ContractError(f"expected an (H, W) mask, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ContractError(f"mask shape {mask.shape} does not match image shape {tuple(shape)}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise ContractError("mask values must lie in [0, 1]")


def composite(source: np.ndarray, destination: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend ``source`` over ``destination``: ``m * src + (1 - m) * dst``.

    The same mask weight is used for all three colour channels.
    """
    if source.shape != destination.shape:
        raise ContractError(f"source {source.shape} and destination {destination.shape} differ")
    check_mask(mask, source.shape[:2])
    m = mask[..., None]
    return m * source + (1.0 - m) * destination


def composite_batch(source: torch.Tensor, destination: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """NCHW version of :func:`composite`; ``mask`` is ``(N, 1, H, W)``."""
    if source.shape != destination.shape:
        raise ContractError(f"source {tuple(source.shape)} and destination {tuple(destination.shape)} differ")
    if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[2:] != source.shape[2:] or mask.shape[0] != source.shape[0]:
        raise ContractError(f"mask shape {tuple(mask.shape)} incompatible with images {tuple(source.shape)}")
    return mask * source + (1.0 - mask) * destination


def _check_border(height: int, width: int, border_width: int) -> None:
    if border_width < 1 or 2 * border_width >= min(height, width):
        raise ContractError(f"border width {border_width} invalid for a {height}x{width} mask")


def border_zero(mask: np.ndarray, border_width: int = 1) -> np.ndarray:
    """Return a copy of ``mask`` with a ``border_width``-pixel frame set to exactly 0."""
    check_mask(mask)
    h, w = mask.shape
    _check_border(h, w, border_width)
    out = np.zeros_like(mask)
    b = border_width
    out[b:h - b, b:w - b] = mask[b:h - b, b:w - b]
    return out


def border_zero_batch(mask: torch.Tensor, border_width: int = 1) -> torch.Tensor:
    h, w = mask.shape[-2:]
    _check_border(h, w, border_width)
    b = border_width
    # pad keeps gradients flowing to the interior only
    return F.pad(mask[..., b:h - b, b:w - b], (b, b, b, b))


def gaussian_kernel_1d(sigma: float, kernel_size: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps centred on the middle element."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ContractError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    taps = np.array([math.exp(-(k * k) / (2.0 * sigma * sigma)) for k in range(-r, r + 1)])
    return taps / taps.sum()


def gaussian_blur(image: np.ndarray, sigma: float = 1.0, kernel_size: int = 3) -> np.ndarray:
    """Separable Gaussian blur of an (H, W, C) image with replicate padding."""
    kernel = gaussian_kernel_1d(sigma, kernel_size)
    r = kernel_size // 2
    out = np.asarray(image, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for k, wk in enumerate(kernel):
            acc += wk * np.take(padded, np.arange(k, k + n), axis=axis)
        out = acc
    return np.clip(out, 0.0, 1.0)


def gaussian_blur_batch(images: torch.Tensor, sigma: float = 1.0, kernel_size: int = 3) -> torch.Tensor:
    """Depthwise separable blur of an NCHW batch, replicate padding."""
    kernel = torch.as_tensor(gaussian_kernel_1d(sigma, kernel_size), dtype=images.dtype, device=images.device)
    c = images.shape[1]
    r = kernel_size // 2
    kh = kernel.view(1, 1, 1, -1).expand(c, 1, 1, kernel_size)
    kv = kernel.view(1, 1, -1, 1).expand(c, 1, kernel_size, 1)
    x = F.pad(images, (r, r, r, r), mode="replicate")
    x = F.conv2d(x, kh, groups=c)
    return F.conv2d(x, kv, groups=c)


def to_nchw(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) numpy batch -> float32 NCHW tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def to_nhwc(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().permute(0, 2, 3, 1).numpy()


# PNG I/O quantizes to 8 bits.

def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(mask) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
