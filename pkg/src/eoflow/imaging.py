"""Image distortion metrics and 8-bit PGM/PPM export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


def mse(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at 99 dB for identical inputs."""
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * float(np.log10(peak ** 2 / err)))


def gaussian_window(size=7, sigma=1.5) -> np.ndarray:
    """Normalised 1-d Gaussian taps; the 2-d window is their outer product."""
    r = (size - 1) / 2
    t = np.exp(-0.5 * (np.arange(size) - r) ** 2 / sigma ** 2)
    return t / t.sum()


def _filter_valid(img, taps):
    out = img
    for axis in (0, 1):
        out = correlate1d(out, taps, axis=axis, mode="reflect")
    pad = (len(taps) - 1) // 2
    return out[pad:out.shape[0] - pad, pad:out.shape[1] - pad]


def ssim(a, b, data_range=1.0, win_size=7, sigma=1.5) -> float:
    """Mean structural similarity over all fully contained Gaussian windows.

    Inputs are ``(H, W)`` or ``(H, W, C)``; channels are averaged.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, win_size, sigma)
                              for c in range(a.shape[2])]))
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ValueError(f"SSIM needs images of at least {win_size}x{win_size}, got {a.shape}")
    taps = gaussian_window(win_size, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a ** 2
    var_b = _filter_valid(b * b, taps) - mu_b ** 2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def normalize(img, per_image=True) -> np.ndarray:
    """Min/max rescale to ``[0, 1]`` (``per_image``) or clip to ``[0, 1]``."""
    img = np.asarray(img, np.float64)
    if not per_image:
        return np.clip(img, 0.0, 1.0)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def as_image(row, shape) -> np.ndarray:
    return np.asarray(row, np.float64).reshape(shape)


def write_pnm(path, img, per_image=True) -> None:
    """Write a grayscale ``(H, W)`` image as binary PGM or ``(H, W, 3)`` as PPM."""
    img = normalize(img, per_image)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    pixels = np.round(img * 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_pnm` back into ``[0, 1]``."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    # exactly one whitespace byte separates the header from the pixels
    data = raw[pos + 1:]
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = {b"P5": 1, b"P6": 3}[magic]
    arr = np.frombuffer(data, np.uint8).astype(np.float64) / maxval
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))


def tile(images, ncols) -> np.ndarray:
    """Arrange equally shaped images in a grid with a one-pixel border."""
    images = [np.asarray(i, np.float64) for i in images]
    h, w = images[0].shape[:2]
    nrows = -(-len(images) // ncols)
    shape = (nrows * (h + 1) + 1, ncols * (w + 1) + 1) + images[0].shape[2:]
    grid = np.ones(shape)
    for k, img in enumerate(images):
        r, c = divmod(k, ncols)
        grid[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = img
    return grid
