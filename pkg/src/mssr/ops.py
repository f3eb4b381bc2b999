"""Fixed resampling and filtering operators.

All operators are plain tensor functions with no learnable state, so they
can be used inside generators, losses and metrics alike.
"""
import functools
import math

import torch
import torch.nn.functional as F

from .errors import SizingError


def cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


@functools.lru_cache(maxsize=None)
def _down_taps(scale):
    # LR pixel i is centred on HR coordinate i*scale + (scale-1)/2; the kernel
    # is stretched by `scale` (antialiased) and covers 4*scale HR pixels.
    start = math.ceil((scale - 1) / 2 - 2 * scale)
    centre = (scale - 1) / 2
    w = [cubic((start + k - centre) / scale) for k in range(4 * scale)]
    total = sum(w)
    return tuple(v / total for v in w), -start, 3 * scale + start


def check_divisible(x, scale, what="image"):
    h, w = x.shape[-2:]
    if h % scale or w % scale:
        raise SizingError(f"{what} of size {h}x{w} is not divisible by scale {scale}")


def bicubic_down(x, scale):
    """Antialiased bicubic downsampling by an integer factor.

    Borders are reflected; inputs too small to reflect the kernel footprint
    (side <= 2*scale) replicate edge pixels instead.
    """
    check_divisible(x, scale)
    if scale == 1:
        return x
    taps, pad_lo, pad_hi = _down_taps(scale)
    c = x.shape[1]
    k = torch.tensor(taps, dtype=x.dtype, device=x.device)
    mode = "reflect" if max(pad_lo, pad_hi) < min(x.shape[-2:]) else "replicate"
    xp = F.pad(x, (pad_lo, pad_hi, pad_lo, pad_hi), mode=mode)
    out = F.conv2d(xp, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), stride=(1, scale), groups=c)
    out = F.conv2d(out, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), stride=(scale, 1), groups=c)
    return out


def bicubic_up(x, scale):
    if scale == 1:
        return x
    return F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False)


@functools.lru_cache(maxsize=None)
def _gauss_taps(std, radius):
    w = [math.exp(-(i * i) / (2 * std * std)) for i in range(-radius, radius + 1)]
    total = sum(w)
    return tuple(v / total for v in w)


def gaussian_blur(x, std, radius=None):
    """Separable Gaussian blur with reflect padding; output has input shape."""
    if std <= 0:
        return x
    radius = radius or max(1, int(math.ceil(3 * std)))
    # reflect padding needs radius < size
    radius = min(radius, min(x.shape[-2:]) - 1)
    c = x.shape[1]
    k = torch.tensor(_gauss_taps(float(std), radius), dtype=x.dtype, device=x.device)
    xp = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    out = F.conv2d(xp, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(out, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def gaussian_window(size=11, std=1.5, dtype=torch.float64):
    g = torch.tensor(_gauss_taps(float(std), size // 2), dtype=dtype)
    return torch.outer(g, g)
