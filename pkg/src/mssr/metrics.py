"""Image-quality metrics, degradation-fidelity statistics and robustness sweeps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import wasserstein_distance

from .data import OracleDegradation, oracle_degrade
from .errors import SizingError
from .generator import DegradationGenerator
from .ops import bicubic_down, gaussian_window
from .utils import derive_seed, torch_generator

INF = float("inf")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise SizingError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _crop(x, crop):
    return x[..., crop:-crop, crop:-crop] if crop else x


def psnr(a: torch.Tensor, b: torch.Tensor, peak=1.0, crop=0) -> torch.Tensor:
    """PSNR in dB per image, jointly over all channels; +inf where MSE is 0."""
    _same_shape(a, b)
    a, b = _crop(a, crop).double(), _crop(b, crop).double()
    mse = ((a - b) ** 2).flatten(1).mean(1)
    out = 10 * torch.log10(peak**2 / mse)
    return torch.where(mse == 0, torch.full_like(out, INF), out)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size=11, window_std=1.5, k1=0.01, k2=0.03, data_range=1.0, crop=0):
    """Mean SSIM per image over all valid (unpadded) Gaussian windows and channels."""
    _same_shape(a, b)
    a, b = _crop(a, crop).double(), _crop(b, crop).double()
    if min(a.shape[-2:]) < window_size:
        raise SizingError(f"image of size {tuple(a.shape[-2:])} is smaller than the {window_size}x{window_size} SSIM window")
    c = a.shape[1]
    w = gaussian_window(window_size, window_std).to(a.device).expand(c, 1, -1, -1)

    def filt(x):
        return F.conv2d(x, w, groups=c)

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).flatten(1).mean(1)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _jnum(v):
    return "inf" if v == INF else v


def _pnum(v):
    return INF if v == "inf" else float(v)


def _mean(values):
    if any(v == INF for v in values):
        return INF
    return float(np.mean(values)) if values else float("nan")


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)  # (id, psnr, ssim)
    aggregate: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, image_id, p, s):
        s = float(s)
        if not -1.0 - 1e-12 <= s <= 1.0 + 1e-12:
            raise ValueError(f"ssim {s} outside [-1, 1] for {image_id}")
        self.per_image.append((str(image_id), float(p), s))

    def finalize(self):
        self.per_image.sort(key=lambda r: r[0])
        self.aggregate = {
            "psnr": _mean([r[1] for r in self.per_image]),
            "ssim": _mean([r[2] for r in self.per_image]),
            "count": len(self.per_image),
        }
        return self

    def to_dict(self):
        return {
            "per_image": [{"id": i, "psnr": _jnum(p), "ssim": s} for i, p, s in self.per_image],
            "aggregate": {k: _jnum(v) for k, v in self.aggregate.items()},
            "meta": self.meta,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        rep = cls(
            per_image=[(r["id"], _pnum(r["psnr"]), float(r["ssim"])) for r in d["per_image"]],
            meta=d.get("meta", {}),
        )
        rep.aggregate = {k: (_pnum(v) if k != "count" else v) for k, v in d["aggregate"].items()}
        return rep

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "psnr", "ssim"])
            for i, p, s in self.per_image:
                w.writerow([i, repr(p), repr(s)])


def evaluate_pairs(model, pairs, meta=None, crop=0) -> MetricReport:
    """Run ``model`` on every (id, lr, hr) triple and collect PSNR/SSIM."""
    rep = MetricReport(meta=dict(meta or {}))
    with torch.no_grad():
        for image_id, lr, hr in pairs:
            sr = model(lr).clamp(0, 1) if model is not None else lr
            rep.add(image_id, psnr(sr, hr, crop=crop).item(), ssim(sr, hr, crop=crop).item())
    return rep.finalize()


# ---------------------------------------------------------------------------
# Degradation fidelity
# ---------------------------------------------------------------------------


def flat_mask(clean_lr: torch.Tensor, window=5, tol=1e-4) -> torch.Tensor:
    """Pixels whose ``window``-neighbourhood in the clean LR is constant in every channel."""
    pad = window // 2
    hi = F.max_pool2d(clean_lr, window, 1, pad)
    lo = -F.max_pool2d(-clean_lr, window, 1, pad)
    return ((hi - lo) <= tol).all(dim=1)


def estimate_noise_std(lr: torch.Tensor, clean_lr: torch.Tensor, min_pixels=32, window=5):
    """Per-image noise std from neighbour differences of ``lr - clean_lr`` on flat regions.

    Only horizontally or vertically adjacent pixel pairs that both lie in a
    flat region are used; for white noise the difference has variance
    2*sigma^2, and a constant offset over a region cancels. Returns
    ``(std, fallback)`` where ``fallback[i]`` marks images with fewer than
    ``min_pixels`` flat pairs; their std is taken from the raw paired
    residual over every pixel instead.
    """
    _same_shape(lr, clean_lr)
    resid = (lr - clean_lr).double()
    mask = flat_mask(clean_lr, window)
    mh = mask[:, :, 1:] & mask[:, :, :-1]
    mv = mask[:, 1:, :] & mask[:, :-1, :]
    dh = resid[..., :, 1:] - resid[..., :, :-1]
    dv = resid[..., 1:, :] - resid[..., :-1, :]
    stds, fallback = [], []
    for i in range(lr.shape[0]):
        n = int(mh[i].sum() + mv[i].sum())
        if n >= min_pixels:
            d = torch.cat([dh[i][:, mh[i]].flatten(), dv[i][:, mv[i]].flatten()])
            stds.append((d.pow(2).mean() / 2).sqrt().item())
            fallback.append(False)
        else:
            stds.append(resid[i].std().item())
            fallback.append(True)
    return np.asarray(stds), np.asarray(fallback)


def wasserstein1(a, b) -> float:
    return float(wasserstein_distance(np.asarray(a, float), np.asarray(b, float)))


def _draws(sampler, hr_set, n_samples, seed):
    """Collect ``n_samples`` per-image noise-std estimates, cycling over hr_set."""
    stds, flags, l1 = [], [], []
    per_image = [n_samples // len(hr_set) + (k < n_samples % len(hr_set)) for k in range(len(hr_set))]
    with torch.no_grad():
        for k, (hr, m) in enumerate(zip(hr_set, per_image)):
            if m == 0:
                continue
            batch = hr.expand(m, -1, -1, -1)
            clean = bicubic_down(batch, sampler.scale)
            out = sampler(batch, derive_seed(seed, k))
            s, f = estimate_noise_std(out, clean)
            stds.append(s)
            flags.append(f)
            l1.append((out - clean.clamp(0, 1)).abs().flatten(1).mean(1).double().numpy())
    return np.concatenate(stds), np.concatenate(flags), np.concatenate(l1)


class _GenSampler:
    def __init__(self, gen):
        self.gen, self.scale = gen, gen.scale

    def __call__(self, batch, seed):
        return self.gen(batch, generator=torch_generator(seed))


class _OracleSampler:
    def __init__(self, oracle):
        self.oracle, self.scale = oracle, oracle.scale

    def __call__(self, batch, seed):
        return oracle_degrade(batch, self.oracle, seed)


def sampler_for(obj):
    if isinstance(obj, OracleDegradation):
        return _OracleSampler(obj)
    if isinstance(obj, DegradationGenerator):
        return _GenSampler(obj)
    if callable(obj) and hasattr(obj, "scale"):
        return obj
    raise TypeError(f"cannot sample LR images from {type(obj).__name__}")


def degrader_fidelity(gen, oracle: OracleDegradation, hr_set, n_samples=200, seed=0) -> dict:
    """Compare the per-image noise-std distribution of ``gen`` with the oracle's.

    ``gen`` may be a generator, another oracle, or any callable
    ``(hr_batch, seed) -> lr_batch`` with a ``scale`` attribute.
    """
    if n_samples < 100:
        raise ValueError(f"n_samples must be at least 100, got {n_samples}")
    hr_set = list(hr_set)
    g_std, g_flag, g_l1 = _draws(sampler_for(gen), hr_set, n_samples, derive_seed(seed, 0))
    o_std, o_flag, o_l1 = _draws(sampler_for(oracle), hr_set, n_samples, derive_seed(seed, 1))
    return {
        "wasserstein": wasserstein1(g_std, o_std),
        "gen_std": g_std,
        "oracle_std": o_std,
        "gen_mean_std": float(g_std.mean()),
        "oracle_mean_std": float(o_std.mean()),
        "gen_l1_to_clean": float(g_l1.mean()),
        "oracle_l1_to_clean": float(o_l1.mean()),
        "fallback": bool(g_flag.any() or o_flag.any()),
        "n_samples": n_samples,
    }


# ---------------------------------------------------------------------------
# Robustness
# ---------------------------------------------------------------------------


@dataclass
class RobustnessCurve:
    sigma_grid: list
    psnr_at_sigma: list
    ssim_at_sigma: list

    def __post_init__(self):
        n = len(self.sigma_grid)
        if len(self.psnr_at_sigma) != n or len(self.ssim_at_sigma) != n:
            raise ValueError("robustness curve lists must be aligned")
        if any(b <= a for a, b in zip(self.sigma_grid, self.sigma_grid[1:])):
            raise ValueError("sigma grid must be strictly increasing")

    def to_dict(self):
        return {
            "sigma_grid": list(self.sigma_grid),
            "psnr": [_jnum(v) for v in self.psnr_at_sigma],
            "ssim": list(self.ssim_at_sigma),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["sigma_grid"], [_pnum(v) for v in d["psnr"]], [float(v) for v in d["ssim"]])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sigma", "psnr", "ssim"])
            for row in zip(self.sigma_grid, self.psnr_at_sigma, self.ssim_at_sigma):
                w.writerow([repr(float(v)) for v in row])

    def plot(self, path, label=None):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(self.sigma_grid, self.psnr_at_sigma, marker="o", label=label)
        ax.set_xlabel("test-time noise sigma (8-bit scale)")
        ax.set_ylabel("PSNR (dB)")
        if label:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def robustness_sweep(model, val_pairs, sigma_grid, seed=0) -> RobustnessCurve:
    """Mean PSNR/SSIM of ``model`` when Gaussian noise is added to LR inputs only.

    The same noise draw per image is reused at every sigma, scaled.
    """
    if not sigma_grid:
        raise ValueError("sigma_grid must not be empty")
    if any(s < 0 for s in sigma_grid):
        raise ValueError("sigma values must be nonnegative")
    pairs = list(val_pairs)
    p_out, s_out = [], []
    with torch.no_grad():
        eps = [torch.randn(lr.shape, generator=torch_generator(seed, i), dtype=lr.dtype) for i, (_, lr, _) in enumerate(pairs)]
        for sigma in sigma_grid:
            ps, ss = [], []
            for (_, lr, hr), e in zip(pairs, eps):
                noisy = (lr + (sigma / 255.0) * e).clamp(0, 1) if sigma else lr
                sr = model(noisy).clamp(0, 1)
                ps.append(psnr(sr, hr).item())
                ss.append(ssim(sr, hr).item())
            p_out.append(_mean(ps))
            s_out.append(float(np.mean(ss)))
    return RobustnessCurve(list(sigma_grid), p_out, s_out)


def median(values):
    return float(np.median(np.asarray(values, dtype=float)))

