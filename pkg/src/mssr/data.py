"""Image corpora, patch sampling and the ground-truth stochastic degradation.

Images live on disk as 8-bit PNG under ``<root>/hr`` and ``<root>/lr`` and
are promoted to float32 tensors in [0, 1] with layout (batch, channel, H, W).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, LoadError, MissingInputError, SizingError
from .ops import bicubic_down, check_divisible
from .utils import derive_seed, torch_generator

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png",)


# ---------------------------------------------------------------------------
# ImageBatch helpers
# ---------------------------------------------------------------------------


def check_image_batch(x: torch.Tensor, name="image batch"):
    if x.ndim != 4:
        raise SizingError(f"{name} must be rank 4 (B, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[1] not in (1, 3):
        raise SizingError(f"{name} must have 1 or 3 channels, got {x.shape[1]}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def load_png(path) -> torch.Tensor:
    """Decode one PNG into a (1, C, H, W) float32 tensor in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).unsqueeze(0)


def save_png(x: torch.Tensor, path):
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise SizingError("save_png expects a single image")
        x = x[0]
    arr = (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).cpu().numpy()
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def synth_texture(size: int, rng: np.random.Generator, channels=3) -> torch.Tensor:
    """Piecewise-constant test image: a flat background with rectangles and disks.

    Colours stay in [0.25, 0.75] so additive noise of up to 25/255 is rarely
    clipped, and large flat areas remain for noise estimation.
    """
    img = np.empty((channels, size, size), dtype=np.float32)
    img[:] = rng.uniform(0.25, 0.75, size=(channels, 1, 1))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        h, w = rng.integers(size // 8, size // 2, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        img[:, top : top + h, left : left + w] = rng.uniform(0.25, 0.75, size=(channels, 1, 1))
    for _ in range(int(rng.integers(2, 5))):
        r = rng.uniform(size / 16, size / 5)
        cy, cx = rng.uniform(0, size, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, mask] = rng.uniform(0.25, 0.75, size=(channels, 1))
    return torch.from_numpy(img).unsqueeze(0)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of n items over the given ratios."""
    raw = [n * r for r in ratios]
    counts = [int(np.floor(v + 1e-9)) for v in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(items, ratios, seed) -> dict[str, list]:
    items = sorted(items)
    perm = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[i] for i in perm]
    out, start = {}, 0
    for name, count in zip(SPLITS, split_counts(len(items), ratios)):
        out[name] = sorted(shuffled[start : start + count])
        start += count
    return out


@dataclass
class UnpairedCorpus:
    """HR and LR image references with no pairing between the two sides.

    ``hr_items``/``lr_items`` are the training splits; validation and test
    splits are kept in ``hr_splits``/``lr_splits``.
    """

    root: Path
    hr_splits: dict
    lr_splits: dict
    patch_size_hr: int = 64
    scale: int = 4
    seed: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.patch_size_hr % self.scale:
            raise ConfigError(
                f"patch_size_hr={self.patch_size_hr} is not divisible by scale={self.scale}"
            )
        overlap = {Path(p).resolve() for p in self.all_hr} & {Path(p).resolve() for p in self.all_lr}
        if overlap:
            raise ConfigError(f"HR and LR sides share files: {sorted(map(str, overlap))}")

    @property
    def hr_items(self):
        return self.hr_splits["train"]

    @property
    def lr_items(self):
        return self.lr_splits["train"]

    @property
    def all_hr(self):
        return [p for s in SPLITS for p in self.hr_splits.get(s, [])]

    @property
    def all_lr(self):
        return [p for s in SPLITS for p in self.lr_splits.get(s, [])]

    def image(self, path) -> torch.Tensor:
        key = str(path)
        if key not in self._cache:
            self._cache[key] = load_png(path)
        return self._cache[key]

    def paired_lr_path(self, hr_path) -> Path:
        """Oracle-rendered ground-truth LR for an HR file (oracle mode only)."""
        return Path(self.root) / "gt_lr" / Path(hr_path).name

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "scale": self.scale,
            "patch_size_hr": self.patch_size_hr,
            "hr": {s: [Path(p).name for p in self.hr_splits[s]] for s in SPLITS},
            "lr": {s: [Path(p).name for p in self.lr_splits[s]] for s in SPLITS},
        }

    def write_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def _list_images(directory: Path):
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_corpus(root_path, split_spec=(0.8, 0.1, 0.1), seed=0, patch_size_hr=64, scale=4) -> UnpairedCorpus:
    root = Path(root_path)
    if len(split_spec) != 3 or any(r < 0 for r in split_spec) or abs(sum(split_spec) - 1) > 1e-6:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {split_spec}")
    hr, lr = _list_images(root / "hr"), _list_images(root / "lr")
    if not hr and not lr:
        raise ConfigError(f"no images found under {root}/hr or {root}/lr")
    bad = []
    for p in hr + lr:
        try:
            with Image.open(p) as im:
                im.load()
        except (UnidentifiedImageError, OSError):
            bad.append(p)
    if bad:
        raise LoadError(bad)
    return UnpairedCorpus(
        root=root,
        hr_splits=assign_splits(hr, split_spec, seed),
        lr_splits=assign_splits(lr, split_spec, seed + 1),
        patch_size_hr=patch_size_hr,
        scale=scale,
        seed=seed,
        ratios=tuple(split_spec),
    )


def _crop(img, size, rng, name):
    h, w = img.shape[-2:]
    if size > min(h, w):
        raise SizingError(f"patch size {size} exceeds image {name} of size {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[..., top : top + size, left : left + size]


def sample_patch(corpus: UnpairedCorpus, rng: np.random.Generator, side="hr", split="train") -> torch.Tensor:
    items = (corpus.hr_splits if side == "hr" else corpus.lr_splits)[split]
    if not items:
        raise ConfigError(f"corpus has no {side} images in split {split!r}")
    size = corpus.patch_size_hr if side == "hr" else corpus.patch_size_hr // corpus.scale
    path = items[int(rng.integers(0, len(items)))]
    return _crop(corpus.image(path), size, rng, Path(path).name)


def sample_hr_patch(corpus: UnpairedCorpus, rng_seed: int, split="train") -> torch.Tensor:
    return sample_patch(corpus, np.random.default_rng(rng_seed), "hr", split).clone()


class PatchSampler:
    """Seeded batch sampler over the in-memory images of one corpus side."""

    def __init__(self, images, patch_size, seed):
        self.images = list(images)
        if not self.images:
            raise ConfigError("patch sampler needs at least one image")
        self.patch_size = patch_size
        self.rng = np.random.default_rng(seed)
        for i, img in enumerate(self.images):
            if patch_size > min(img.shape[-2:]):
                raise SizingError(f"patch size {patch_size} exceeds image #{i} of size {tuple(img.shape[-2:])}")

    def __call__(self, batch_size):
        idx = self.rng.integers(0, len(self.images), size=batch_size)
        return torch.cat([_crop(self.images[i], self.patch_size, self.rng, str(i)) for i in idx])


# ---------------------------------------------------------------------------
# Oracle degradation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleDegradation:
    scale: int = 4
    noise_sigma_range: tuple = (5.0, 25.0)
    downsample_kernel: str = "bicubic-a-0.5-antialiased-reflect"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.noise_sigma_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid noise_sigma_range {self.noise_sigma_range}")


def oracle_degrade(hr: torch.Tensor, oracle: OracleDegradation, rng_seed: int, return_sigma=False):
    """Downsample, then add Gaussian noise with a per-image sigma, then clamp."""
    check_divisible(hr, oracle.scale, "HR input")
    down = bicubic_down(hr, oracle.scale)
    g = torch_generator(oracle.seed, rng_seed)
    lo, hi = oracle.noise_sigma_range
    sigma = lo + (hi - lo) * torch.rand(hr.shape[0], generator=g, dtype=torch.float64)
    sigma = (sigma / 255.0).to(hr.dtype)
    if hi == 0:
        out = down.clamp(0, 1)
    else:
        noise = torch.randn(down.shape, generator=g, dtype=hr.dtype)
        out = (down + sigma.view(-1, 1, 1, 1) * noise).clamp(0, 1)
    return (out, sigma) if return_sigma else out


def make_oracle_corpus(root, oracle: OracleDegradation, n_hr=64, n_lr=64, size=128, seed=0, channels=3):
    """Render a synthetic unpaired corpus plus paired ground-truth LR.

    Writes ``hr/`` (clean textures), ``lr/`` (oracle degradations of a
    disjoint set of textures) and ``gt_lr/`` (oracle degradations of the
    ``hr/`` images, same filenames). Returns the list of written paths.
    """
    root = Path(root)
    written = []
    for i in range(n_hr):
        hr = synth_texture(size, np.random.default_rng([seed, 0, i]), channels)
        name = f"hr_{i:04d}.png"
        save_png(hr, root / "hr" / name)
        # the stored (quantised) HR is what the paired LR is degraded from
        hr = load_png(root / "hr" / name)
        save_png(oracle_degrade(hr, oracle, rng_seed=derive_seed(seed, 3, i)), root / "gt_lr" / name)
        written += [root / "hr" / name, root / "gt_lr" / name]
    for i in range(n_lr):
        src = synth_texture(size, np.random.default_rng([seed, 1, i]), channels)
        src = torch.round(src * 255) / 255
        name = f"lr_{i:04d}.png"
        save_png(oracle_degrade(src, oracle, rng_seed=derive_seed(seed, 2, i)), root / "lr" / name)
        written.append(root / "lr" / name)
    return written


def paired_split(corpus: UnpairedCorpus, split="val"):
    """(id, ground-truth LR, HR) triples for an oracle-mode corpus split."""
    pairs = []
    for p in corpus.hr_splits[split]:
        gt = corpus.paired_lr_path(p)
        if not gt.exists():
            raise MissingInputError(f"no ground-truth LR for {Path(p).name} (expected {gt})")
        pairs.append((Path(p).stem, load_png(gt), corpus.image(p)))
    return pairs
