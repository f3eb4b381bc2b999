"""Unpaired adversarial training of degradation generators.

Each generator G maps HR patches to LR samples. A patch discriminator sees
real LR patches from the unpaired LR corpus and G's samples; a fixed-operator
cycle term keeps the low-frequency content of G(y) tied to y.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .data import PatchSampler, UnpairedCorpus
from .errors import ConfigError, DivergenceError, MSSRError, NumericError, SizingError
from .generator import DegradationGenerator, GeneratorEnsemble, save_generator
from .ops import bicubic_down, bicubic_up, gaussian_blur
from .utils import derive_seed, seeded, torch_generator

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "g_loss", "d_loss", "cycle_loss")


class Discriminator(nn.Module):
    """Four-layer patch classifier on the high-frequency band of its input.

    The input minus its Gaussian blur is classified, so the discriminator
    judges noise and fine texture while content is left to the cycle term.
    Receptive field 17 LR pixels.
    """

    def __init__(self, channels=3, width=32, highpass_std=1.0):
        super().__init__()
        self.highpass_std = highpass_std
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, 1, 1),
        )

    receptive_field = 17

    def forward(self, x):
        if self.highpass_std:
            x = x - gaussian_blur(x, self.highpass_std)
        return self.net(x)

    @classmethod
    def build(cls, channels=3, width=32, seed=0, highpass_std=1.0):
        with seeded(seed):
            return cls(channels, width, highpass_std)


@dataclass
class DegraderTrainConfig:
    adv_weight: float = 1.0
    cycle_weight: float = 10.0
    lowpass_weight: float = 0.0
    lowpass_std: float = 2.0
    steps: int = 2000
    lr: float = 1e-4
    sigma_lr: float | None = None
    betas: tuple = (0.5, 0.999)
    batch_size: int = 8
    seed: int = 0
    disc_width: int = 32
    divergence_threshold: float = 1e4
    checkpoint_every: int = 100

    def __post_init__(self):
        for name in ("adv_weight", "cycle_weight", "lowpass_weight", "lowpass_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        self.betas = tuple(self.betas)


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NumericError(f"{name} has {bad} non-finite entries of {t.numel()} (shape {tuple(t.shape)})")


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Least-squares GAN objectives, returned as (generator loss, discriminator loss)."""
    _check_finite("d_real", d_real)
    _check_finite("d_fake", d_fake)
    if d_real.shape != d_fake.shape:
        raise SizingError(f"logit maps differ in shape: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    g_loss = ((d_fake - 1) ** 2).mean()
    d_loss = ((d_real - 1) ** 2).mean() + (d_fake**2).mean()
    return g_loss, d_loss


def cycle_loss(hr: torch.Tensor, lr_fake: torch.Tensor, upsampler=bicubic_up, band_std=2.0) -> torch.Tensor:
    """L1 between low-passed HR and the low-passed upsampled LR sample."""
    h, w = hr.shape[-2:]
    lh, lw = lr_fake.shape[-2:]
    if lh == 0 or h % lh or w % lw or h // lh != w // lw or hr.shape[:2] != lr_fake.shape[:2]:
        raise SizingError(f"LR shape {tuple(lr_fake.shape)} does not divide HR shape {tuple(hr.shape)}")
    up = upsampler(lr_fake, h // lh)
    return (gaussian_blur(up, band_std) - gaussian_blur(hr, band_std)).abs().mean()


def lowpass_loss(hr, lr_fake, scale, band_std):
    return (gaussian_blur(lr_fake, band_std / scale) - gaussian_blur(bicubic_down(hr, scale), band_std / scale)).abs().mean()


def write_log_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def _optimizer(gen, cfg):
    groups = [{"params": gen.block_parameters()}]
    sig = [p for inj in gen.injections for p in inj.parameters()]
    groups.append({"params": sig, "lr": cfg.sigma_lr or cfg.lr})
    return torch.optim.Adam(groups, lr=cfg.lr, betas=cfg.betas)


def train_degrader(
    gen: DegradationGenerator,
    disc: Discriminator,
    corpus: UnpairedCorpus,
    cfg: DegraderTrainConfig,
    checkpoint_path=None,
    freeze_sigma=False,
):
    """Alternate one discriminator and one generator update per step.

    Returns ``(gen, rows)`` where rows are per-step loss dicts. On divergence
    the generator is rolled back to its last good state (and written to
    ``checkpoint_path`` if given) before ``DivergenceError`` is raised.
    ``freeze_sigma`` keeps every injection at zero (deterministic baseline).
    """
    rows = []
    if cfg.steps == 0:
        return gen, rows
    if not corpus.hr_items or not corpus.lr_items:
        raise ConfigError("unpaired training needs HR and LR training images")
    scale = gen.scale
    if corpus.scale != scale:
        raise ConfigError(f"corpus scale {corpus.scale} differs from generator scale {scale}")

    hr_patches = PatchSampler([corpus.image(p) for p in corpus.hr_items], corpus.patch_size_hr, derive_seed(cfg.seed, 1))
    lr_patches = PatchSampler([corpus.image(p) for p in corpus.lr_items], corpus.patch_size_hr // scale, derive_seed(cfg.seed, 2))

    if freeze_sigma:
        gen.zero_sigma_()
        for inj in gen.injections:
            inj.requires_grad_(False)
    opt_g = _optimizer(gen, cfg)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)
    last_good = copy.deepcopy(gen.state_dict())
    gen.train()
    disc.train()

    for step in range(cfg.steps):
        y = hr_patches(cfg.batch_size)
        x_real = lr_patches(cfg.batch_size)
        try:
            fake = gen(y, generator=torch_generator(cfg.seed, 3, step))

            disc.requires_grad_(True)
            opt_d.zero_grad(set_to_none=True)
            _, d_loss = gan_losses(disc(x_real), disc(fake.detach()))
            d_loss.backward()
            opt_d.step()

            disc.requires_grad_(False)
            opt_g.zero_grad(set_to_none=True)
            d_fake = disc(fake)
            _check_finite("d_fake", d_fake)
            g_adv = ((d_fake - 1) ** 2).mean()
            cyc = cycle_loss(y, fake, band_std=cfg.lowpass_std)
            total = cfg.adv_weight * g_adv + cfg.cycle_weight * cyc
            if cfg.lowpass_weight:
                total = total + cfg.lowpass_weight * lowpass_loss(y, fake, scale, cfg.lowpass_std)
            _check_finite("generator loss", total)
        except NumericError as e:
            _rollback(gen, last_good, checkpoint_path)
            err = DivergenceError(f"step {step}: {e}", step=step, last_good=checkpoint_path)
            err.rows = rows
            raise err from e
        worst = max(total.item(), d_loss.item())
        if not math.isfinite(worst) or worst > cfg.divergence_threshold:
            _rollback(gen, last_good, checkpoint_path)
            err = DivergenceError(f"step {step}: loss {worst:.4g} exceeds threshold", step=step, last_good=checkpoint_path)
            err.rows = rows
            raise err
        total.backward()
        opt_g.step()
        disc.requires_grad_(True)

        rows.append({"step": step, "g_loss": g_adv.item(), "d_loss": d_loss.item(), "cycle_loss": cyc.item()})
        if (step + 1) % cfg.checkpoint_every == 0:
            last_good = copy.deepcopy(gen.state_dict())

    gen.eval()
    disc.eval()
    if checkpoint_path is not None:
        save_generator(gen, checkpoint_path, config=asdict(cfg))
    return gen, rows


def _rollback(gen, state, checkpoint_path):
    gen.load_state_dict(state)
    gen.eval()
    if checkpoint_path is not None:
        save_generator(gen, checkpoint_path, diverged=True)


def make_discriminator(cfg: DegraderTrainConfig, channels=3) -> Discriminator:
    return Discriminator.build(channels, cfg.disc_width, seed=derive_seed(cfg.seed, 99))


def member_config(cfg: DegraderTrainConfig, k: int) -> DegraderTrainConfig:
    return DegraderTrainConfig(**{**asdict(cfg), "seed": cfg.seed + k})


def train_ensemble(ens: GeneratorEnsemble, corpus, cfg: DegraderTrainConfig, checkpoint_paths=None, freeze_sigma=False):
    """Train every member independently with its own discriminator and seed.

    Returns ``(ens, logs)`` with one log per member.
    """
    logs = []
    channels = ens[0].descriptor.get("channels", 3)
    for k, gen in enumerate(ens):
        mcfg = member_config(cfg, k)
        disc = make_discriminator(mcfg, channels)
        path = checkpoint_paths[k] if checkpoint_paths else None
        try:
            _, rows = train_degrader(gen, disc, corpus, mcfg, checkpoint_path=path, freeze_sigma=freeze_sigma)
        except DivergenceError as e:
            err = DivergenceError(f"ensemble member {k} ({gen.arch_id}): {e}", step=e.step, last_good=e.last_good)
            err.member = k
            err.rows = getattr(e, "rows", [])
            raise err from e
        except MSSRError as e:
            e.member = k
            e.args = (f"ensemble member {k} ({gen.arch_id}): {e}",)
            raise
        logs.append(rows)
    return ens, logs
