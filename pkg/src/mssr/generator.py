"""Probabilistic degradation generators (HR -> LR) with learned noise injection.

A generator is a feed-forward chain ``stem -> [block -> inject] * T -> tail
-> head``. Each injection site adds ``sigma * eps`` (eps ~ N(0, I)) to the
block output, so the chain is an ancestral sampler over T latent feature
maps. With every sigma at zero the network is an ordinary deterministic
degrader.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .ops import bicubic_down, check_divisible
from .utils import seeded, torch_generator

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODES = ("shared_spatial", "input_dependent")


class NoiseInjection(nn.Module):
    """Adds per-channel scaled Gaussian noise to a feature map.

    In ``shared_spatial`` mode sigma is a free vector of length C shared over
    all spatial positions and independent of the input. In ``input_dependent``
    mode a 1x1 conv predicts a sigma map from the features.
    """

    def __init__(self, channels: int, mode: str = "shared_spatial", name: str = "inject"):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"unknown noise mode {mode!r}; valid: {', '.join(MODES)}")
        self.channels = channels
        self.mode = mode
        self.name = name
        self.sigma = nn.Parameter(torch.zeros(channels))
        if mode == "input_dependent":
            self.sigma_head = nn.Conv2d(channels, channels, 1)
            nn.init.zeros_(self.sigma_head.weight)
            nn.init.zeros_(self.sigma_head.bias)

    def scale_map(self, x):
        s = self.sigma.view(1, -1, 1, 1)
        if self.mode == "input_dependent":
            s = s + self.sigma_head(x)
        return s

    def forward(self, x, generator: torch.Generator | None = None):
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"noise layer {self.name!r} expects {self.channels} channels, got {x.shape[1]}"
            )
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        return x + self.scale_map(x) * eps


def inject_noise(features: torch.Tensor, layer: NoiseInjection, rng_seed: int) -> torch.Tensor:
    return layer(features, generator=torch_generator(rng_seed))


def conv3(cin, cout, stride=1):
    # reflect padding: a constant input stays constant up to the border
    return nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="reflect")


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            conv3(width, width),
            nn.LeakyReLU(0.2),
            conv3(width, width),
        )

    def forward(self, x):
        return x + self.body(x)


class ChannelAttention(nn.Module):
    def __init__(self, width, reduction=4):
        super().__init__()
        hidden = max(1, width // reduction)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(width, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, width, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.gate(x)


class AttentionBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            conv3(width, width),
            nn.LeakyReLU(0.2),
            conv3(width, width),
            ChannelAttention(width),
        )

    def forward(self, x):
        return x + self.body(x)


class FixedDownsample(nn.Module):
    def __init__(self, scale):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return bicubic_down(x, self.scale)


def _strided(width_in, width, n):
    layers = []
    for k in range(n):
        layers += [conv3(width_in if k == 0 else width, width, 2), nn.LeakyReLU(0.2)]
    return nn.Sequential(*layers)


class DegradationGenerator(nn.Module):
    """HR -> LR sampler. ``forward(hr, generator)`` draws one LR sample.

    With ``skip=True`` the head predicts a residual on top of the fixed
    bicubic downsample of the input. Output is clamped to [0, 1] only after
    the head.
    """

    def __init__(self, stem, blocks, injections, tail, head, scale, arch_id, skip=True, descriptor=None):
        super().__init__()
        if len(injections) < 1:
            raise ConfigError("a degradation generator needs at least one noise injection site")
        if len(blocks) != len(injections):
            raise ConfigError("blocks and injection sites must interleave one-to-one")
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)
        self.injections = nn.ModuleList(injections)
        self.tail = tail
        self.head = head
        self.scale = scale
        self.arch_id = arch_id
        self.skip = skip
        self.descriptor = dict(descriptor or {})

    @property
    def T(self):
        return len(self.injections)

    def sigma_parameters(self):
        return [inj.sigma for inj in self.injections]

    def block_parameters(self):
        sig = {id(p) for inj in self.injections for p in inj.parameters()}
        return [p for p in self.parameters() if id(p) not in sig]

    def zero_sigma_(self):
        with torch.no_grad():
            for inj in self.injections:
                for p in inj.parameters():
                    p.zero_()
        return self

    def forward(self, hr, generator: torch.Generator | None = None):
        z = self.stem(hr)
        for block, inj in zip(self.blocks, self.injections):
            z = inj(block(z), generator)
        out = self.head(self.tail(z))
        if self.skip:
            out = out + bicubic_down(hr, self.scale)
        return out.clamp(0, 1)


def _head(width, channels, gain=0.1):
    head = conv3(width, channels)
    with torch.no_grad():
        head.weight.mul_(gain)
        head.bias.zero_()
    return head


def residual_chain(channels=3, scale=4, width=32, n_blocks=4, mode="shared_spatial", skip=True, arch_id="residual_chain"):
    """Stem conv, residual blocks at HR resolution, strided downsampling, head."""
    n_down = _n_down(scale)
    desc = dict(family="residual_chain", channels=channels, scale=scale, width=width,
                n_blocks=n_blocks, mode=mode, skip=skip)
    return DegradationGenerator(
        stem=nn.Sequential(conv3(channels, width), nn.LeakyReLU(0.2)),
        blocks=[ResBlock(width) for _ in range(n_blocks)],
        injections=[NoiseInjection(width, mode, f"{arch_id}.inject{i}") for i in range(n_blocks)],
        tail=_strided(width, width, n_down),
        head=_head(width, channels),
        scale=scale,
        arch_id=arch_id,
        skip=skip,
        descriptor=desc,
    )


def attention_strided(channels=3, scale=4, width=32, n_blocks=3, mode="shared_spatial", skip=True, arch_id="attention_strided"):
    """Strided convs up front, then channel-attention blocks at LR resolution."""
    n_down = _n_down(scale)
    desc = dict(family="attention_strided", channels=channels, scale=scale, width=width,
                n_blocks=n_blocks, mode=mode, skip=skip)
    return DegradationGenerator(
        stem=_strided(channels, width, n_down),
        blocks=[AttentionBlock(width) for _ in range(n_blocks)],
        injections=[NoiseInjection(width, mode, f"{arch_id}.inject{i}") for i in range(n_blocks)],
        tail=nn.Identity(),
        head=_head(width, channels),
        scale=scale,
        arch_id=arch_id,
        skip=skip,
        descriptor=desc,
    )


def linear_probe(channels=3, scale=4, sigma=0.0, arch_id="linear_probe"):
    """Fixed bicubic stem, identity block, one injection, unit-gain 1x1 head.

    Used for calibration checks: the output noise std equals sigma exactly
    (before clamping).
    """
    head = nn.Conv2d(channels, channels, 1)
    with torch.no_grad():
        head.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
        head.bias.zero_()
    inj = NoiseInjection(channels, name=f"{arch_id}.inject0")
    with torch.no_grad():
        inj.sigma.fill_(sigma)
    return DegradationGenerator(
        stem=FixedDownsample(scale),
        blocks=[nn.Identity()],
        injections=[inj],
        tail=nn.Identity(),
        head=head,
        scale=scale,
        arch_id=arch_id,
        skip=False,
        descriptor=dict(family="linear_probe", channels=channels, scale=scale),
    )


def _n_down(scale):
    if scale not in (2, 4):
        raise ConfigError(f"only scales 2 and 4 are supported, got {scale}")
    return int(math.log2(scale))


FAMILIES = {
    "residual_chain": residual_chain,
    "attention_strided": attention_strided,
}
ALIASES = {
    "residual-chain": "residual_chain",
    "deresnet": "residual_chain",
    "attention-strided": "attention_strided",
    "han": "attention_strided",
}


def parse_descriptor(spec) -> dict:
    """Accept ``"family"``, ``"family:width=32,n_blocks=4"`` or a dict."""
    if isinstance(spec, dict):
        d = dict(spec)
    else:
        name, _, rest = str(spec).partition(":")
        d = {"family": name.strip()}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, _, value = item.partition("=")
            d[key.strip()] = _coerce(value.strip())
    family = ALIASES.get(d.get("family", "").lower(), d.get("family", "").lower())
    if family not in FAMILIES:
        raise ConfigError(
            f"unknown generator family {d.get('family')!r}; valid families: {', '.join(sorted(FAMILIES))}"
        )
    d["family"] = family
    return d


def _coerce(v):
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    try:
        return int(v)
    except ValueError:
        return v


def build_generator(spec, channels=3, scale=4, seed=0, arch_id=None, **overrides):
    d = parse_descriptor(spec)
    family = d.pop("family")
    d.setdefault("channels", channels)
    d.setdefault("scale", scale)
    d.update(overrides)
    d["arch_id"] = arch_id or family
    with seeded(seed):
        return FAMILIES[family](**d)


class GeneratorEnsemble:
    """K degradation generators sharing one scale, with distinct arch ids."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ConfigError("an ensemble needs at least one generator")
        ids = [m.arch_id for m in members]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"ensemble arch ids must be distinct, got {ids}")
        if len({m.scale for m in members}) != 1:
            raise ConfigError("all ensemble members must share one scale")
        self.members = members

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def scale(self):
        return self.members[0].scale

    @property
    def K(self):
        return len(self.members)

    def freeze(self):
        for m in self.members:
            m.eval()
            m.requires_grad_(False)
        return self


def build_ensemble(specs, channels=3, scale=4, seed=0, **overrides) -> GeneratorEnsemble:
    if not specs:
        raise ConfigError("build_ensemble needs at least one architecture descriptor")
    members = []
    for k, spec in enumerate(specs):
        family = parse_descriptor(spec)["family"]
        members.append(
            build_generator(spec, channels, scale, seed=seed * 1000 + k, arch_id=f"{family}-{k}", **overrides)
        )
    return GeneratorEnsemble(members)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def degrade(gen: DegradationGenerator, hr: torch.Tensor, rng_seed: int) -> torch.Tensor:
    check_divisible(hr, gen.scale, "HR input")
    return gen(hr, generator=torch_generator(rng_seed))


@torch.no_grad()
def degrade_expected(gen: DegradationGenerator, hr: torch.Tensor, n_samples: int, rng_seed: int, chunk=256):
    """Monte-Carlo mean and per-pixel std (ddof=1) of ``n_samples`` draws."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples}")
    if hr.shape[0] != 1:
        raise ValueError("degrade_expected takes a single HR image")
    check_divisible(hr, gen.scale, "HR input")
    g = torch_generator(rng_seed)
    total = sq = None
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        out = gen(hr.expand(n, -1, -1, -1), generator=g).double()
        s, q = out.sum(0), (out * out).sum(0)
        total = s if total is None else total + s
        sq = q if sq is None else sq + q
        done += n
    mean = total / n_samples
    var = ((sq - n_samples * mean * mean) / (n_samples - 1)).clamp_min(0)
    return mean.unsqueeze(0).to(hr.dtype), var.sqrt().unsqueeze(0).to(hr.dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_generator(gen: DegradationGenerator, path, **meta):
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "degradation_generator",
        "arch_id": gen.arch_id,
        "scale": gen.scale,
        "descriptor": gen.descriptor,
        "state_dict": gen.state_dict(),
        "meta": meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_generator(path) -> tuple[DegradationGenerator, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION or payload.get("kind") != "degradation_generator":
        raise ConfigError(f"{path} is not a generator checkpoint of format {FORMAT_VERSION}")
    d = dict(payload["descriptor"])
    family = d.pop("family")
    if family == "linear_probe":
        gen = linear_probe(arch_id=payload["arch_id"], **d)
    else:
        gen = FAMILIES[family](arch_id=payload["arch_id"], **d)
    gen.load_state_dict(payload["state_dict"])
    return gen, payload["meta"]


class BicubicDegrader(nn.Module):
    """Noise-free bicubic HR -> LR map; the clean-pairs baseline degrader."""

    def __init__(self, scale=4, arch_id="bicubic"):
        super().__init__()
        self.scale = scale
        self.arch_id = arch_id
        self.descriptor = {"family": "bicubic", "scale": scale}

    def forward(self, hr, generator=None):
        return bicubic_down(hr, self.scale).clamp(0, 1)
