"""Collaborative training of K SR models on pseudo-pairs from K frozen degraders.

Model i is trained on

    lambda_sup * L1(M_i(x_i), y)
  + lambda_col * sum_{j != i} L1(M_i(x_j), sg[M_j(x_j)])
  + lambda_ada * ramp(p, P) * L1(M_i(x), sg[mean_l M_l(x)])

where x_j = G_j(y) are synthetic LR samples of a shared HR patch y, x is a
real LR patch and sg[.] stops gradients. The first two terms form the
synthetic phase, the last one the real phase; phases alternate.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .data import PatchSampler, UnpairedCorpus, paired_split
from .errors import ConfigError, DivergenceError, InvariantViolation, SizingError
from .generator import GeneratorEnsemble
from .metrics import psnr
from .ops import bicubic_up
from .utils import derive_seed, param_checksum, seeded, torch_generator

log = logging.getLogger(__name__)

PHASES = ("synthetic", "real")
FORMAT_VERSION = 1


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, 1, 1),
        )

    def forward(self, x):
        return x + self.body(x)


class SRModel(nn.Module):
    """Residual trunk plus sub-pixel x2 upsampling stages, over a bicubic skip."""

    def __init__(self, channels=3, scale=4, width=48, n_blocks=6):
        super().__init__()
        if scale not in (2, 4):
            raise ConfigError(f"only scales 2 and 4 are supported, got {scale}")
        self.scale = scale
        self.config = dict(channels=channels, scale=scale, width=width, n_blocks=n_blocks)
        self.stem = nn.Conv2d(channels, width, 3, 1, 1)
        self.trunk = nn.Sequential(*[ResBlock(width) for _ in range(n_blocks)], nn.Conv2d(width, width, 3, 1, 1))
        up = []
        for _ in range(int(math.log2(scale))):
            up += [nn.Conv2d(width, 4 * width, 3, 1, 1), nn.PixelShuffle(2), nn.LeakyReLU(0.2)]
        self.upsampler = nn.Sequential(*up)
        self.head = nn.Conv2d(width, channels, 3, 1, 1)

    def forward(self, x):
        f = self.stem(x)
        f = f + self.trunk(f)
        return self.head(self.upsampler(f)) + bicubic_up(x, self.scale)

    @classmethod
    def build(cls, seed=0, **kwargs):
        with seeded(seed):
            return cls(**kwargs)


def build_models(k, seed=0, **kwargs):
    return [SRModel.build(seed=derive_seed(seed, 50, i), **kwargs) for i in range(k)]


@dataclass
class CollabConfig:
    lambda_sup: float = 1.0
    lambda_col: float = 0.01
    lambda_ada: float = 10.0
    P: int = 10_000
    K: int = 2
    steps: int = 10_000
    alternation: tuple = PHASES
    pooled: bool = False
    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    val_every: int = 500
    teacher_refresh: int = 1
    real_optimizer: str = "shared"
    joint: bool = False

    def __post_init__(self):
        for name in ("lambda_sup", "lambda_col", "lambda_ada"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.P < 1:
            raise ConfigError("P must be at least 1")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        self.alternation = tuple(self.alternation)
        bad = [p for p in self.alternation if p not in PHASES]
        if bad or not self.alternation:
            raise ConfigError(f"alternation may only reference phases {PHASES}, got {self.alternation}")
        self.betas = tuple(self.betas)
        if self.real_optimizer not in ("shared", "separate"):
            raise ConfigError("real_optimizer must be 'shared' or 'separate'")


@dataclass
class PseudoLabel:
    y_hat: torch.Tensor
    teacher_count: int
    gradient_barrier: bool = field(default=True, init=False)


def ramp(p, P) -> float:
    if P < 1:
        raise ConfigError(f"P must be at least 1, got {P}")
    if p < 0:
        raise ValueError(f"iteration must be nonnegative, got {p}")
    if p > P:
        warnings.warn(f"iteration {p} is past the ramp length {P}; using 1", stacklevel=2)
        return 1.0
    return p / P


def sup_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise SizingError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return (pred - target).abs().mean()


def collab_loss(outputs, i: int) -> torch.Tensor:
    """``outputs[a][b]`` is ``M_a(x_b)``; peers' own outputs are detached targets."""
    k = len(outputs)
    terms = [sup_loss(outputs[i][j], outputs[j][j].detach()) for j in range(k) if j != i]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def pseudo_label(models, x_real: torch.Tensor) -> PseudoLabel:
    if not models:
        raise ValueError("pseudo_label needs at least one model")
    if len({m.scale for m in models}) != 1:
        raise ConfigError("all models must share one scale")
    with torch.no_grad():
        outs = [m(x_real) for m in models]
        y_hat = torch.stack(outs).mean(0)
    return PseudoLabel(y_hat.detach(), len(models))


def combine_terms(sup, col, ada, p, cfg: CollabConfig):
    return cfg.lambda_sup * sup + cfg.lambda_col * col + cfg.lambda_ada * ramp(p, cfg.P) * ada


def pool_batches(xs, offset=0):
    """One batch drawn from the union of the K synthetic sets.

    Sample b of the pooled batch comes from generator ``(b + offset) % K``,
    so every generator contributes equally and the batch size is unchanged.
    """
    k = len(xs)
    idx = [(b + offset) % k for b in range(xs[0].shape[0])]
    return torch.stack([xs[j][b] for b, j in enumerate(idx)])


def _synthetic_terms(i, outputs, y, cfg):
    k = len(outputs)
    sup = sup_loss(outputs[i][i], y)
    col = collab_loss(outputs, i) if cfg.lambda_col and k > 1 else None
    return sup, col


def total_loss(i, models, x_synth, y, p, cfg: CollabConfig, x_real=None, label: PseudoLabel | None = None):
    """Full three-term objective of model ``i`` and its per-term breakdown.

    ``x_synth[j]`` is the sample of generator j for the shared HR target
    ``y``. Returns ``(loss, {"sup", "col", "ada", "ramp"})``.
    """
    k = len(models)
    if len(x_synth) != k:
        raise ConfigError(f"need one synthetic batch per model ({k}), got {len(x_synth)}")
    r = ramp(p, cfg.P)
    outputs = [[models[a](x_synth[b]) if a == i or a == b else None for b in range(k)] for a in range(k)]
    if cfg.pooled:
        sup = sup_loss(models[i](pool_batches(x_synth, p)), y)
    else:
        sup = sup_loss(outputs[i][i], y)
    col = collab_loss(outputs, i)
    if cfg.lambda_ada and r > 0:
        if x_real is None:
            raise ConfigError("lambda_ada > 0 with a positive ramp needs a real LR batch")
        label = label or pseudo_label(models, x_real)
        ada = sup_loss(models[i](x_real), label.y_hat)
    else:
        ada = torch.zeros(())
    loss = combine_terms(sup, col, ada, p, cfg)
    return loss, {"sup": sup.item(), "col": col.item(), "ada": ada.item(), "ramp": r}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _check_loss(loss, p, models, checkpoint_dir, cfg):
    if not torch.isfinite(loss):
        if checkpoint_dir is not None:
            save_models(models, checkpoint_dir, cfg=cfg, diverged=True)
        raise DivergenceError(f"non-finite SR loss at iteration {p}", step=p, last_good=checkpoint_dir)


@torch.no_grad()
def validate(models, val_pairs):
    """Mean PSNR of every model over (id, lr, hr) validation triples."""
    scores = []
    for m in models:
        was_training = m.training
        m.eval()
        vals = [psnr(m(lr).clamp(0, 1), hr).item() for _, lr, hr in val_pairs]
        scores.append(sum(vals) / len(vals))
        m.train(was_training)
    return scores


def train_collab(models, ens: GeneratorEnsemble, corpus: UnpairedCorpus, cfg: CollabConfig, val_pairs=None, checkpoint_dir=None):
    """Alternate synthetic-pair and real-LR phases for ``cfg.steps`` iterations.

    Returns ``(models, curves)``; curves holds one row per validation point
    with per-model PSNR, the best-of-K PSNR and mean loss terms since the
    previous row.
    """
    curves = []
    k = len(models)
    if k != len(ens):
        raise ConfigError(f"{k} SR models but {len(ens)} generators")
    if cfg.steps == 0:
        return models, curves
    scale = ens.scale
    if any(m.scale != scale for m in models):
        raise ConfigError("SR model and generator scales differ")
    if val_pairs is None:
        try:
            val_pairs = paired_split(corpus, "val")
        except FileNotFoundError:
            val_pairs = []

    ens.freeze()
    frozen = [param_checksum(g) for g in ens]
    hr_patches = PatchSampler([corpus.image(p) for p in corpus.hr_items], corpus.patch_size_hr, derive_seed(cfg.seed, 11))
    use_real = cfg.lambda_ada > 0 and "real" in cfg.alternation
    if use_real:
        if not corpus.lr_items:
            raise ConfigError("lambda_ada > 0 needs real LR training images")
        lr_patches = PatchSampler([corpus.image(p) for p in corpus.lr_items], corpus.patch_size_hr // scale, derive_seed(cfg.seed, 12))
    opts = [torch.optim.Adam(m.parameters(), lr=cfg.lr, betas=cfg.betas) for m in models]
    if cfg.real_optimizer == "separate":
        real_opts = [torch.optim.Adam(m.parameters(), lr=cfg.lr, betas=cfg.betas) for m in models]
    else:
        real_opts = opts
    for m in models:
        m.train()
    teachers = models
    acc = _Accumulator(k)
    real_steps = 0

    for p in range(cfg.steps):
        r = ramp(min(p, cfg.P), cfg.P)
        for group in _phase_groups(cfg.alternation, cfg.joint):
            losses = [0.0] * k
            if "synthetic" in group:
                y = hr_patches(cfg.batch_size)
                with torch.no_grad():
                    xs = [g(y, generator=torch_generator(cfg.seed, 13, p, j)) for j, g in enumerate(ens)]
                if cfg.pooled:
                    xp = pool_batches(xs, p)
                    outputs = [[m(xp) if j == i else None for j in range(k)] for i, m in enumerate(models)]
                else:
                    need_all = cfg.lambda_col and k > 1
                    outputs = [[m(xs[j]) if (need_all or j == i) else None for j in range(k)] for i, m in enumerate(models)]
                for i in range(k):
                    sup, col = _synthetic_terms(i, outputs, y, cfg)
                    losses[i] = cfg.lambda_sup * sup if col is None else cfg.lambda_sup * sup + cfg.lambda_col * col
                    acc.add(i, "sup", sup.item())
                    acc.add(i, "col", 0.0 if col is None else col.item())
            if "real" in group and use_real and r > 0:
                x = lr_patches(cfg.batch_size)
                if cfg.teacher_refresh > 1 and real_steps % cfg.teacher_refresh == 0:
                    teachers = [copy.deepcopy(m).eval() for m in models]
                label = pseudo_label(teachers, x)
                for i, m in enumerate(models):
                    ada = sup_loss(m(x), label.y_hat)
                    losses[i] = losses[i] + cfg.lambda_ada * r * ada
                    acc.add(i, "ada", ada.item())
                real_steps += 1
            if all(isinstance(v, float) for v in losses):
                continue
            total = sum(losses)
            _check_loss(total, p, models, checkpoint_dir, cfg)
            phase_opts = real_opts if group == ("real",) else opts
            for o in phase_opts:
                o.zero_grad(set_to_none=True)
            total.backward()
            for o in phase_opts:
                o.step()

        last = p == cfg.steps - 1
        if val_pairs and ((p + 1) % cfg.val_every == 0 or last):
            scores = validate(models, val_pairs)
            row = {"iteration": p + 1}
            row.update({f"psnr_{i}": s for i, s in enumerate(scores)})
            row["psnr_best"] = max(scores)
            row.update(acc.flush())
            curves.append(row)

    if [param_checksum(g) for g in ens] != frozen:
        raise InvariantViolation("a frozen degradation generator changed during SR training")
    for m in models:
        m.eval()
    if checkpoint_dir is not None:
        save_models(models, checkpoint_dir, cfg=cfg)
    return models, curves


def _phase_groups(alternation, joint):
    """Update groups per iteration: one joint update, or one per listed phase."""
    if joint:
        return [tuple(dict.fromkeys(alternation))]
    return [(phase,) for phase in alternation]


class _Accumulator:
    def __init__(self, k):
        self.k = k
        self.sums = {}

    def add(self, i, name, v):
        key = f"{name}_{i}"
        s, n = self.sums.get(key, (0.0, 0))
        self.sums[key] = (s + v, n + 1)

    def flush(self):
        out = {}
        for name in ("sup", "col", "ada"):
            for i in range(self.k):
                s, n = self.sums.get(f"{name}_{i}", (0.0, 0))
                out[f"{name}_{i}"] = s / n if n else 0.0
        self.sums = {}
        return out


def write_curves_csv(curves, path):
    if not curves:
        Path(path).write_text("")
        return
    fields = list(curves[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for row in curves:
            w.writerow([row[c] if c == "iteration" else repr(float(row[c])) for c in fields])


def read_curves_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]


def save_models(models, directory, cfg=None, config_hash=None, **meta):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(models):
        path = directory / f"sr_{i}.pt"
        torch.save(
            {
                "format_version": FORMAT_VERSION,
                "kind": "sr_model",
                "index": i,
                "model_config": m.config,
                "state_dict": m.state_dict(),
                "config_hash": config_hash,
                "train_config": asdict(cfg) if cfg is not None else None,
                "meta": meta,
            },
            path,
        )
        paths.append(path)
    return paths


def load_model(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "sr_model" or payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path} is not an SR checkpoint of format {FORMAT_VERSION}")
    model = SRModel(**payload["model_config"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
