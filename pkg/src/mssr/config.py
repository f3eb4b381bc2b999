"""Experiment configuration: schema, named presets, file and environment layering.

Resolution order, later wins: preset defaults, config file, ``MSSR__``
environment overrides, explicit command-line flags. Environment keys use
double underscores for nesting, e.g. ``MSSR__COLLAB__STEPS=200``.
"""
from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .collab import CollabConfig
from .errors import ConfigError, MissingInputError
from .unpaired import DegraderTrainConfig
from .utils import stable_hash

ENV_PREFIX = "MSSR__"
ABLATIONS = ("single", "naive", "cl_no_ada", "full")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    mode: Literal["oracle", "files"] = "oracle"
    root: str | None = None
    n_hr: int = Field(64, ge=1)
    n_lr: int = Field(64, ge=1)
    image_size: int = Field(128, ge=8)
    channels: int = Field(3, ge=1)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    patch_size_hr: int = Field(64, ge=4)
    scale: Literal[2, 4] = 4

    @model_validator(mode="after")
    def _check(self):
        if abs(sum(self.split) - 1) > 1e-6 or min(self.split) < 0:
            raise ValueError("split ratios must be nonnegative and sum to 1")
        if self.patch_size_hr % self.scale:
            raise ValueError(f"patch_size_hr {self.patch_size_hr} is not divisible by scale {self.scale}")
        if self.mode == "files" and not self.root:
            raise ValueError("files mode needs data.root")
        return self


class OracleSection(_Strict):
    noise_sigma_range: tuple[float, float] = (5.0, 25.0)
    downsample_kernel: str = "bicubic-a-0.5-antialiased-reflect"


class EnsembleSection(_Strict):
    generators: list[str] = ["residual_chain:width=32", "attention_strided:width=32"]
    mode: Literal["shared_spatial", "input_dependent"] = "shared_spatial"

    @field_validator("generators")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one generator is required")
        return v


class DegraderSection(_Strict):
    adv_weight: float = Field(1.0, ge=0)
    cycle_weight: float = Field(10.0, ge=0)
    lowpass_weight: float = Field(0.0, ge=0)
    lowpass_std: float = Field(2.0, ge=0)
    steps: int = Field(2000, ge=0)
    lr: float = Field(1e-4, gt=0)
    sigma_lr: float | None = 3e-2
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = Field(8, ge=1)
    disc_width: int = Field(32, ge=1)
    divergence_threshold: float = Field(1e4, gt=0)
    checkpoint_every: int = Field(100, ge=1)


class SRSection(_Strict):
    width: int = Field(48, ge=1)
    n_blocks: int = Field(6, ge=0)


class CollabSection(_Strict):
    lambda_sup: float = Field(1.0, ge=0)
    lambda_col: float = Field(0.01, ge=0)
    lambda_ada: float = Field(10.0, ge=0)
    P: int = Field(10_000, ge=1)
    steps: int = Field(10_000, ge=0)
    alternation: tuple[Literal["synthetic", "real"], ...] = ("synthetic", "real")
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    val_every: int = Field(500, ge=1)
    teacher_refresh: int = Field(1, ge=1)
    real_optimizer: Literal["shared", "separate"] = "shared"
    joint: bool = False


class MetricsSection(_Strict):
    crop: int = Field(0, ge=0)
    eval_split: Literal["train", "val", "test"] = "test"
    robustness_grid: list[float] = [0.0, 5.0, 10.0, 15.0, 20.0]
    fidelity_samples: int = Field(200, ge=100)

    @field_validator("robustness_grid")
    @classmethod
    def _grid(cls, v):
        if not v or any(s < 0 for s in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("robustness_grid must be nonempty, nonnegative and strictly increasing")
        return v


class ExperimentConfig(_Strict):
    preset: Literal["paper", "desk"] = "desk"
    seed: int = 0
    out: str = "runs"
    ablation: Literal["single", "naive", "cl_no_ada", "full"] = "full"
    data: DataSection = DataSection()
    oracle: OracleSection = OracleSection()
    ensemble: EnsembleSection = EnsembleSection()
    degrader: DegraderSection = DegraderSection()
    sr: SRSection = SRSection()
    collab: CollabSection = CollabSection()
    metrics: MetricsSection = MetricsSection()

    # hashing -------------------------------------------------------------

    def hashable(self) -> dict:
        """Everything that determines results; output location is excluded."""
        d = self.model_dump(mode="json")
        d.pop("out")
        return d

    @property
    def config_hash(self) -> str:
        return stable_hash(self.hashable())

    def run_hash(self) -> str:
        """Hash naming the run directory; ablation arm and metric options excluded."""
        d = self.hashable()
        d.pop("metrics")
        d.pop("ablation")
        return stable_hash(d)

    def degrader_hash(self) -> str:
        d = self.hashable()
        return stable_hash({k: d[k] for k in ("seed", "data", "oracle", "ensemble", "degrader")})

    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.preset}-{self.run_hash()[:8]}-s{self.seed}"

    # runtime objects -----------------------------------------------------

    def degrader_config(self) -> DegraderTrainConfig:
        return DegraderTrainConfig(**self.degrader.model_dump(), seed=self.seed)

    def collab_config(self, ablation: str | None = None) -> CollabConfig:
        ablation = ablation or self.ablation
        kw = self.collab.model_dump()
        kw.update(seed=self.seed, K=len(self.ensemble.generators))
        kw.update(ablation_overrides(ablation))
        return CollabConfig(**kw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def ablation_overrides(ablation: str) -> dict:
    """Collaborative-config changes for each ablation arm."""
    if ablation == "full":
        return {}
    if ablation == "cl_no_ada":
        return {"lambda_ada": 0.0}
    if ablation == "naive":
        return {"lambda_col": 0.0, "lambda_ada": 0.0, "pooled": True}
    if ablation == "single":
        return {"lambda_col": 0.0, "lambda_ada": 0.0, "K": 1}
    raise ConfigError(f"unknown ablation {ablation!r}; valid: {', '.join(ABLATIONS)}")


PRESETS: dict[str, dict] = {
    "desk": {},
    "paper": {
        "collab": {"lambda_sup": 1.0, "lambda_col": 0.01, "lambda_ada": 10.0, "P": 1_000_000, "lr": 1e-5, "batch_size": 16},
        "data": {"scale": 4},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None) -> dict:
    """Nested override dict from ``MSSR__SECTION__KEY=value`` variables.

    Values are parsed as YAML scalars or flow collections, so ``[0, 5]``,
    ``1e-4`` and ``true`` keep their types.
    """
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key} conflicts with another override")
        # field names like P are case sensitive; map back where needed
        leaf = "P" if path[-1] == "p" else path[-1]
        node[leaf] = yaml.safe_load(raw)
    return tree


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)


def build_config(file_data: dict | None = None, preset: str | None = None, seed: int | None = None,
                 out: str | None = None, environ=None, **cli) -> ExperimentConfig:
    file_data = dict(file_data or {})
    env = env_overrides(environ)
    chosen = preset or env.get("preset") or file_data.get("preset") or "desk"
    if chosen not in PRESETS:
        raise ConfigError(f"preset: unknown preset {chosen!r}; valid: {', '.join(PRESETS)}")
    merged = deep_merge(PRESETS[chosen], file_data)
    merged = deep_merge(merged, env)
    flags = {k: v for k, v in dict(preset=chosen, seed=seed, out=out, **cli).items() if v is not None}
    merged = deep_merge(merged, flags)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None


def load_config(path=None, **kwargs) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
    return build_config(data, **kwargs)
