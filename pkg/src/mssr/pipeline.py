"""Pipeline stages behind the command-line verbs.

Every stage reads and writes under ``cfg.run_dir()`` and records a
``RunManifest`` in ``<run>/manifests/``. Layout::

    config.yaml
    corpus/{hr,lr,gt_lr}/*.png, corpus/manifest.json     (oracle mode)
    degraders/<arch_id>.pt, degraders/<arch_id>_log.csv
    sr/<arm>/sr_<i>.pt, sr/<arm>/curves.csv
    eval/<arm>/model_<i>.{json,csv}, eval/<arm>/metrics.json
    robustness/<arm>/curve_<i>.{json,csv,png}
    ablate/ablation.json
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import collab
from .config import ABLATIONS, ExperimentConfig, ablation_overrides
from .data import OracleDegradation, load_corpus, make_oracle_corpus, paired_split
from .errors import ConfigError, DivergenceError, MissingInputError, StaleArtifactError
from .generator import GeneratorEnsemble, build_ensemble, load_generator, save_generator
from .metrics import MetricReport, evaluate_pairs, robustness_sweep
from .unpaired import make_discriminator, member_config, train_degrader, write_log_csv
from .utils import stable_hash

log = logging.getLogger(__name__)

MANIFEST_DIR = "manifests"


@dataclass
class RunManifest:
    config_hash: str
    stage: str
    seed: int
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def check(self, run_dir):
        missing = [p for p in self.outputs if not (Path(run_dir) / p).exists()]
        if missing:
            raise MissingInputError(f"stage {self.stage} lists outputs that do not exist: {missing}")

    def write(self, run_dir) -> Path:
        self.check(run_dir)
        path = Path(run_dir) / MANIFEST_DIR / f"{self.stage}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def read_manifests(run_dir) -> list[RunManifest]:
    d = Path(run_dir) / MANIFEST_DIR
    return [RunManifest.read(p) for p in sorted(d.glob("*.json"))] if d.is_dir() else []


def find_orphans(run_dir) -> list[str]:
    """Files under the run directory that no manifest lists as an output."""
    run_dir = Path(run_dir)
    owned: dict[str, int] = {}
    for m in read_manifests(run_dir):
        for p in m.outputs:
            owned[p] = owned.get(p, 0) + 1
    orphans = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_dir():
            continue
        rel = p.relative_to(run_dir).as_posix()
        if rel.startswith(MANIFEST_DIR + "/"):
            continue
        if rel not in owned:
            orphans.append(rel)
    return orphans


def duplicate_owners(run_dir) -> list[str]:
    counts: dict[str, int] = {}
    for m in read_manifests(run_dir):
        for p in m.outputs:
            counts[p] = counts.get(p, 0) + 1
    return sorted(p for p, n in counts.items() if n > 1)


class _Stage:
    """Collects inputs/outputs and writes the manifest on exit."""

    def __init__(self, cfg: ExperimentConfig, stage: str):
        self.cfg = cfg
        self.stage = stage
        self.run_dir = cfg.run_dir()
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def rel(self, path) -> str:
        path = Path(path)
        try:
            return path.relative_to(self.run_dir).as_posix()
        except ValueError:
            return str(path)

    def add_input(self, *paths):
        self.inputs += [self.rel(p) for p in paths]

    def add_output(self, *paths):
        self.outputs += [self.rel(p) for p in paths]

    def finish(self) -> RunManifest:
        m = RunManifest(
            config_hash=self.cfg.config_hash,
            stage=self.stage,
            seed=self.cfg.seed,
            inputs=sorted(set(self.inputs)),
            outputs=sorted(set(self.outputs)),
            wall_clock=round(time.perf_counter() - self.t0, 3),
        )
        m.write(self.run_dir)
        return m


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


def corpus_root(cfg: ExperimentConfig) -> Path:
    if cfg.data.mode == "files":
        return Path(cfg.data.root)
    return cfg.run_dir() / "corpus"


def oracle_of(cfg: ExperimentConfig) -> OracleDegradation:
    return OracleDegradation(
        scale=cfg.data.scale,
        noise_sigma_range=tuple(cfg.oracle.noise_sigma_range),
        downsample_kernel=cfg.oracle.downsample_kernel,
        seed=cfg.seed,
    )


def open_corpus(cfg: ExperimentConfig):
    root = corpus_root(cfg)
    if not (root / "hr").is_dir() and not (root / "lr").is_dir():
        raise MissingInputError(f"no prepared corpus at {root}; run 'prepare' first")
    return load_corpus(root, cfg.data.split, seed=cfg.seed, patch_size_hr=cfg.data.patch_size_hr, scale=cfg.data.scale)


def prepare(cfg: ExperimentConfig) -> RunManifest:
    st = _Stage(cfg, "prepare")
    run = st.run_dir
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.yaml").write_text(cfg.to_yaml())
    st.add_output(run / "config.yaml")
    if cfg.data.mode == "oracle":
        written = make_oracle_corpus(
            corpus_root(cfg), oracle_of(cfg), n_hr=cfg.data.n_hr, n_lr=cfg.data.n_lr,
            size=cfg.data.image_size, seed=cfg.seed, channels=cfg.data.channels,
        )
        st.add_output(*written)
    elif not Path(cfg.data.root).is_dir():
        raise MissingInputError(f"data.root {cfg.data.root} does not exist")
    corpus = open_corpus(cfg)
    manifest_path = run / "corpus_manifest.json"
    corpus.write_manifest(manifest_path)
    st.add_output(manifest_path)
    if cfg.data.mode == "files":
        st.add_input(*corpus.all_hr, *corpus.all_lr)
    return st.finish()


# ---------------------------------------------------------------------------
# Degraders
# ---------------------------------------------------------------------------


def degrader_dir(cfg):
    return cfg.run_dir() / "degraders"


def _fresh_ensemble(cfg) -> GeneratorEnsemble:
    return build_ensemble(cfg.ensemble.generators, channels=cfg.data.channels, scale=cfg.data.scale,
                          seed=cfg.seed, mode=cfg.ensemble.mode)


def train_degraders(cfg: ExperimentConfig) -> RunManifest:
    st = _Stage(cfg, "train-degraders")
    corpus = open_corpus(cfg)
    st.add_input(cfg.run_dir() / "corpus_manifest.json")
    ens = _fresh_ensemble(cfg)
    out = degrader_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.degrader_config()
    h = cfg.degrader_hash()
    for k, gen in enumerate(ens):
        mcfg = member_config(base, k)
        ckpt = out / f"{gen.arch_id}.pt"
        log_path = out / f"{gen.arch_id}_log.csv"
        try:
            _, rows = train_degrader(gen, make_discriminator(mcfg, cfg.data.channels), corpus, mcfg, checkpoint_path=ckpt)
        except DivergenceError as e:
            write_log_csv(getattr(e, "rows", []), log_path)
            raise DivergenceError(f"generator {gen.arch_id} diverged: {e}; log at {log_path}", step=e.step, last_good=ckpt) from e
        save_generator(gen, ckpt, config=asdict(mcfg), config_hash=h)
        write_log_csv(rows, log_path)
        st.add_output(ckpt, log_path)
    return st.finish()


def load_ensemble(cfg: ExperimentConfig, k: int | None = None) -> tuple[GeneratorEnsemble, list[Path]]:
    specs = cfg.ensemble.generators
    k = len(specs) if k is None else k
    fresh = _fresh_ensemble(cfg)
    members, paths = [], []
    for gen in list(fresh)[:k]:
        path = degrader_dir(cfg) / f"{gen.arch_id}.pt"
        if not path.exists():
            raise MissingInputError(f"missing generator checkpoint {path}; run 'train-degraders' first")
        loaded, meta = load_generator(path)
        if meta.get("config_hash") != cfg.degrader_hash():
            raise StaleArtifactError(f"{path} was trained under a different configuration")
        members.append(loaded)
        paths.append(path)
    return GeneratorEnsemble(members), paths


# ---------------------------------------------------------------------------
# SR training
# ---------------------------------------------------------------------------


def sr_hash(cfg: ExperimentConfig, arm: str) -> str:
    d = cfg.hashable()
    d.pop("metrics")
    d["ablation"] = arm
    return stable_hash(d)


def sr_dir(cfg, arm):
    return cfg.run_dir() / "sr" / arm


def _check_arm(arm):
    if arm not in ABLATIONS:
        raise ConfigError(f"ablation: unknown arm {arm!r}; valid: {', '.join(ABLATIONS)}")
    return arm


def train_sr(cfg: ExperimentConfig, arm: str | None = None) -> RunManifest:
    arm = _check_arm(arm or cfg.ablation)
    st = _Stage(cfg, f"train-sr-{arm}")
    ccfg = cfg.collab_config(arm)
    ens, gen_paths = load_ensemble(cfg, ccfg.K)
    st.add_input(*gen_paths)
    corpus = open_corpus(cfg)
    try:
        val_pairs = paired_split(corpus, "val")
    except MissingInputError:
        log.warning("no paired validation data; curves will be empty")
        val_pairs = []
    models = collab.build_models(ccfg.K, seed=cfg.seed, channels=cfg.data.channels, scale=cfg.data.scale,
                                 width=cfg.sr.width, n_blocks=cfg.sr.n_blocks)
    out = sr_dir(cfg, arm)
    models, curves = collab.train_collab(models, ens, corpus, ccfg, val_pairs=val_pairs)
    paths = collab.save_models(models, out, cfg=ccfg, config_hash=sr_hash(cfg, arm))
    curve_path = out / "curves.csv"
    collab.write_curves_csv(curves, curve_path)
    st.add_output(*paths, curve_path)
    return st.finish()


def load_sr_models(cfg: ExperimentConfig, arm: str):
    k = cfg.collab_config(arm).K
    models, paths = [], []
    for i in range(k):
        path = sr_dir(cfg, arm) / f"sr_{i}.pt"
        if not path.exists():
            raise MissingInputError(f"missing SR checkpoint {path}; run 'train-sr' first")
        model, payload = collab.load_model(path)
        if payload.get("config_hash") != sr_hash(cfg, arm):
            raise StaleArtifactError(f"{path} does not match the current configuration (stale artifact)")
        models.append(model)
        paths.append(path)
    return models, paths


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def eval_pairs(cfg):
    corpus = open_corpus(cfg)
    pairs = paired_split(corpus, cfg.metrics.eval_split)
    if not pairs:
        raise MissingInputError(f"split {cfg.metrics.eval_split!r} has no images to evaluate")
    return pairs


def best_of(reports: list[MetricReport]) -> int:
    """Index of the best model by mean PSNR; ties go to the lower index."""
    scores = [r.aggregate["psnr"] for r in reports]
    return max(range(len(scores)), key=lambda i: (scores[i], -i))


def evaluate(cfg: ExperimentConfig, arm: str | None = None) -> RunManifest:
    arm = _check_arm(arm or cfg.ablation)
    st = _Stage(cfg, f"evaluate-{arm}")
    models, paths = load_sr_models(cfg, arm)
    st.add_input(*paths)
    pairs = eval_pairs(cfg)
    out = cfg.run_dir() / "eval" / arm
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, m in enumerate(models):
        rep = evaluate_pairs(m, pairs, meta={"model": i, "arm": arm, "split": cfg.metrics.eval_split}, crop=cfg.metrics.crop)
        rep.to_json(out / f"model_{i}.json")
        rep.to_csv(out / f"model_{i}.csv")
        st.add_output(out / f"model_{i}.json", out / f"model_{i}.csv")
        reports.append(rep)
    b = best_of(reports)
    summary = {
        "arm": arm,
        "config_hash": cfg.config_hash,
        "split": cfg.metrics.eval_split,
        "models": [r.to_dict()["aggregate"] for r in reports],
        "best": {"index": b, **reports[b].to_dict()["aggregate"]},
    }
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    st.add_output(metrics_path)
    return st.finish()


def robustness(cfg: ExperimentConfig, arm: str | None = None) -> RunManifest:
    arm = _check_arm(arm or cfg.ablation)
    st = _Stage(cfg, f"robustness-{arm}")
    models, paths = load_sr_models(cfg, arm)
    st.add_input(*paths)
    pairs = eval_pairs(cfg)
    out = cfg.run_dir() / "robustness" / arm
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(models):
        curve = robustness_sweep(m, pairs, list(cfg.metrics.robustness_grid), seed=cfg.seed)
        stem = out / f"curve_{i}"
        curve.to_json(stem.with_suffix(".json"))
        curve.to_csv(stem.with_suffix(".csv"))
        curve.plot(stem.with_suffix(".png"), label=f"{arm} model {i}")
        st.add_output(stem.with_suffix(".json"), stem.with_suffix(".csv"), stem.with_suffix(".png"))
    return st.finish()


def ablate(cfg: ExperimentConfig, arms=ABLATIONS) -> RunManifest:
    """Train and evaluate every arm, then tabulate best-of-K results."""
    table = {}
    for arm in arms:
        train_sr(cfg, arm)
        evaluate(cfg, arm)
        summary = json.loads((cfg.run_dir() / "eval" / arm / "metrics.json").read_text())
        table[arm] = {"overrides": ablation_overrides(arm), "best": summary["best"]}
    st = _Stage(cfg, "ablate")
    path = cfg.run_dir() / "ablate" / "ablation.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    st.add_input(*[cfg.run_dir() / "eval" / a / "metrics.json" for a in arms])
    st.add_output(path)
    return st.finish()


STAGES = {
    "prepare": prepare,
    "train-degraders": train_degraders,
    "train-sr": train_sr,
    "evaluate": evaluate,
    "robustness": robustness,
    "ablate": ablate,
}


def run_all(cfg: ExperimentConfig, arm: str | None = None):
    """prepare -> train-degraders -> train-sr -> evaluate, in order."""
    torch.set_num_threads(1)
    prepare(cfg)
    train_degraders(cfg)
    train_sr(cfg, arm)
    return evaluate(cfg, arm)
