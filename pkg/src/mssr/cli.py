"""Command-line entry point: ``mssr [global flags] <verb> [verb flags]``.

Exit codes: 0 ok, 2 invalid config, 3 missing input, 4 divergence,
5 stale artifact.
"""
from __future__ import annotations

import logging
import sys

import click
import torch

from . import pipeline
from .config import ABLATIONS, load_config
from .errors import MSSRError


class _Ctx:
    def __init__(self, config, seed, preset, out):
        self.config, self.seed, self.preset, self.out = config, seed, preset, out

    def load(self, **cli):
        return load_config(self.config, preset=self.preset, seed=self.seed, out=self.out, **cli)


def _run(ctx_obj: _Ctx, fn, *args, **cli):
    try:
        cfg = ctx_obj.load(**cli)
        manifest = fn(cfg, *args)
    except MSSRError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)
    click.echo(f"{manifest.stage}: {len(manifest.outputs)} outputs under {cfg.run_dir()}")


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML experiment config.")
@click.option("--seed", type=int, default=None, help="Global seed.")
@click.option("--preset", type=click.Choice(["paper", "desk"]), default=None, help="Named hyperparameter preset.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Root for run directories.")
@click.option("--threads", type=int, default=1, show_default=True, help="torch intra-op threads; 1 is the reproducible mode.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, seed, preset, out, threads, verbose):
    """Probabilistic degradation generators and collaborative SR training."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(threads)
    ctx.obj = _Ctx(config, seed, preset, out)


@main.command()
@click.pass_obj
def prepare(obj):
    """Render or index the corpus and write split manifests."""
    _run(obj, pipeline.prepare)


@main.command("train-degraders")
@click.pass_obj
def train_degraders(obj):
    """Train the K degradation generators adversarially."""
    _run(obj, pipeline.train_degraders)


_arm = click.option("--ablation", type=click.Choice(ABLATIONS), default=None, help="Ablation arm (default from config).")


@main.command("train-sr")
@_arm
@click.pass_obj
def train_sr(obj, ablation):
    """Train the SR models against the frozen generators."""
    _run(obj, pipeline.train_sr, ablation)


@main.command()
@_arm
@click.pass_obj
def evaluate(obj, ablation):
    """PSNR/SSIM reports per model plus the best-of-K summary."""
    _run(obj, pipeline.evaluate, ablation)


@main.command()
@_arm
@click.pass_obj
def robustness(obj, ablation):
    """Sweep test-time input noise and write curves and plots."""
    _run(obj, pipeline.robustness, ablation)


@main.command()
@click.option("--arms", default=",".join(ABLATIONS), show_default=True, help="Comma-separated arms.")
@click.pass_obj
def ablate(obj, arms):
    """Train and evaluate each ablation arm and tabulate the results."""
    names = tuple(a.strip() for a in arms.split(",") if a.strip())
    bad = [a for a in names if a not in ABLATIONS]
    if bad:
        click.echo(f"error: unknown arms {bad}; valid: {', '.join(ABLATIONS)}", err=True)
        sys.exit(2)
    _run(obj, pipeline.ablate, names)


if __name__ == "__main__":
    main()
