"""Command-line entry points.

Every command exits 0 on success; on failure it prints a single
machine-parseable line `<category>: <message>` to stderr and exits nonzero.
The environment variable SMML_SEED overrides any config-file seed.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import evaluation, phantom, srn
from . import trainer as trainer_mod
from .backbone import load_checkpoint
from .errors import ConfigurationError, IOError_, SmmlError


def _load_yaml(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise IOError_(f"missing config file: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse {p}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{p} must contain a mapping at top level")
    return data


def _seed_override(seed: int) -> int:
    env = os.environ.get("SMML_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigurationError(f"SMML_SEED must be an integer, got {env!r}") from e
    return seed


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SmmlError as e:
            click.echo(f"{e.category}: {e}", err=True)
            sys.exit(1)
    return wrapper


def _load_split(data_dir, split: str):
    samples, splits = phantom.load_dataset(data_dir)
    if split not in splits or not splits[split]:
        raise ConfigurationError(f"dataset at {data_dir} has no '{split}' split")
    return [samples[sid] for sid in splits[split]]


@click.group()
def main():
    """Desk-scale masked mutual learning for multi-modal segmentation."""


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_cli_errors
def gen_data(config_path, out_dir):
    """Generate a phantom dataset with train/val/test splits."""
    raw = _load_yaml(config_path)
    fractions = tuple(raw.pop("fractions", (0.8, 0.1, 0.1)))
    cfg = phantom.PhantomConfig(**{**raw, "grid": tuple(raw.get("grid", (16, 16, 16)))})
    cfg.seed = _seed_override(cfg.seed)
    samples = phantom.generate_phantom(cfg)
    train, val, test = phantom.split_dataset(samples, fractions, cfg.seed)
    splits = {"train": [s.subject_id for s in train],
              "val": [s.subject_id for s in val],
              "test": [s.subject_id for s in test]}
    phantom.save_dataset(samples, out_dir, splits)
    meta = {"K": cfg.K, "C": cfg.C, "grid": list(cfg.grid), "seed": cfg.seed,
            "noise_std": cfg.noise_std, "visibility": cfg.visibility.tolist()}
    (Path(out_dir) / "generator.json").write_text(json.dumps(meta, indent=2))
    click.echo(f"wrote {len(samples)} subjects to {out_dir}")


@main.command("build-priors")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--noise", "noise_rate", default=0.3, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path())
@_cli_errors
def build_priors(data_dir, noise_rate, seed, out_dir):
    """Precompute synthetic-oracle semantic priors for every subject."""
    gen_meta_path = Path(data_dir) / "generator.json"
    if not gen_meta_path.exists():
        raise IOError_(f"missing generator metadata: {gen_meta_path}")
    meta = json.loads(gen_meta_path.read_text())
    samples, _ = phantom.load_dataset(data_dir)
    provider = srn.SyntheticOraclePriorProvider(
        noise_rate, np.array(meta["visibility"]), _seed_override(seed))
    root = Path(out_dir) if out_dir else Path(data_dir) / "priors"
    srn.build_prior_cache(samples.values(), provider, root)
    click.echo(f"wrote priors for {len(samples)} subjects to {root}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--priors", "prior_dir", default=None, type=click.Path())
@click.option("--resume", is_flag=True)
@click.option("--plot", is_flag=True, help="emit a loss-curve PNG next to the log")
@_cli_errors
def train_cmd(config_path, data_dir, out_dir, prior_dir, resume, plot):
    """Train the dual-branch model on the dataset's train split."""
    cfg = trainer_mod.TrainConfig.from_dict(_load_yaml(config_path))
    cfg.seed = _seed_override(cfg.seed)
    train_samples = _load_split(data_dir, "train")
    priors = Path(prior_dir) if prior_dir else Path(data_dir) / "priors"
    if cfg.use_srn and not priors.exists():
        raise IOError_(f"prior cache not found at {priors}; run build-priors first")
    ckpt = trainer_mod.train(cfg, train_samples, priors if cfg.use_srn else None,
                             out_dir, resume=resume)
    if plot:
        _plot_losses(Path(out_dir) / "loss_log.csv", Path(out_dir) / "loss_curves.png")
    click.echo(f"checkpoint at {ckpt}")


def _plot_losses(log_path: Path, png_path: Path):
    import csv as _csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(log_path, newline="") as f:
        rows = list(_csv.DictReader(f))
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(8, 5))
    for col in ("task1", "task2", "total1", "total2"):
        ax.plot(steps, [float(r[col]) for r in rows], label=col, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


@main.command("eval")
@click.option("--checkpoint", "ckpt_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "markdown"]))
@_cli_errors
def eval_cmd(ckpt_dir, data_dir, report_path, fmt):
    """Score a checkpoint over every modality subset on the test split."""
    branches, _ = load_checkpoint(ckpt_dir)
    test_samples = _load_split(data_dir, "test")
    report = evaluation.evaluate_all_subsets(test_samples, branches)
    evaluation.emit_report(report, report_path, fmt)
    click.echo(f"grand mean DSC {report.grand_mean:.1f}% -> {report_path}")


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--priors", "prior_dir", default=None, type=click.Path())
@_cli_errors
def ablate_cmd(config_path, data_dir, out_dir, prior_dir):
    """Train and score the component-removal variants with shared seeds."""
    cfg = trainer_mod.TrainConfig.from_dict(_load_yaml(config_path))
    cfg.seed = _seed_override(cfg.seed)
    train_samples = _load_split(data_dir, "train")
    test_samples = _load_split(data_dir, "test")
    priors = Path(prior_dir) if prior_dir else Path(data_dir) / "priors"
    rows = evaluation.ablate(cfg, train_samples, test_samples, priors, out_dir)
    for r in rows:
        click.echo(f"{r['variant']:>16}  WT {r['WT']:5.1f}  TC {r['TC']:5.1f}  "
                   f"ET {r['ET']:5.1f}  mean {r['mean']:5.1f}")


if __name__ == "__main__":
    main()
