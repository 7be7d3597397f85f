"""Inference, Dice scoring over nested regions, and the 15-subset report.

Regions follow the nested convention: whole tumor (necrosis, edema,
enhancing), tumor core (necrosis, enhancing), enhancing tumor. Reports carry
DSC percentages per (modality subset x region) with per-region averages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import trainer as trainer_mod
from .backbone import Branch, load_checkpoint
from .errors import ConfigurationError, IOError_, ValidationError
from .masking import ModalityMask, enumerate_subsets
from .phantom import zscore_normalize

REGIONS = {
    "WT": frozenset({1, 2, 3}),
    "TC": frozenset({1, 3}),
    "ET": frozenset({3}),
}
REGION_NAMES = ("WT", "TC", "ET")


@dataclass
class EvalReport:
    masks: list[ModalityMask]
    table: np.ndarray  # [n_subsets, 3] DSC percentages
    regions: tuple[str, ...] = REGION_NAMES

    @property
    def region_averages(self) -> np.ndarray:
        return self.table.mean(axis=0)

    @property
    def grand_mean(self) -> float:
        return float(self.table.mean())


def predict(sample, mask: ModalityMask, branches: dict[str, Branch]):
    """Mean-of-branch-softmax inference under a modality subset.

    Returns (class probabilities [C, H, W, Z], hard labels [H, W, Z]);
    argmax ties resolve to the lowest class index.
    """
    if mask.num_present == 0:
        raise ValidationError("prediction requires at least one present modality")
    dtype = next(iter(branches.values())).parameters().__next__().dtype
    vols = torch.from_numpy(zscore_normalize(sample.volumes)).to(dtype).unsqueeze(0)
    probs = []
    with torch.no_grad():
        for br in branches.values():
            br.eval()
            logits, _ = br.forward_masked(vols, mask)
            probs.append(torch.softmax(logits[0], dim=0))
    mean_probs = torch.stack(probs).mean(dim=0).numpy()
    return mean_probs, np.argmax(mean_probs, axis=0)


def region_dsc(pred_labels: np.ndarray, gt_labels: np.ndarray, region_classes) -> float:
    """Dice over region-membership binarized maps; empty-vs-empty counts 1."""
    classes = np.array(sorted(region_classes))
    p = np.isin(pred_labels, classes)
    g = np.isin(gt_labels, classes)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def evaluate_all_subsets(test_samples, branches: dict[str, Branch]) -> EvalReport:
    """DSC per (modality subset x region), averaged over subjects."""
    if not test_samples:
        raise ConfigurationError("test split is empty")
    K = next(iter(branches.values())).arch.K
    masks = enumerate_subsets(K)
    table = np.zeros((len(masks), len(REGION_NAMES)), dtype=np.float64)
    for mi, mask in enumerate(masks):
        for s in test_samples:
            _, pred = predict(s, mask, branches)
            for ri, rname in enumerate(REGION_NAMES):
                table[mi, ri] += region_dsc(pred, s.labels, REGIONS[rname])
    table *= 100.0 / len(test_samples)
    return EvalReport(masks=masks, table=table)


def emit_report(report: EvalReport, path, fmt: str = "csv") -> Path:
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["mask"] + list(report.regions))
                for mask, row in zip(report.masks, report.table):
                    w.writerow([mask.glyphs()] + [repr(float(v)) for v in row])
                w.writerow(["Avg"] + [repr(float(v)) for v in report.region_averages])
        elif fmt == "markdown":
            lines = ["| mask | " + " | ".join(report.regions) + " |",
                     "|---" * (1 + len(report.regions)) + "|"]
            for mask, row in zip(report.masks, report.table):
                lines.append("| " + mask.glyphs() + " | "
                             + " | ".join(f"{v:.1f}" for v in row) + " |")
            lines.append("| Avg | " + " | ".join(f"{v:.1f}" for v in report.region_averages) + " |")
            path.write_text("\n".join(lines) + "\n")
        else:
            raise ConfigurationError(f"unknown report format: {fmt}")
    except OSError as e:
        raise IOError_(f"cannot write report to {path}: {e}") from e
    return path


def parse_report_csv(path) -> EvalReport:
    """Inverse of emit_report(fmt='csv'), to full stored precision."""
    path = Path(path)
    if not path.exists():
        raise IOError_(f"missing report file: {path}")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, *body = rows
    regions = tuple(header[1:])
    masks, data = [], []
    for row in body:
        if row[0] == "Avg":
            continue
        masks.append(ModalityMask.from_glyphs(row[0]))
        data.append([float(v) for v in row[1:]])
    return EvalReport(masks=masks, table=np.array(data, dtype=np.float64), regions=regions)


ABLATION_VARIANTS = {
    "baseline_single": dict(dual_branch=False, lambda_pc=0.0, lambda_fc=0.0,
                            lambda_refine=0.0, lambda_task_refine=0.0),
    "dual_branch": dict(lambda_pc=0.0, lambda_fc=0.0, lambda_refine=0.0,
                        lambda_task_refine=0.0),
    "dual_pbc": dict(lambda_fc=0.0, lambda_refine=0.0, lambda_task_refine=0.0),
    "dual_frc": dict(lambda_pc=0.0, lambda_refine=0.0, lambda_task_refine=0.0),
    "dual_srn": dict(lambda_pc=0.0, lambda_fc=0.0),
    "full": dict(),
}


def ablate(config, train_samples, test_samples, prior_root, out_dir,
           variants: dict[str, dict] | None = None) -> list[dict]:
    """Train each component-removal variant with identical seeds and score
    it over every modality subset."""
    variants = variants if variants is not None else ABLATION_VARIANTS
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in variants.items():
        vcfg = replace(config, **overrides)
        ckpt = trainer_mod.train(vcfg, train_samples, prior_root, out / name)
        branches, _ = load_checkpoint(ckpt)
        report = evaluate_all_subsets(test_samples, branches)
        avg = report.region_averages
        rows.append({"variant": name,
                     "WT": float(avg[0]), "TC": float(avg[1]), "ET": float(avg[2]),
                     "mean": report.grand_mean})
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["variant", "WT", "TC", "ET", "mean"])
        w.writeheader()
        w.writerows(rows)
    return rows
