"""Semantic-guided refinement wiring.

Semantic priors are per-modality class-score volumes supplied by a pluggable
provider: a synthetic oracle that degrades ground truth with
modality-dependent noise, or precomputed volumes read from a cache on disk.
Priors for absent modalities are zeroed, concatenated with the initial
logits, and refined; a KL term then pulls the initial prediction toward the
refined one.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, FormatError, IOError_, ShapeError
from .masking import ModalityMask

logger = logging.getLogger(__name__)


def synthetic_oracle_prior(labels: np.ndarray, modality: int, noise_rate: float,
                           visibility_row: np.ndarray, rng: np.random.Generator,
                           C: int | None = None) -> np.ndarray:
    """One-hot ground truth with label flips: each voxel is resampled
    uniformly over all classes with probability noise_rate * (1 - visibility),
    so a modality's prior is most corrupted on the classes it sees worst."""
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigurationError(f"noise_rate must lie in [0, 1], got {noise_rate}")
    visibility_row = np.asarray(visibility_row, dtype=np.float64)
    if C is None:
        C = len(visibility_row)
    labels = labels.astype(np.int64)
    flip_p = noise_rate * (1.0 - visibility_row[labels])
    flips = rng.random(labels.shape) < flip_p
    resampled = rng.integers(0, C, size=labels.shape)
    noisy = np.where(flips, resampled, labels)
    prior = np.zeros((C, *labels.shape), dtype=np.float32)
    np.put_along_axis(prior, noisy[None], 1.0, axis=0)
    return prior


def save_prior(prior: np.ndarray, dir_path, modality: int) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"C": prior.shape[0], "dims": list(prior.shape[1:]), "dtype": "<f4"}
    (d / "prior_meta.json").write_text(json.dumps(meta))
    prior.astype("<f4").tofile(d / f"prior_{modality}.raw")


def file_prior(dir_path, subject_id: str, modality: int) -> np.ndarray:
    """Load a cached prior volume; values outside [0, 1] are clamped."""
    d = Path(dir_path) / subject_id
    meta_path = d / "prior_meta.json"
    f = d / f"prior_{modality}.raw"
    if not meta_path.exists():
        raise IOError_(f"missing prior metadata: {meta_path}")
    if not f.exists():
        raise IOError_(f"missing prior file: {f}")
    meta = json.loads(meta_path.read_text())
    C, dims = meta["C"], tuple(meta["dims"])
    raw = np.fromfile(f, dtype="<f4")
    if raw.size != C * int(np.prod(dims)):
        raise FormatError(
            f"{f}: expected {C}x{dims} float32 values, found {raw.size}"
        )
    prior = raw.reshape(C, *dims)
    if prior.min() < 0.0 or prior.max() > 1.0:
        logger.warning("%s: prior values outside [0, 1]; clamping", f)
        prior = np.clip(prior, 0.0, 1.0)
    return prior


class PriorProvider:
    """Produces a [C, H, W, Z] class-score volume for (sample, modality)."""

    def get(self, sample, modality: int) -> np.ndarray:
        raise NotImplementedError


class SyntheticOraclePriorProvider(PriorProvider):
    """Deterministic per (seed, subject, modality) oracle priors."""

    def __init__(self, noise_rate: float, visibility: np.ndarray, seed: int):
        if not 0.0 <= noise_rate <= 1.0:
            raise ConfigurationError(f"noise_rate must lie in [0, 1], got {noise_rate}")
        self.noise_rate = noise_rate
        self.visibility = np.asarray(visibility, dtype=np.float64)
        self.seed = seed

    def get(self, sample, modality: int) -> np.ndarray:
        key = f"{self.seed}/{sample.subject_id}/{modality}".encode()
        digest = hashlib.sha256(key).digest()
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, modality,
                                    int.from_bytes(digest[:8], "little")])
        )
        return synthetic_oracle_prior(
            sample.labels, modality, self.noise_rate, self.visibility[modality], rng
        )


class FilePriorProvider(PriorProvider):
    def __init__(self, root):
        self.root = Path(root)

    def get(self, sample, modality: int) -> np.ndarray:
        return file_prior(self.root, sample.subject_id, modality)


def build_prior_cache(samples, provider: PriorProvider, root) -> None:
    """Precompute and store priors for every (subject, modality)."""
    root = Path(root)
    for s in samples:
        K = s.volumes.shape[0]
        for k in range(K):
            save_prior(provider.get(s, k), root / s.subject_id, k)


def mask_priors(priors: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
    """Zero the prior slices of absent modalities. priors [K, C, H, W, Z] or
    [B, K, C, H, W, Z]."""
    mod_axis = 1 if priors.dim() == 6 else 0
    if priors.shape[mod_axis] != mask.K:
        raise ShapeError(f"prior stack has {priors.shape[mod_axis]} modalities, mask has {mask.K}")
    shape = [1] * priors.dim()
    shape[mod_axis] = mask.K
    return priors * mask.tensor(dtype=priors.dtype, device=priors.device).view(shape)


def combine_for_refinement(logits: torch.Tensor, priors: torch.Tensor) -> torch.Tensor:
    """Channel layout: [prior mod 0 class 0..C-1, ..., prior mod K-1, logits]."""
    if priors.dim() == logits.dim() + 1:
        spatial = priors.shape[-3:]
        flat = priors.reshape(*priors.shape[:-5], -1, *spatial)
        return torch.cat([flat, logits], dim=-4)
    raise ShapeError(
        f"priors rank {priors.dim()} incompatible with logits rank {logits.dim()}"
    )


def refine(logits: torch.Tensor, priors: torch.Tensor, refiner) -> torch.Tensor:
    """Run the refinement net on masked priors concatenated with logits."""
    return refiner(combine_for_refinement(logits, priors))


def refine_consistency_loss(initial: torch.Tensor, refined: torch.Tensor) -> torch.Tensor:
    """Voxel-mean KL from the initial softmax to the (detached) refined
    softmax; gradients reach only the initial logits."""
    if initial.shape != refined.shape:
        raise ShapeError(f"shapes differ: {tuple(initial.shape)} vs {tuple(refined.shape)}")
    logp = F.log_softmax(initial, dim=-4)
    logq = F.log_softmax(refined.detach(), dim=-4)
    return (logp.exp() * (logp - logq)).sum(dim=-4).mean()
