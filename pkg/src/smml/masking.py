"""Modality dropout masks: sampling, feature zero-substitution, and the
canonical enumeration of nonempty modality subsets used by the evaluator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError, ValidationError

GLYPH_PRESENT = "●"  # ●
GLYPH_ABSENT = "○"   # ○


@dataclass(frozen=True)
class ModalityMask:
    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError(f"mask bits must be 0/1, got {self.bits}")

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def num_present(self) -> int:
        return sum(self.bits)

    def glyphs(self) -> str:
        return "".join(GLYPH_PRESENT if b else GLYPH_ABSENT for b in self.bits)

    @classmethod
    def from_glyphs(cls, s: str) -> "ModalityMask":
        return cls(tuple(1 if ch == GLYPH_PRESENT else 0 for ch in s))

    def tensor(self, **kwargs) -> torch.Tensor:
        return torch.tensor(self.bits, **kwargs)


def sample_mask(rng: np.random.Generator, K: int) -> ModalityMask:
    """Uniform draw over the 2^K - 1 nonempty modality subsets."""
    if K < 2:
        raise ConfigurationError(f"K must be >= 2, got {K}")
    v = int(rng.integers(1, 2**K))
    return ModalityMask(tuple((v >> k) & 1 for k in range(K)))


def apply_mask(features: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
    """Zero the feature slices of absent modalities; modality axis first
    (or second when a batch axis is present)."""
    mod_axis = 1 if features.dim() == 6 else 0
    if features.shape[mod_axis] != mask.K:
        raise ShapeError(
            f"features have {features.shape[mod_axis]} modalities, mask has {mask.K}"
        )
    shape = [1] * features.dim()
    shape[mod_axis] = mask.K
    m = mask.tensor(dtype=features.dtype, device=features.device).view(shape)
    return features * m


def enumerate_subsets(K: int) -> list[ModalityMask]:
    """All nonempty subsets, ascending by popcount then by binary value
    (bit 0 = modality 0)."""
    if K < 2:
        raise ConfigurationError(f"K must be >= 2, got {K}")
    values = sorted(range(1, 2**K), key=lambda v: (bin(v).count("1"), v))
    return [ModalityMask(tuple((v >> k) & 1 for k in range(K))) for v in values]
