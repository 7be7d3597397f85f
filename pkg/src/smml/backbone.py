"""Dual-branch segmentation networks.

Each branch owns K per-modality 3D conv encoders, a mask-aware per-voxel
attention fusion, a fused decoder back to full resolution, and a small
refinement UNet that consumes semantic prior channels plus initial logits.
The two branches never share parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, IOError_, ShapeError, ValidationError
from .masking import ModalityMask

NORM_EPS = 1e-5


@dataclass
class ArchConfig:
    K: int = 4
    C: int = 4
    enc_channels: int = 8     # d: per-modality feature channels
    fused_channels: int = 16  # d_f: fused feature channels
    levels: int = 2           # number of 2x downsamplings
    refine_channels: int = 16


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, channels), channels, eps=NORM_EPS)


class ModalityEncoder(nn.Module):
    """Single-modality encoder: stem conv then `levels` stride-2 conv blocks.

    Returns one feature map per resolution (full resolution first, deepest
    last) so the decoder can take skip connections at every scale.
    """

    def __init__(self, d: int, levels: int):
        super().__init__()
        self.levels = levels
        self.stem = nn.Sequential(nn.Conv3d(1, d, 3, padding=1), _gn(d), nn.ReLU(inplace=True))
        self.downs = nn.ModuleList(
            nn.Sequential(nn.Conv3d(d, d, 3, stride=2, padding=1), _gn(d), nn.ReLU(inplace=True))
            for _ in range(levels)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        factor = 2 ** self.levels
        if any(s % factor for s in x.shape[-3:]):
            raise ShapeError(
                f"spatial dims {tuple(x.shape[-3:])} not divisible by 2^{self.levels}"
            )
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats


class AttentionFusion(nn.Module):
    """Per-voxel modality attention. The score and value projections are
    shared across modalities, so identical inputs get identical scores and
    the modality weights reduce to uniform. Absent modalities receive a
    score of -inf before the softmax, pinning their weight to exactly 0."""

    def __init__(self, d: int, d_f: int):
        super().__init__()
        self.score = nn.Conv3d(d, 1, 1)
        self.value = nn.Conv3d(d, d_f, 1)

    def forward(self, features: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
        # features: [B, K, d, h, w, z], already zeroed for absent modalities
        B, K = features.shape[:2]
        if K != mask.K:
            raise ShapeError(f"feature stack has {K} modalities, mask has {mask.K}")
        if mask.num_present == 0:
            raise ValidationError("fusion requires at least one present modality")
        flat = features.reshape(B * K, *features.shape[2:])
        scores = self.score(flat).reshape(B, K, 1, *features.shape[3:])
        values = self.value(flat).reshape(B, K, -1, *features.shape[3:])
        present = mask.tensor(dtype=torch.bool, device=features.device).view(1, K, 1, 1, 1, 1)
        scores = scores.masked_fill(~present, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        return (weights * values).sum(dim=1)


class FusedDecoder(nn.Module):
    """Upsamples the deepest fused features back to input resolution, merging
    a fused skip connection at every intermediate scale."""

    def __init__(self, d_f: int, d: int, C: int, levels: int):
        super().__init__()
        self.levels = levels
        self.bottleneck = nn.Sequential(nn.Conv3d(d_f, d_f, 3, padding=1), _gn(d_f), nn.ReLU(inplace=True))
        self.ups = nn.ModuleList(
            nn.Sequential(nn.ConvTranspose3d(d_f, d_f, 2, stride=2), _gn(d_f), nn.ReLU(inplace=True))
            for _ in range(levels)
        )
        # skip merges and head are 1x1x1: full-resolution 3^3 convs dominate CPU cost
        self.merges = nn.ModuleList(
            nn.Sequential(nn.Conv3d(2 * d_f, d_f, 1), _gn(d_f), nn.ReLU(inplace=True))
            for _ in range(levels)
        )
        self.head = nn.Conv3d(d_f, C, 1)

    def forward(self, fused: list[torch.Tensor]) -> torch.Tensor:
        # fused: per-scale maps, full resolution first, deepest last
        if len(fused) != self.levels + 1:
            raise ShapeError(f"expected {self.levels + 1} fused scales, got {len(fused)}")
        x = self.bottleneck(fused[-1]) + fused[-1]
        for i in reversed(range(self.levels)):
            x = self.merges[i](torch.cat([self.ups[i](x), fused[i]], dim=-4))
        return self.head(x)


class RefinementNet(nn.Module):
    """Two-level UNet over concatenated prior and logit channels.

    Channel mixing at full resolution uses 1x1x1 convs; the spatial 3^3
    kernels live on the strided path where volumes are 8x smaller.
    """

    def __init__(self, in_channels: int, C: int, ch: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.enc = nn.Sequential(nn.Conv3d(in_channels, ch, 1), _gn(ch), nn.ReLU(inplace=True))
        self.down = nn.Sequential(nn.Conv3d(ch, 2 * ch, 3, stride=2, padding=1), _gn(2 * ch), nn.ReLU(inplace=True))
        self.up = nn.Sequential(nn.ConvTranspose3d(2 * ch, ch, 2, stride=2), _gn(ch), nn.ReLU(inplace=True))
        self.merge = nn.Sequential(nn.Conv3d(2 * ch, ch, 1), _gn(ch), nn.ReLU(inplace=True))
        self.head = nn.Conv3d(ch, C, 1)

    def forward(self, combined: torch.Tensor) -> torch.Tensor:
        if combined.shape[-4] != self.in_channels:
            raise ShapeError(
                f"refinement input has {combined.shape[-4]} channels, expected {self.in_channels}"
            )
        if any(s % 2 for s in combined.shape[-3:]):
            raise ShapeError(f"spatial dims {tuple(combined.shape[-3:])} not divisible by 2")
        e = self.enc(combined)
        b = self.up(self.down(e))
        return self.head(self.merge(torch.cat([e, b], dim=-4)))


class Branch(nn.Module):
    """One student branch: K encoders + fusion + decoder + refinement net."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoders = nn.ModuleList(
            ModalityEncoder(arch.enc_channels, arch.levels) for _ in range(arch.K)
        )
        self.fusions = nn.ModuleList(
            AttentionFusion(arch.enc_channels, arch.fused_channels)
            for _ in range(arch.levels + 1)
        )
        self.decoder = FusedDecoder(arch.fused_channels, arch.enc_channels, arch.C, arch.levels)
        self.refiner = RefinementNet((arch.K + 1) * arch.C, arch.C, arch.refine_channels)

    def encode_all(self, volumes: torch.Tensor) -> list[torch.Tensor]:
        """volumes [B, K, H, W, Z] -> one stack [B, K, d, ...] per scale."""
        if volumes.shape[1] != self.arch.K:
            raise ShapeError(f"expected {self.arch.K} modalities, got {volumes.shape[1]}")
        per_mod = [enc(volumes[:, k : k + 1]) for k, enc in enumerate(self.encoders)]
        return [torch.stack([f[lvl] for f in per_mod], dim=1)
                for lvl in range(self.arch.levels + 1)]

    def forward_masked(self, volumes: torch.Tensor, mask: ModalityMask):
        """Full initial forward pass: encode, zero-substitute, fuse per scale,
        decode. Returns (logits [B, C, H, W, Z], deepest fused [B, d_f, h, w, z])."""
        from .masking import apply_mask

        stacks = self.encode_all(volumes)
        fused = [fuse(apply_mask(s, mask), mask)
                 for s, fuse in zip(stacks, self.fusions)]
        return self.decoder(fused), fused[-1]


def build_branch(arch: ArchConfig, seed: int, dtype=torch.float32) -> Branch:
    """Deterministic branch construction from an init seed."""
    torch.manual_seed(seed)
    return Branch(arch).to(dtype)


def save_checkpoint(dir_path, branches: dict[str, Branch], seed: int, epoch: int,
                    extra: dict | None = None) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    first = next(iter(branches.values()))
    manifest = {
        "arch": asdict(first.arch),
        "seed": seed,
        "epoch": epoch,
        "branches": sorted(branches),
        "dtype": str(next(first.parameters()).dtype).removeprefix("torch."),
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for name, br in branches.items():
        arrays = {k: v.detach().cpu().numpy() for k, v in br.state_dict().items()}
        np.savez(d / f"{name}.npz", **arrays)


def load_checkpoint(dir_path) -> tuple[dict[str, Branch], dict]:
    d = Path(dir_path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise IOError_(f"missing checkpoint manifest: {mf}")
    manifest = json.loads(mf.read_text())
    arch = ArchConfig(**manifest["arch"])
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    branches = {}
    for name in manifest["branches"]:
        f = d / f"{name}.npz"
        if not f.exists():
            raise IOError_(f"missing branch archive: {f}")
        br = Branch(arch).to(dtype)
        with np.load(f) as npz:
            state = {k: torch.from_numpy(npz[k]).to(dtype) for k in npz.files}
        try:
            br.load_state_dict(state)
        except RuntimeError as e:
            raise FormatError(f"{f}: {e}") from e
        branches[name] = br
    return branches, manifest
