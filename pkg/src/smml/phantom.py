"""Synthetic multi-modal phantom volumes with nested tumor sub-regions.

Each subject is a set of K aligned modality volumes rendered from a shared
label volume of three concentric random ellipsoids. The ellipsoid shells map
to classes background=0, necrosis=1, edema=2, enhancing=3, so the enhancing
region sits inside the core which sits inside the whole lesion, mirroring the
nested-region convention of brain tumor benchmarks.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, IOError_

# Fraction of non-background voxels allowed per subject; ellipsoids are
# re-sampled until the label volume lands in this band.
FOREGROUND_BAND = (0.02, 0.30)
_MAX_RESAMPLE = 500
_MIN_INNER_VOXELS = 12


def default_visibility(K: int, C: int) -> np.ndarray:
    """Per-modality contrast matrix: each modality strongly reveals one tumor
    class; the other classes blend into background in that modality, so a
    structure is only recoverable when some present modality highlights it."""
    vis = np.full((K, C), 0.05, dtype=np.float64)
    n_fg = max(C - 1, 1)
    for k in range(K):
        vis[k, 1 + (k % n_fg)] = 0.9
    return vis


@dataclass
class PhantomConfig:
    K: int = 4
    C: int = 4
    grid: tuple[int, int, int] = (16, 16, 16)
    num_subjects: int = 40
    noise_std: float = 0.15
    visibility: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError(f"K must be >= 2, got {self.K}")
        if self.C < 2:
            raise ConfigurationError(f"C must be >= 2, got {self.C}")
        if len(self.grid) != 3 or any(g < 8 for g in self.grid):
            raise ConfigurationError(f"grid dims must all be >= 8, got {self.grid}")
        if self.num_subjects < 1:
            raise ConfigurationError(f"num_subjects must be >= 1, got {self.num_subjects}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.visibility is None:
            self.visibility = default_visibility(self.K, self.C)
        else:
            self.visibility = np.asarray(self.visibility, dtype=np.float64)
        if self.visibility.shape != (self.K, self.C):
            raise ConfigurationError(
                f"visibility must have shape ({self.K}, {self.C}), got {self.visibility.shape}"
            )
        if np.any(self.visibility < 0) or np.any(self.visibility > 1):
            raise ConfigurationError("visibility entries must lie in [0, 1]")
        if np.any(np.all(self.visibility == 0, axis=1)):
            raise ConfigurationError("visibility rows must not be all-zero")


@dataclass
class MultiModalSample:
    subject_id: str
    volumes: np.ndarray  # float32 [K, H, W, Z]
    labels: np.ndarray   # uint8  [H, W, Z]

    def __post_init__(self):
        self.volumes = np.ascontiguousarray(self.volumes, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _ellipsoid_mask(grid, center, semi_axes, rotation) -> np.ndarray:
    coords = np.stack(
        np.meshgrid(*[np.arange(g, dtype=np.float64) for g in grid], indexing="ij"),
        axis=-1,
    )
    rel = (coords - center) @ rotation
    return np.sum((rel / semi_axes) ** 2, axis=-1) <= 1.0


def _subject_labels(grid, rng: np.random.Generator, C: int) -> np.ndarray:
    lo, hi = FOREGROUND_BAND
    n_vox = int(np.prod(grid))
    for _ in range(_MAX_RESAMPLE):
        gmin = min(grid)
        center = np.array([rng.uniform(0.3 * g, 0.7 * g) for g in grid])
        wt_axes = rng.uniform(0.2 * gmin, 0.42 * gmin, size=3)
        rotation = _random_rotation(rng)
        tc_axes = wt_axes * rng.uniform(0.55, 0.8)
        et_axes = tc_axes * rng.uniform(0.55, 0.8)

        labels = np.zeros(grid, dtype=np.uint8)
        labels[_ellipsoid_mask(grid, center, wt_axes, rotation)] = 2  # edema shell
        labels[_ellipsoid_mask(grid, center, tc_axes, rotation)] = 1  # necrosis
        if C > 3:
            labels[_ellipsoid_mask(grid, center, et_axes, rotation)] = 3  # enhancing

        frac = np.count_nonzero(labels) / n_vox
        # every structure must be meaningfully represented, not a stray voxel
        inner_ok = C <= 3 or np.count_nonzero(labels == 3) >= _MIN_INNER_VOXELS
        if lo <= frac <= hi and inner_ok and np.any(labels == 1):
            return labels
    raise ConfigurationError(
        f"could not place ellipsoids within foreground band {FOREGROUND_BAND} on grid {grid}"
    )


def generate_phantom(config: PhantomConfig) -> list[MultiModalSample]:
    """Deterministic dataset generation: pure function of the config."""
    rng = np.random.default_rng(config.seed)
    samples = []
    for s in range(config.num_subjects):
        labels = _subject_labels(config.grid, rng, config.C)
        vols = np.empty((config.K, *config.grid), dtype=np.float32)
        for k in range(config.K):
            mean = config.visibility[k][labels]
            noise = rng.normal(0.0, config.noise_std, size=config.grid) if config.noise_std > 0 else 0.0
            vols[k] = (mean + noise).astype(np.float32)
        samples.append(MultiModalSample(subject_id=f"subject_{s:04d}", volumes=vols, labels=labels))
    return samples


def zscore_normalize(volumes: np.ndarray) -> np.ndarray:
    """Per-modality z-score, the normalization the training pipeline applies
    after loading raw intensities."""
    out = volumes.astype(np.float32, copy=True)
    for k in range(out.shape[0]):
        v = out[k]
        std = v.std()
        out[k] = (v - v.mean()) / (std if std > 1e-8 else 1.0)
    return out


def save_sample(sample: MultiModalSample, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    K = sample.volumes.shape[0]
    H, W, Z = sample.labels.shape
    meta = {
        "subject_id": sample.subject_id,
        "K": K,
        "C": int(sample.labels.max()) + 1,
        "dims": [H, W, Z],
        "modality_order": [f"modality_{k}" for k in range(K)],
        "dtype": {"volumes": "<f4", "labels": "u1"},
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    for k in range(K):
        sample.volumes[k].astype("<f4").tofile(d / f"modality_{k}.raw")
    sample.labels.astype(np.uint8).tofile(d / "label.raw")


def load_sample(dir_path) -> MultiModalSample:
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise IOError_(f"missing metadata file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt metadata in {meta_path}: {e}") from e
    K = meta["K"]
    dims = tuple(meta["dims"])
    n = int(np.prod(dims))

    vols = np.empty((K, *dims), dtype=np.float32)
    for k in range(K):
        f = d / f"modality_{k}.raw"
        if not f.exists():
            raise IOError_(f"missing modality file: {f}")
        raw = np.fromfile(f, dtype="<f4")
        if raw.size != n:
            raise FormatError(
                f"{f}: expected {n} float32 values for dims {dims}, found {raw.size}"
            )
        vols[k] = raw.reshape(dims)
    lf = d / "label.raw"
    if not lf.exists():
        raise IOError_(f"missing label file: {lf}")
    raw = np.fromfile(lf, dtype=np.uint8)
    if raw.size != n:
        raise FormatError(f"{lf}: expected {n} uint8 values for dims {dims}, found {raw.size}")
    return MultiModalSample(meta["subject_id"], vols, raw.reshape(dims))


def split_dataset(samples, fractions, seed):
    """Disjoint (train, val, test) partition, deterministic in the seed."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigurationError(f"fractions must be three positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got sum {sum(fractions)}")
    n = len(samples)
    # largest-remainder apportionment so sizes add up exactly
    raw = [f * n for f in fractions]
    sizes = [int(r) for r in raw]
    order = sorted(range(3), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[order[i % 3]] += 1
    if any(s == 0 for s in sizes):
        raise ConfigurationError(
            f"{n} samples are too few for fractions {fractions}: a split would be empty"
        )
    idx = list(range(n))
    random.Random(seed).shuffle(idx)
    train = [samples[i] for i in idx[: sizes[0]]]
    val = [samples[i] for i in idx[sizes[0] : sizes[0] + sizes[1]]]
    test = [samples[i] for i in idx[sizes[0] + sizes[1] :]]
    return train, val, test


def save_dataset(samples, root, splits: dict[str, list[str]] | None = None) -> None:
    """Write each subject directory plus a manifest with split membership."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, root / s.subject_id)
    manifest = {
        "subjects": [s.subject_id for s in samples],
        "splits": splits or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root):
    """Return (all samples by id, split membership) from a dataset directory."""
    root = Path(root)
    mf = root / "manifest.json"
    if not mf.exists():
        raise IOError_(f"missing dataset manifest: {mf}")
    manifest = json.loads(mf.read_text())
    samples = {sid: load_sample(root / sid) for sid in manifest["subjects"]}
    return samples, manifest.get("splits", {})
