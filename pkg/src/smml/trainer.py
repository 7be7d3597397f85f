"""Task losses, composite objectives, and the dual-branch training loop.

Each branch minimizes its own total: segmentation loss on the initial and
refined predictions, the transfer-gated pixel consistency term, the shared
feature-level relational term, and the refinement KL. The two branches keep
independent parameters and Adam states; the shared relational term simply
contributes gradients to both.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import hcc, srn
from .backbone import ArchConfig, Branch, build_branch, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, TrainingError
from .masking import ModalityMask, sample_mask
from .phantom import zscore_normalize

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    tau: float = 6.0
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 2
    poly_power: float = 0.9
    lambda_pc: float = 1.0
    lambda_fc: float = 1.0
    lambda_refine: float = 1.0
    lambda_task_refine: float = 1.0
    seed: int = 0
    grid: tuple[int, int, int] = (16, 16, 16)
    prior_noise_rate: float = 0.3
    dual_branch: bool = True
    augment_flips: bool = True
    grad_clip: float = 5.0
    dtype: str = "float32"
    checkpoint_interval: int = 50
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        self.grid = tuple(self.grid)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @property
    def use_srn(self) -> bool:
        return self.lambda_refine > 0 or self.lambda_task_refine > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepLosses:
    task1: float
    task2: float
    task_refine1: float
    task_refine2: float
    pc1: float
    pc2: float
    fc: float
    refine1: float
    refine2: float
    total1: float
    total2: float

    FIELDS = ("task1", "task2", "task_refine1", "task_refine2", "pc1", "pc2",
              "fc", "refine1", "refine2", "total1", "total2")


def dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice averaged uniformly over all classes, background included."""
    C = logits.shape[-4]
    probs = F.softmax(logits, dim=-4)
    onehot = F.one_hot(labels.long(), C).to(logits.dtype).movedim(-1, -4)
    reduce_dims = [d for d in range(logits.dim()) if d != logits.dim() - 4]
    inter = (probs * onehot).sum(dim=reduce_dims)
    psum = probs.sum(dim=reduce_dims)
    ysum = onehot.sum(dim=reduce_dims)
    dice = (2 * inter + eps) / (psum + ysum + eps)
    return 1 - dice.mean()


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Voxel-mean cross entropy plus soft Dice."""
    return hcc.pixel_ce_map(logits, labels).mean() + dice_loss(logits, labels)


def poly_lr(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * (1 - epoch / config.epochs) ** config.poly_power


def composite_losses(components: dict[str, torch.Tensor], config: TrainConfig,
                     step: int = -1) -> tuple[StepLosses, torch.Tensor]:
    """Assemble per-branch totals and the single scalar used for backward.

    The backward scalar counts the shared relational term once; per-branch
    teacher detachment already keeps each total's gradient confined to its
    own branch, so one backward pass yields both branches' gradients.
    """
    for name, value in components.items():
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite loss component '{name}' at step {step}")
    c = components
    cfg = config

    def total(i):
        return (c[f"task{i}"]
                + cfg.lambda_task_refine * c[f"task_refine{i}"]
                + cfg.lambda_pc * c[f"pc{i}"]
                + cfg.lambda_fc * c["fc"]
                + cfg.lambda_refine * c[f"refine{i}"])

    t1, t2 = total(1), total(2)
    backward = t1 + t2 - cfg.lambda_fc * c["fc"]
    losses = StepLosses(
        **{k: float(c[k].detach()) for k in StepLosses.FIELDS if k not in ("total1", "total2")},
        total1=float(t1.detach()), total2=float(t2.detach()),
    )
    return losses, backward


class BranchTrainer:
    """One branch plus its Adam optimizer."""

    def __init__(self, branch: Branch, config: TrainConfig):
        self.branch = branch
        self.optimizer = torch.optim.Adam(
            branch.parameters(), lr=config.lr0,
            betas=(config.beta1, config.beta2),
            eps=config.adam_eps, weight_decay=config.weight_decay,
        )

    def step(self, lr: float, grad_clip: float):
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.branch.parameters(), grad_clip)
        self.optimizer.step()


def _branch_forward(branch: Branch, vols, labels, priors, mask: ModalityMask,
                    config: TrainConfig):
    logits, fused = branch.forward_masked(vols, mask)
    out = {"logits": logits, "fused": fused,
           "task": task_loss(logits, labels)}
    zero = logits.new_zeros(())
    if config.use_srn:
        masked_priors = srn.mask_priors(priors, mask)
        refined = srn.refine(logits, masked_priors, branch.refiner)
        out["task_refine"] = task_loss(refined, labels)
        out["refine"] = srn.refine_consistency_loss(logits, refined)
    else:
        out["task_refine"] = zero
        out["refine"] = zero
    return out


def train_step(batch, trainers: dict[str, BranchTrainer], masks, config: TrainConfig,
               lr: float, step: int = -1) -> StepLosses:
    """One optimization step over a prepared batch.

    batch: (vols [B,K,H,W,Z], labels [B,H,W,Z], priors [B,K,C,H,W,Z]).
    masks: one ModalityMask per branch.
    """
    vols, labels, priors = batch
    dual = "branch2" in trainers
    C = config.arch.C
    zero = vols.new_zeros(())

    b1 = _branch_forward(trainers["branch1"].branch, vols, labels, priors, masks[0], config)
    if dual:
        b2 = _branch_forward(trainers["branch2"].branch, vols, labels, priors, masks[1], config)
        q1 = hcc.pixel_ce_map(b1["logits"], labels)
        q2 = hcc.pixel_ce_map(b2["logits"], labels)
        tmask = hcc.transfer_mask(q1, q2)
        pc1, pc2 = (hcc.pbc_loss(b1["logits"], b2["logits"], tmask, config.tau)
                    if config.lambda_pc > 0 else (zero, zero))
        fc = (hcc.frc_from_batch(b1["fused"], b2["fused"], labels,
                                 b1["logits"], b2["logits"], C)
              if config.lambda_fc > 0 else zero)
    else:
        b2 = {"task": zero, "task_refine": zero, "refine": zero}
        pc1 = pc2 = fc = zero

    components = {
        "task1": b1["task"], "task2": b2["task"],
        "task_refine1": b1["task_refine"], "task_refine2": b2["task_refine"],
        "pc1": pc1, "pc2": pc2, "fc": fc,
        "refine1": b1["refine"], "refine2": b2["refine"],
    }
    losses, backward = composite_losses(components, config, step)

    for t in trainers.values():
        t.optimizer.zero_grad(set_to_none=True)
    backward.backward()
    for t in trainers.values():
        t.step(lr, config.grad_clip)
    return losses


def _flip(t: torch.Tensor, axes: tuple[bool, bool, bool]) -> torch.Tensor:
    dims = [t.dim() - 3 + i for i, f in enumerate(axes) if f]
    return torch.flip(t, dims) if dims else t


class TrainData:
    """Train-split tensors held in memory: normalized volumes, labels, priors."""

    def __init__(self, samples, prior_root, config: TrainConfig):
        K, C = config.arch.K, config.arch.C
        dt = config.torch_dtype
        provider = srn.FilePriorProvider(prior_root) if prior_root else None
        vols, labels, priors = [], [], []
        for s in samples:
            vols.append(torch.from_numpy(zscore_normalize(s.volumes)).to(dt))
            labels.append(torch.from_numpy(s.labels.astype(np.int64)))
            if provider is not None and config.use_srn:
                p = np.stack([provider.get(s, k) for k in range(K)])
                priors.append(torch.from_numpy(p).to(dt))
            else:
                priors.append(torch.zeros((K, C, *s.labels.shape), dtype=dt))
        self.vols = torch.stack(vols)
        self.labels = torch.stack(labels)
        self.priors = torch.stack(priors)
        self.n = len(samples)


def _rng_streams(seed: int):
    names = ("data", "masks1", "masks2", "augment", "init1", "init2")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children))


def train(config: TrainConfig, train_samples, prior_root, out_dir,
          resume: bool = False, stop_after_epoch: int | None = None) -> Path:
    """Run the full training loop; returns the final checkpoint directory.

    Writes `loss_log.csv` (one row per step) and periodic checkpoints under
    `out_dir`. With resume=True, continues from `out_dir/checkpoint_last`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dt = config.torch_dtype
    streams = _rng_streams(config.seed)
    data = TrainData(train_samples, prior_root, config)
    steps_per_epoch = (data.n + config.batch_size - 1) // config.batch_size

    branch_names = ["branch1", "branch2"] if config.dual_branch else ["branch1"]
    ckpt_last = out / "checkpoint_last"
    log_path = out / "loss_log.csv"

    if resume:
        branches, manifest = load_checkpoint(ckpt_last)
        trainers = {n: BranchTrainer(branches[n], config) for n in branch_names}
        state = torch.load(ckpt_last / "trainer_state.pt", weights_only=False)
        for n in branch_names:
            trainers[n].optimizer.load_state_dict(state["optimizers"][n])
        rngs = {k: np.random.Generator(np.random.PCG64()) for k in ("data", "masks1", "masks2", "augment")}
        for k in rngs:
            rngs[k].bit_generator.state = state["rng"][k]
        start_epoch = manifest["epoch"] + 1
        step = state["step"]
        log_mode = "a"
    else:
        trainers = {}
        for i, name in enumerate(branch_names, start=1):
            init_seed = int(streams[f"init{i}"].generate_state(1)[0])
            trainers[name] = BranchTrainer(build_branch(config.arch, init_seed, dt), config)
        rngs = {k: np.random.default_rng(streams[k]) for k in ("data", "masks1", "masks2", "augment")}
        start_epoch, step = 0, 0
        log_mode = "w"

    def checkpoint(epoch: int):
        save_checkpoint(ckpt_last, {n: t.branch for n, t in trainers.items()},
                        seed=config.seed, epoch=epoch,
                        extra={"train_config": config.to_dict()})
        torch.save({
            "optimizers": {n: t.optimizer.state_dict() for n, t in trainers.items()},
            "rng": {k: rngs[k].bit_generator.state for k in rngs},
            "step": step,
        }, ckpt_last / "trainer_state.pt")

    with open(log_path, log_mode, newline="") as logf:
        writer = csv.writer(logf)
        if log_mode == "w":
            writer.writerow(["step", "epoch", "lr"] + list(StepLosses.FIELDS))
        for epoch in range(start_epoch, config.epochs):
            lr = poly_lr(epoch, config)
            order = rngs["data"].permutation(data.n)
            for b0 in range(0, data.n, config.batch_size):
                idx = torch.from_numpy(order[b0 : b0 + config.batch_size])
                vols, labels, priors = data.vols[idx], data.labels[idx], data.priors[idx]
                if config.augment_flips:
                    axes = tuple(bool(f) for f in rngs["augment"].random(3) < 0.5)
                    vols, labels, priors = _flip(vols, axes), _flip(labels, axes), _flip(priors, axes)
                masks = [sample_mask(rngs["masks1"], config.arch.K)]
                if config.dual_branch:
                    masks.append(sample_mask(rngs["masks2"], config.arch.K))
                losses = train_step((vols, labels, priors), trainers, masks, config, lr, step)
                writer.writerow([step, epoch, repr(lr)]
                                + [repr(getattr(losses, f)) for f in StepLosses.FIELDS])
                step += 1
            if ((epoch + 1) % config.checkpoint_interval == 0 or epoch == config.epochs - 1
                    or epoch == stop_after_epoch):
                checkpoint(epoch)
            if epoch == stop_after_epoch:
                break
    return ckpt_last
