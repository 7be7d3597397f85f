"""Desk-scale masked mutual learning for incomplete multi-modal
volumetric segmentation."""

from .backbone import ArchConfig, Branch, build_branch, load_checkpoint, save_checkpoint
from .masking import ModalityMask, apply_mask, enumerate_subsets, sample_mask
from .phantom import MultiModalSample, PhantomConfig, generate_phantom, load_sample, save_sample, split_dataset
from .trainer import StepLosses, TrainConfig, dice_loss, poly_lr, task_loss, train

__all__ = [
    "ArchConfig", "Branch", "build_branch", "load_checkpoint", "save_checkpoint",
    "ModalityMask", "apply_mask", "enumerate_subsets", "sample_mask",
    "MultiModalSample", "PhantomConfig", "generate_phantom", "load_sample",
    "save_sample", "split_dataset",
    "StepLosses", "TrainConfig", "dice_loss", "poly_lr", "task_loss", "train",
]
