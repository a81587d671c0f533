"""Ensemble soft labels for condensed images, static or cached per augmentation epoch."""

from __future__ import annotations

import hashlib

import torch

from .artifact import EpochLabelCache, SoftLabelSet, SyntheticDataset
from .models import ObserverEnsemble
from .synthesis import sample_augment_params, apply_augment


class LabelError(ValueError):
    pass


@torch.no_grad()
def ensemble_probs(images: torch.Tensor, ensemble: ObserverEnsemble, num_classes: int,
                   space: str = "prob", batch: int = 500) -> torch.Tensor:
    """Mean of observer softmaxes (``space="prob"``) or softmax of the mean logit."""
    if space not in ("prob", "logit"):
        raise LabelError(f"unknown label space {space!r}")
    acc = torch.zeros(images.shape[0], num_classes, dtype=torch.float64)
    for name, model in ensemble:
        model.eval()
        for i in range(0, images.shape[0], batch):
            out = model(images[i:i + batch]).to(torch.float64)
            if out.shape[1] != num_classes:
                raise LabelError(f"observer {name!r} emits {out.shape[1]} classes, "
                                 f"expected {num_classes}")
            acc[i:i + batch] += out.softmax(1) if space == "prob" else out
    acc /= len(ensemble)
    if space == "logit":
        acc = acc.softmax(1)
    acc /= acc.sum(1, keepdim=True)
    return acc.to(torch.float32)


def generate_soft_labels(ds: SyntheticDataset, ensemble: ObserverEnsemble,
                         space: str = "prob") -> SoftLabelSet:
    if not torch.isfinite(ds.images).all():
        raise LabelError("condensed images contain non-finite values")
    return SoftLabelSet(ensemble_probs(ds.images, ensemble, ds.num_classes, space),
                        list(ensemble.names), "static")


def epoch_view(images: torch.Tensor, seed: int, crop_scale_min: float,
               flip: bool = True) -> torch.Tensor:
    """The augmented view for one epoch; replayed by the student trainer."""
    g = torch.Generator().manual_seed(seed)
    params = sample_augment_params(images.shape[0], tuple(images.shape[-2:]), crop_scale_min,
                                   g, flip)
    return apply_augment(images, params)


def cache_epoch_labels(ds: SyntheticDataset, ensemble: ObserverEnsemble, epochs: int,
                       crop_scale_min: float, seed: int, flip: bool = True,
                       space: str = "prob") -> SoftLabelSet:
    if epochs < 1:
        raise LabelError("epochs must be positive")
    g = torch.Generator().manual_seed(seed)
    seeds = [int(s) for s in torch.randint(0, 2 ** 31 - 1, (epochs,), generator=g)]
    labels = torch.stack([
        ensemble_probs(epoch_view(ds.images, s, crop_scale_min, flip), ensemble,
                       ds.num_classes, space)
        for s in seeds])
    static = ensemble_probs(ds.images, ensemble, ds.num_classes, space)
    cache = EpochLabelCache(seeds, labels, crop_scale_min, flip)
    return SoftLabelSet(static, list(ensemble.names), "per_epoch_cached", cache)


def label_cache_key(artifact_checksum: str, ensemble_id: str, epochs: int) -> str:
    return hashlib.sha256(f"{artifact_checksum}|{ensemble_id}|{epochs}".encode()).hexdigest()[:24]
