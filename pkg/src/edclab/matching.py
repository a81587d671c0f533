"""Statistical-matching losses.

Form (1) aligns global per-layer moments of a synthetic batch with those of
the original data; Form (2) aligns per-class moments, weighted by class
priors renormalized over the classes present in the batch. The soft
category-aware loss blends the two: ``alpha * form1 + (1 - alpha) * form2``.
Every term is an l2 distance (not squared) between moment vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

from .stats import LayerStats, LayerTarget, StatsBundle, layer_features

logger = logging.getLogger(__name__)


class MatchingError(ValueError):
    pass


@dataclass
class FeatureBatch:
    """Captured activations of one observer on a labeled synthetic batch."""

    observer: str
    features: dict[str, torch.Tensor]
    labels: torch.Tensor


@dataclass
class MatchTermReport:
    form1: dict[tuple[str, str], torch.Tensor] = field(default_factory=dict)
    form2: dict[tuple[str, str], torch.Tensor] = field(default_factory=dict)
    alpha: float = 0.5
    total: torch.Tensor | None = None

    def as_record(self) -> dict:
        return {
            "form1": {f"{o}/{l}": float(v.detach()) for (o, l), v in self.form1.items()},
            "form2": {f"{o}/{l}": float(v.detach()) for (o, l), v in self.form2.items()},
            "alpha": self.alpha,
            "total": float(self.total.detach()) if self.total is not None else None,
        }


def _l2(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x)


def batch_stats(feats: torch.Tensor) -> LayerStats:
    """Differentiable global moments of one layer's activation."""
    x = layer_features(feats)
    mean = x.mean(dim=(0, 2))
    var = (x - mean.view(1, -1, 1)).pow(2).mean(dim=(0, 2))
    return LayerStats(mean, var, x.shape[0] * x.shape[2])


def batch_class_stats(feats: torch.Tensor, labels: torch.Tensor) -> dict[int, LayerStats]:
    """Differentiable per-class moments of one layer's activation."""
    x = layer_features(feats)
    p = x.shape[2]
    out = {}
    for c in torch.unique(labels).tolist():
        xc = x[labels == c]
        mean = xc.mean(dim=(0, 2))
        var = (xc - mean.view(1, -1, 1)).pow(2).mean(dim=(0, 2))
        out[int(c)] = LayerStats(mean, var, xc.shape[0] * p)
    return out


def moment_distance(s: LayerStats, t: LayerStats, use_var: bool = True) -> torch.Tensor:
    t_mean = t.mean.to(s.mean.dtype)
    d = _l2(s.mean - t_mean)
    if use_var:
        d = d + _l2(s.var - t.var.to(s.var.dtype))
    return d


def global_match_loss(batch_stats_by_layer: dict[str, LayerStats],
                      target: dict[str, LayerTarget]) -> torch.Tensor:
    """Sum over layers of ||mu_S - mu_T|| + ||var_S - var_T|| (Form 1)."""
    total = None
    for layer, s in batch_stats_by_layer.items():
        if layer not in target:
            raise MatchingError(f"layer {layer!r} has no target statistics")
        d = moment_distance(s, target[layer].global_stats)
        total = d if total is None else total + d
    if total is None:
        raise MatchingError("no layers to match")
    return total


def _per_layer_class_loss(class_stats: dict[int, LayerStats], target: LayerTarget,
                          priors: torch.Tensor) -> torch.Tensor:
    k = priors.numel()
    present = sorted(class_stats)
    unknown = [c for c in present if not 0 <= c < k]
    if unknown:
        raise MatchingError(f"unknown class ids {unknown}")
    w = priors[present].to(torch.float64)
    w = w / w.sum()
    total = None
    for wi, c in zip(w.tolist(), present):
        s = class_stats[c]
        use_var = s.count >= 2
        if not use_var:
            logger.debug("class %d has a single element; matching its mean only", c)
        d = wi * moment_distance(s, target.per_class(c), use_var)
        total = d if total is None else total + d
    return total


def class_match_loss(batch_class_stats_by_layer: dict[str, dict[int, LayerStats]],
                     target: dict[str, LayerTarget], priors: torch.Tensor) -> torch.Tensor:
    """Prior-weighted per-class moment distance summed over layers (Form 2)."""
    total = None
    for layer, cs in batch_class_stats_by_layer.items():
        if layer not in target:
            raise MatchingError(f"layer {layer!r} has no target statistics")
        d = _per_layer_class_loss(cs, target[layer], priors)
        total = d if total is None else total + d
    if total is None:
        raise MatchingError("no layers to match")
    return total


def soft_category_loss(batch: FeatureBatch, target: StatsBundle, alpha: float
                       ) -> MatchTermReport:
    """``alpha * Form1 + (1 - alpha) * Form2`` for one observer's batch."""
    if not 0.0 <= alpha <= 1.0:
        raise MatchingError(f"alpha={alpha} outside [0, 1]")
    if batch.observer not in target.layers:
        raise MatchingError(f"no statistics for observer {batch.observer!r}")
    layer_targets = target.layers[batch.observer]
    report = MatchTermReport(alpha=alpha)
    total = None
    for layer, feats in batch.features.items():
        if layer not in layer_targets:
            raise MatchingError(f"layer {layer!r} has no target statistics")
        t = {layer: layer_targets[layer]}
        f1 = global_match_loss({layer: batch_stats(feats)}, t) if alpha > 0 else None
        f2 = (class_match_loss({layer: batch_class_stats(feats, batch.labels)}, t,
                               target.class_priors) if alpha < 1 else None)
        zero = feats.new_zeros(())
        report.form1[(batch.observer, layer)] = f1 if f1 is not None else zero
        report.form2[(batch.observer, layer)] = f2 if f2 is not None else zero
        term = 0.0
        if f1 is not None:
            term = alpha * f1
        if f2 is not None:
            term = term + (1.0 - alpha) * f2
        total = term if total is None else total + term
    if total is None:
        raise MatchingError("batch carries no monitored features")
    report.total = total
    return report


def bundle_from_features(batch: FeatureBatch, num_classes: int) -> StatsBundle:
    """Detached statistics of a batch, usable as a matching target."""
    layers = {}
    labels = batch.labels
    counts = torch.bincount(labels, minlength=num_classes).to(torch.float64)
    for layer, feats in batch.features.items():
        f = feats.detach()
        g = batch_stats(f)
        cs = batch_class_stats(f, labels)
        c = layer_features(f).shape[1]
        cmean = torch.zeros(num_classes, c, dtype=f.dtype)
        cvar = torch.zeros(num_classes, c, dtype=f.dtype)
        ccount = torch.zeros(num_classes, dtype=torch.float64)
        for k, s in cs.items():
            cmean[k], cvar[k], ccount[k] = s.mean, s.var, s.count
        layers[layer] = LayerTarget(g, cmean, cvar, ccount)
    return StatsBundle({batch.observer: layers}, counts / counts.sum())
