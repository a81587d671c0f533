"""Streaming per-class / global feature statistics of the original dataset.

Monitored layers are the inputs of every BatchNorm module plus the final
logits (layer name ``"logits"``). Statistics are per channel, pooled over
samples and spatial positions, with population (biased) variance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from .data import OriginalDatasetRef
from .models import ObserverEnsemble

LOGITS = "logits"


class StatsError(RuntimeError):
    pass


@dataclass
class LayerStats:
    """Per-channel mean / population variance over ``count`` elements."""

    mean: torch.Tensor
    var: torch.Tensor
    count: int

    @property
    def dim(self) -> int:
        return int(self.mean.numel())

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    @classmethod
    def empty(cls, dim: int) -> "LayerStats":
        z = torch.zeros(dim, dtype=torch.float64)
        return cls(z, z.clone(), 0)

    @classmethod
    def from_samples(cls, x: torch.Tensor) -> "LayerStats":
        """``x``: [n, d] (rows are elements)."""
        x = x.to(torch.float64)
        return cls(x.mean(0), x.var(0, unbiased=False), int(x.shape[0]))


def merge_stats(a: LayerStats, b: LayerStats) -> LayerStats:
    """Moments of the concatenated sample (Chan et al. pairwise update)."""
    if a.dim != b.dim:
        raise StatsError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.var * a.count + b.var * b.count + delta * delta * (a.count * b.count / n)
    return LayerStats(mean, m2 / n, n)


def layer_features(x: torch.Tensor) -> torch.Tensor:
    """Reshape an activation to [B, C, P] (P = spatial positions, 1 for vectors)."""
    if x.dim() == 2:
        return x.unsqueeze(-1)
    return x.flatten(2)


def monitored_layers(model: nn.Module, whitelist: Iterable[str] | None = None) -> list[str]:
    names = [n for n, m in model.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    names.append(LOGITS)
    if whitelist is not None:
        allowed = set(whitelist)
        names = [n for n in names if n in allowed]
    return names


class FeatureTap:
    """Context manager capturing monitored-layer inputs during a forward pass.

    ``tap.run(x)`` returns the logits; ``tap.features`` maps layer name to
    the raw activation (graph preserved for differentiation).
    """

    def __init__(self, model: nn.Module, whitelist: Iterable[str] | None = None):
        self.model = model
        self.layers = monitored_layers(model, whitelist)
        self.features: dict[str, torch.Tensor] = {}
        self._handles = []

    def __enter__(self):
        wanted = set(self.layers)
        for name, mod in self.model.named_modules():
            if name in wanted and name != LOGITS:
                self._handles.append(mod.register_forward_pre_hook(self._hook(name)))
        return self

    def _hook(self, name):
        def fn(_mod, inputs):
            self.features[name] = inputs[0]
        return fn

    def run(self, x: torch.Tensor) -> torch.Tensor:
        self.features = {}
        logits = self.model(x)
        if LOGITS in self.layers:
            self.features[LOGITS] = logits
        return logits

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []
        return False


class ClassMomentAccumulator:
    """Per-class (count, mean, M2) for one layer; mergeable across shards."""

    def __init__(self, num_classes: int, dim: int):
        self.num_classes = num_classes
        self.dim = dim
        self.count = torch.zeros(num_classes, dtype=torch.float64)
        self.mean = torch.zeros(num_classes, dim, dtype=torch.float64)
        self.m2 = torch.zeros(num_classes, dim, dtype=torch.float64)

    def update(self, feats: torch.Tensor, labels: torch.Tensor) -> None:
        x = layer_features(feats).to(torch.float64)          # [B, C, P]
        if x.shape[1] != self.dim:
            raise StatsError(f"expected {self.dim} channels, got {x.shape[1]}")
        p = x.shape[2]
        k = self.num_classes
        sample_mean = x.mean(2)                              # [B, C]
        sample_m2 = (x - sample_mean.unsqueeze(2)).pow(2).sum(2)
        n_samples = torch.zeros(k, dtype=torch.float64).index_add_(
            0, labels, torch.ones(len(labels), dtype=torch.float64))
        sums = torch.zeros(k, self.dim, dtype=torch.float64).index_add_(0, labels, sample_mean)
        present = n_samples > 0
        bmean = torch.zeros_like(sums)
        bmean[present] = sums[present] / n_samples[present].unsqueeze(1)
        dev = sample_mean - bmean[labels]
        bm2 = torch.zeros_like(sums).index_add_(0, labels, sample_m2 + p * dev.pow(2))
        bcount = n_samples * p
        self._merge_arrays(bcount, bmean, bm2)

    def _merge_arrays(self, bcount, bmean, bm2):
        n = self.count + bcount
        safe = torch.where(n > 0, n, torch.ones_like(n))
        delta = bmean - self.mean
        self.mean = self.mean + delta * (bcount / safe).unsqueeze(1)
        self.m2 = self.m2 + bm2 + delta.pow(2) * (self.count * bcount / safe).unsqueeze(1)
        self.count = n

    def merge(self, other: "ClassMomentAccumulator") -> "ClassMomentAccumulator":
        out = ClassMomentAccumulator(self.num_classes, self.dim)
        out.count, out.mean, out.m2 = self.count.clone(), self.mean.clone(), self.m2.clone()
        out._merge_arrays(other.count, other.mean, other.m2)
        return out

    def finalize(self) -> "LayerTarget":
        if (self.count == 0).any():
            missing = torch.nonzero(self.count == 0).flatten().tolist()
            raise StatsError(f"classes with zero samples: {missing}")
        class_var = self.m2 / self.count.unsqueeze(1)
        glob = LayerStats.empty(self.dim)
        for c in range(self.num_classes):
            glob = merge_stats(glob, LayerStats(self.mean[c], class_var[c], int(self.count[c])))
        return LayerTarget(glob, self.mean.clone(), class_var, self.count.clone())


@dataclass
class LayerTarget:
    global_stats: LayerStats
    class_mean: torch.Tensor       # [K, C]
    class_var: torch.Tensor        # [K, C]
    class_count: torch.Tensor      # [K] element counts

    def per_class(self, c: int) -> LayerStats:
        return LayerStats(self.class_mean[c], self.class_var[c], int(self.class_count[c]))


@dataclass
class StatsBundle:
    layers: dict[str, dict[str, LayerTarget]]     # observer -> layer -> target
    class_priors: torch.Tensor                    # [K]

    @property
    def observers(self) -> list[str]:
        return list(self.layers)

    @property
    def num_classes(self) -> int:
        return int(self.class_priors.numel())

    def check_total_variance(self, rtol: float = 1e-5) -> float:
        """Max relative deviation from global.var == E_c[var_c] + Var_c[mean_c]."""
        worst = 0.0
        p = self.class_priors.to(torch.float64)
        for per_layer in self.layers.values():
            for t in per_layer.values():
                g = t.global_stats
                within = (p.unsqueeze(1) * t.class_var).sum(0)
                between = (p.unsqueeze(1) * (t.class_mean - g.mean).pow(2)).sum(0)
                scale = g.var.abs().clamp_min(1e-12)
                worst = max(worst, float(((within + between - g.var).abs() / scale).max()))
        if worst > rtol:
            raise StatsError(f"total-variance identity violated (rel {worst:.2e})")
        return worst


def compute_stats(data: OriginalDatasetRef, ensemble: ObserverEnsemble, batch: int = 256,
                  whitelist: Iterable[str] | None = None, shards: int = 1) -> StatsBundle:
    """One streaming pass over ``data.train_x`` under every observer.

    ``shards > 1`` processes contiguous chunks independently and merges
    the accumulators, which is how a sharded multi-worker pass reduces.
    """
    if batch < 1:
        raise ValueError("batch must be positive")
    k = data.num_classes
    n = len(data.train_y)
    bounds = np.linspace(0, n, shards + 1).astype(int)
    layers: dict[str, dict[str, LayerTarget]] = {}
    for obs_name, model in ensemble:
        model.eval()
        merged: dict[str, ClassMomentAccumulator] = {}
        for s in range(shards):
            accs: dict[str, ClassMomentAccumulator] = {}
            with FeatureTap(model, whitelist) as tap, torch.no_grad():
                for i in range(bounds[s], bounds[s + 1], batch):
                    j = min(i + batch, bounds[s + 1])
                    tap.run(data.train_x[i:j])
                    y = data.train_y[i:j]
                    for lname in tap.layers:
                        f = tap.features[lname]
                        if not torch.isfinite(f).all():
                            raise StatsError(f"non-finite activation in {obs_name}/{lname}")
                        if lname not in accs:
                            accs[lname] = ClassMomentAccumulator(k, layer_features(f).shape[1])
                        accs[lname].update(f, y)
            for lname, acc in accs.items():
                merged[lname] = acc if lname not in merged else merged[lname].merge(acc)
        layers[obs_name] = {ln: acc.finalize() for ln, acc in merged.items()}
    counts = torch.bincount(data.train_y, minlength=k).to(torch.float64)
    if (counts == 0).any():
        raise StatsError("class with zero samples")
    return StatsBundle(layers, counts / counts.sum())


# ---------------------------------------------------------------- caching

def stats_cache_key(data: OriginalDatasetRef, ensemble: ObserverEnsemble,
                    whitelist: Iterable[str] | None) -> str:
    h = hashlib.sha256()
    h.update(data.source.encode())
    h.update(data.train_x.numpy().tobytes())
    h.update(data.train_y.numpy().tobytes())
    for name, model in ensemble:
        h.update(name.encode())
        for t in model.state_dict().values():
            h.update(t.detach().cpu().numpy().tobytes())
    h.update(json.dumps(sorted(whitelist) if whitelist is not None else None).encode())
    return h.hexdigest()[:24]


def save_stats(bundle: StatsBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"class_priors": bundle.class_priors.numpy()}
    index = []
    for i, (obs, per_layer) in enumerate(bundle.layers.items()):
        for j, (ln, t) in enumerate(per_layer.items()):
            key = f"{i}_{j}"
            index.append({"observer": obs, "layer": ln, "key": key,
                          "count": t.global_stats.count})
            arrays[f"{key}_gmean"] = t.global_stats.mean.numpy()
            arrays[f"{key}_gvar"] = t.global_stats.var.numpy()
            arrays[f"{key}_cmean"] = t.class_mean.numpy()
            arrays[f"{key}_cvar"] = t.class_var.numpy()
            arrays[f"{key}_ccount"] = t.class_count.numpy()
    np.savez(directory / "stats.npz", **arrays)
    digest = hashlib.sha256((directory / "stats.npz").read_bytes()).hexdigest()
    (directory / "manifest.json").write_text(json.dumps(
        {"version": 1, "layers": index, "sha256": digest}, indent=2))


def load_stats(directory: str | Path) -> StatsBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "stats.npz").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise StatsError(f"stats cache {directory} failed its checksum")
    z = np.load(directory / "stats.npz")
    layers: dict[str, dict[str, LayerTarget]] = {}
    for e in manifest["layers"]:
        k = e["key"]
        g = LayerStats(torch.from_numpy(z[f"{k}_gmean"]), torch.from_numpy(z[f"{k}_gvar"]),
                       int(e["count"]))
        layers.setdefault(e["observer"], {})[e["layer"]] = LayerTarget(
            g, torch.from_numpy(z[f"{k}_cmean"]), torch.from_numpy(z[f"{k}_cvar"]),
            torch.from_numpy(z[f"{k}_ccount"]))
    return StatsBundle(layers, torch.from_numpy(z["class_priors"]))


def compute_or_load_stats(data: OriginalDatasetRef, ensemble: ObserverEnsemble,
                          cache_dir: str | Path | None, batch: int = 256,
                          whitelist: Iterable[str] | None = None) -> StatsBundle:
    if cache_dir is None:
        return compute_stats(data, ensemble, batch, whitelist)
    d = Path(cache_dir) / "stats" / stats_cache_key(data, ensemble, whitelist)
    if (d / "manifest.json").exists():
        return load_stats(d)
    bundle = compute_stats(data, ensemble, batch, whitelist)
    save_stats(bundle, d)
    return bundle
