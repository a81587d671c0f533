"""Observer and student networks, plus the observer ensemble."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import OriginalDatasetRef

logger = logging.getLogger(__name__)


class IdentityObserver(nn.Module):
    """Logits are the flattened input; used for closed-form toys."""

    def __init__(self, num_classes: int | None = None):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x):
        return x.flatten(1)


class ConvNet(nn.Module):
    """conv3x3-BN-ReLU-avgpool blocks followed by a linear head."""

    def __init__(self, in_ch: int, num_classes: int, res: int, width: int = 32,
                 depth: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        ch = in_ch
        for _ in range(depth):
            layers += [nn.Conv2d(ch, width, 3, padding=1), nn.BatchNorm2d(width),
                       nn.ReLU(inplace=False), nn.AvgPool2d(2)]
            ch = width
            res = max(res // 2, 1)
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(width * res * res, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


class LinearModel(nn.Module):
    def __init__(self, in_features: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, x):
        return self.fc(x.flatten(1))


_ARCH = re.compile(r"convnet-w(\d+)-d(\d+)$")


def build_model(arch: str, in_ch: int, num_classes: int, res: int) -> nn.Module:
    if arch == "identity":
        return IdentityObserver(num_classes)
    if arch == "linear":
        return LinearModel(in_ch * res * res, num_classes)
    m = _ARCH.match(arch)
    if m is None:
        raise ValueError(f"unknown architecture {arch!r}")
    return ConvNet(in_ch, num_classes, res, width=int(m.group(1)), depth=int(m.group(2)))


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class ObserverEnsemble:
    """Ordered, named observers; all in eval mode with frozen weights."""

    names: list[str]
    models: list[nn.Module]

    def __post_init__(self):
        if len(self.names) != len(self.models) or not self.models:
            raise ValueError("ensemble needs one name per model and at least one model")
        for m in self.models:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(zip(self.names, self.models))

    @property
    def ensemble_id(self) -> str:
        return "+".join(self.names)

    def subset(self, names: list[str]) -> "ObserverEnsemble":
        idx = [self.names.index(n) for n in names]
        return ObserverEnsemble([self.names[i] for i in idx], [self.models[i] for i in idx])

    def lite(self) -> "ObserverEnsemble":
        """Labeling preset: drop the heaviest observer (kept for synthesis)."""
        if len(self) == 1:
            return self
        heaviest = max(range(len(self)), key=lambda i: param_count(self.models[i]))
        return self.subset([n for i, n in enumerate(self.names) if i != heaviest])


ENSEMBLE_PRESETS = {
    "identity": ["identity"],
    "convnet-trio": ["convnet-w32-d3", "convnet-w16-d2", "convnet-w64-d1"],
    "convnet-w32-d3": ["convnet-w32-d3"],
    "convnet-duo": ["convnet-w32-d3", "convnet-w16-d2"],
}


def train_classifier(model: nn.Module, data: OriginalDatasetRef, epochs: int, seed: int,
                     lr: float = 1e-3, batch: int = 128) -> nn.Module:
    """Plain cross-entropy training on the original training split."""
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(data.train_y)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1))
    for _ in range(epochs):
        model.train()
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, batch):
            idx = perm[i:i + batch]
            x = data.train_x[idx]
            flip = torch.rand(len(idx), generator=g) < 0.5
            x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x) if x.shape[-1] > 1 else x
            loss = F.cross_entropy(model(x), data.train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    model.eval()
    return model


@torch.no_grad()
def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch: int = 500) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(y), batch):
        correct += (model(x[i:i + batch]).argmax(1) == y[i:i + batch]).sum().item()
    return correct / max(len(y), 1)


def _cache_key(data: OriginalDatasetRef, arch: str, epochs: int, seed: int) -> str:
    h = hashlib.sha256()
    h.update(data.source.encode())
    h.update(str(tuple(data.train_x.shape)).encode())
    h.update(data.train_x[:: max(len(data.train_x) // 64, 1)].numpy().tobytes())
    h.update(f"{arch}|{epochs}|{seed}".encode())
    return h.hexdigest()[:20]


def build_ensemble(preset: str, data: OriginalDatasetRef, epochs: int = 15, seed: int = 0,
                   cache_dir: str | Path | None = None) -> ObserverEnsemble:
    """Build (training at setup if needed) an observer ensemble for ``data``."""
    archs = ENSEMBLE_PRESETS.get(preset, preset.split(","))
    res = data.resolution[0]
    models = []
    for k, arch in enumerate(archs):
        model = build_model(arch, data.channels, data.num_classes, res)
        if arch == "identity":
            models.append(model)
            continue
        path = None
        if cache_dir is not None:
            path = Path(cache_dir) / "observers" / f"{arch}-{_cache_key(data, arch, epochs, seed + k)}.pt"
        if path is not None and path.exists():
            model.load_state_dict(torch.load(path, weights_only=True))
            model.eval()
        else:
            torch.manual_seed(seed + k)
            model = build_model(arch, data.channels, data.num_classes, res)
            train_classifier(model, data, epochs, seed + k)
            logger.info("trained observer %s: test acc %.3f", arch,
                        accuracy(model, data.test_x, data.test_y))
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(model.state_dict(), path)
        models.append(model)
    return ObserverEnsemble(list(archs), models)
