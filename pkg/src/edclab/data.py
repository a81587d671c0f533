"""Original-dataset loading.

Registered names:

* ``toy1d``    -- the scalar two-class set {0, 0 | 2, 2} (identity-observer toy).
* ``digits``   -- scikit-learn's bundled 8x8 handwritten digits, 1 channel.
* ``digits32`` -- the same digits resized to 32x32 and replicated to 3 channels,
  a CIFAR-shaped stand-in that ships with every install.
* ``cifar10``  -- CIFAR-10 read from a local copy of the python-pickle batches
  (``$EDC_CIFAR10_ROOT`` or ``cifar10:/path``). Nothing is downloaded.

Any other locator is treated as a path: an ``.npz`` file with
``x_train, y_train[, x_test, y_test]`` or a directory of ``<class>/<img>.png``.
Pixels are stored normalized by the per-channel training mean/std.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class DatasetError(RuntimeError):
    pass


@dataclass
class OriginalDatasetRef:
    source: str
    num_classes: int
    resolution: tuple[int, int]
    train_x: torch.Tensor          # [N, C, H, W] normalized
    train_y: torch.Tensor          # [N] int64
    test_x: torch.Tensor
    test_y: torch.Tensor
    mean: tuple[float, ...]
    std: tuple[float, ...]
    class_index: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_index:
            self.class_index = {
                c: torch.nonzero(self.train_y == c).flatten().tolist()
                for c in range(self.num_classes)
            }
        empty = [c for c, ids in self.class_index.items() if not ids]
        if empty:
            raise DatasetError(f"{self.source}: classes without samples: {empty}")

    @property
    def channels(self) -> int:
        return int(self.train_x.shape[1])

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        m = torch.tensor(self.mean, dtype=x.dtype).view(1, -1, 1, 1)
        s = torch.tensor(self.std, dtype=x.dtype).view(1, -1, 1, 1)
        return x * s + m

    def subset(self, per_class: int, seed: int = 0) -> "OriginalDatasetRef":
        """Class-balanced training subset (test split untouched)."""
        g = np.random.default_rng(seed)
        keep = []
        for c in range(self.num_classes):
            ids = np.asarray(self.class_index[c])
            keep.extend(g.choice(ids, size=min(per_class, len(ids)), replace=False).tolist())
        keep = torch.tensor(sorted(keep))
        return OriginalDatasetRef(self.source, self.num_classes, self.resolution,
                                  self.train_x[keep], self.train_y[keep],
                                  self.test_x, self.test_y, self.mean, self.std)


def _normalize(train: np.ndarray, test: np.ndarray, source: str, num_classes: int,
               ytr: np.ndarray, yte: np.ndarray, per_channel_stats: bool = True
               ) -> OriginalDatasetRef:
    train = train.astype(np.float32)
    test = test.astype(np.float32)
    if per_channel_stats:
        mean = train.mean(axis=(0, 2, 3))
        std = train.std(axis=(0, 2, 3))
    else:
        mean = np.zeros(train.shape[1], np.float32)
        std = np.ones(train.shape[1], np.float32)
    std = np.where(std > 0, std, 1.0)
    tr = (train - mean[None, :, None, None]) / std[None, :, None, None]
    te = (test - mean[None, :, None, None]) / std[None, :, None, None]
    return OriginalDatasetRef(
        source=source, num_classes=num_classes,
        resolution=(train.shape[2], train.shape[3]),
        train_x=torch.from_numpy(np.ascontiguousarray(tr)),
        train_y=torch.from_numpy(ytr.astype(np.int64)),
        test_x=torch.from_numpy(np.ascontiguousarray(te)),
        test_y=torch.from_numpy(yte.astype(np.int64)),
        mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std),
    )


def toy1d() -> OriginalDatasetRef:
    x = np.array([0.0, 0.0, 2.0, 2.0], np.float32).reshape(4, 1, 1, 1)
    y = np.array([0, 0, 1, 1])
    return _normalize(x, x.copy(), "toy1d", 2, y, y.copy(), per_channel_stats=False)


def _digits_arrays(seed: int = 0):
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[:, None]      # [N, 1, 8, 8] in [0, 1]
    xtr, xte, ytr, yte = train_test_split(x, d.target, test_size=0.25,
                                          stratify=d.target, random_state=seed)
    return xtr, xte, ytr, yte


def digits(resolution: int = 8, channels: int = 1) -> OriginalDatasetRef:
    xtr, xte, ytr, yte = _digits_arrays()
    name = "digits" if resolution == 8 and channels == 1 else f"digits{resolution}"
    if resolution != 8:
        def up(a):
            t = F.interpolate(torch.from_numpy(a), size=(resolution, resolution),
                              mode="bilinear", align_corners=False)
            return t.clamp(0, 1).numpy()
        xtr, xte = up(xtr), up(xte)
    if channels != 1:
        xtr = np.repeat(xtr, channels, axis=1)
        xte = np.repeat(xte, channels, axis=1)
    return _normalize(xtr, xte, name, 10, ytr, yte)


def cifar10(root: str | Path | None = None) -> OriginalDatasetRef:
    raw = str(root or os.environ.get("EDC_CIFAR10_ROOT", ""))
    if not raw or not Path(raw).exists():
        raise DatasetError(
            f"CIFAR-10 not found at {raw or '<unset>'}; set EDC_CIFAR10_ROOT to a "
            "directory holding data_batch_1..5 and test_batch")
    root = Path(raw)
    base = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").exists() else root

    def read(name):
        p = base / name
        if not p.exists():
            raise DatasetError(f"CIFAR-10 batch missing: {p}")
        with open(p, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        return (np.asarray(d["data"], np.uint8).reshape(-1, 3, 32, 32) / 255.0,
                np.asarray(d["labels"]))

    parts = [read(f"data_batch_{i}") for i in range(1, 6)]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read("test_batch")
    return _normalize(xtr, xte, "cifar10", 10, ytr, yte)


def _from_npz(path: Path) -> OriginalDatasetRef:
    z = np.load(path)
    xtr, ytr = z["x_train"], z["y_train"]
    xte = z["x_test"] if "x_test" in z else xtr
    yte = z["y_test"] if "y_test" in z else ytr
    if xtr.ndim == 3:
        xtr, xte = xtr[:, None], xte[:, None]
    k = int(max(ytr.max(), yte.max())) + 1
    return _normalize(xtr, xte, str(path), k, ytr, yte)


def _from_image_dir(path: Path) -> OriginalDatasetRef:
    from PIL import Image

    class_dirs = sorted(p for p in path.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{path}: expected one sub-directory per class")
    xs, ys = [], []
    for c, d in enumerate(class_dirs):
        for f in sorted(d.glob("*.png")):
            a = np.asarray(Image.open(f), np.float32) / 255.0
            a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
            xs.append(a)
            ys.append(c)
    if not xs:
        raise DatasetError(f"{path}: no png images found")
    x = np.stack(xs)
    y = np.asarray(ys)
    return _normalize(x, x.copy(), str(path), len(class_dirs), y, y.copy())


def load_dataset(locator: str) -> OriginalDatasetRef:
    """Resolve a registered dataset name or a filesystem locator."""
    if locator == "toy1d":
        return toy1d()
    if locator == "digits":
        return digits()
    if locator == "digits16":
        return digits(16, 3)
    if locator == "digits32":
        return digits(32, 3)
    if locator == "cifar10" or locator.startswith("cifar10:"):
        return cifar10(locator.partition(":")[2] or None)
    p = Path(locator)
    if not p.exists():
        raise DatasetError(f"dataset not found: {locator}")
    if p.suffix == ".npz":
        return _from_npz(p)
    if p.is_dir():
        return _from_image_dir(p)
    raise DatasetError(f"unrecognized dataset locator: {locator}")
