"""Condensed-dataset artifacts on disk.

Layout of an artifact directory::

    manifest.json        version, config snapshot, per-tensor sha256, metadata
    images.bin           float32 [M, C, H, W], raw (unclamped) normalized pixels
    ema_images.bin       float32 [M, C, H, W]
    labels.bin           int64 [M]
    soft_labels.bin      float32 [M, K]          (optional)
    epoch_labels.bin     float32 [E, M, K]       (optional per-epoch label cache)
    classes/<id>/<k>.png clamped previews in pixel space

The ``.bin`` files are the source of truth; the PNGs are for inspection.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import CondenseConfig, make_config

ARTIFACT_VERSION = "1"


class ArtifactError(RuntimeError):
    pass


class IntegrityError(ArtifactError):
    pass


@dataclass
class SyntheticDataset:
    images: torch.Tensor          # [M, C, H, W]
    labels: torch.Tensor          # [M]
    ema_images: torch.Tensor
    ipc: int
    num_classes: int

    def __post_init__(self):
        m = self.images.shape[0]
        if self.ema_images.shape != self.images.shape:
            raise ArtifactError("images and ema_images differ in shape")
        if m != self.num_classes * self.ipc or self.labels.shape != (m,):
            raise ArtifactError(f"expected {self.num_classes}x{self.ipc} images, got {m}")
        counts = torch.bincount(self.labels, minlength=self.num_classes)
        if (counts != self.ipc).any():
            raise ArtifactError("every class must appear exactly ipc times")

    def __len__(self):
        return int(self.images.shape[0])

    def class_indices(self, c: int) -> torch.Tensor:
        return torch.nonzero(self.labels == c).flatten()


@dataclass
class EpochLabelCache:
    """Per-epoch augmentation seeds and the soft labels of those views."""

    seeds: list[int]
    labels: torch.Tensor          # [E, M, K]
    crop_scale_min: float
    flip: bool = True

    def __len__(self):
        return len(self.seeds)


@dataclass
class SoftLabelSet:
    labels: torch.Tensor          # [M, K] probability rows
    provenance: list[str]
    mode: str = "static"
    epoch_cache: EpochLabelCache | None = None

    def __post_init__(self):
        if self.labels.dim() != 2:
            raise ArtifactError("soft labels must be [M, K]")


@dataclass
class ArtifactManifest:
    version: str
    config: dict[str, Any]
    tensors: dict[str, dict[str, Any]]
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        body = {"version": self.version, "config": self.config,
                "tensors": self.tensors, "metadata": self.metadata}
        body["manifest_sha256"] = _digest_json(body)
        return body

    @property
    def artifact_checksum(self) -> str:
        """Checksum of payloads + config (excludes run metadata)."""
        parts = [self.tensors[k]["sha256"] for k in sorted(self.tensors)]
        parts.append(_digest_json(self.config))
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    @property
    def condense_config(self) -> CondenseConfig:
        return make_config(self.config)


def _digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


_DTYPES = {"float32": (torch.float32, np.float32), "int64": (torch.int64, np.int64)}


def _write_tensor(path: Path, t: torch.Tensor, dtype: str) -> dict:
    arr = np.ascontiguousarray(t.detach().cpu().to(_DTYPES[dtype][0]).numpy())
    blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    path.write_bytes(blob)
    return {"file": path.name, "dtype": dtype, "shape": list(arr.shape),
            "sha256": hashlib.sha256(blob).hexdigest()}


def _read_tensor(directory: Path, entry: dict) -> torch.Tensor:
    path = directory / entry["file"]
    if not path.exists():
        raise IntegrityError(f"missing payload {path}")
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
        raise IntegrityError(f"checksum mismatch for {path.name}")
    np_dtype = np.dtype(_DTYPES[entry["dtype"]][1]).newbyteorder("<")
    arr = np.frombuffer(blob, dtype=np_dtype).reshape(entry["shape"])
    return torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))


def _write_previews(directory: Path, ds: SyntheticDataset, mean, std) -> None:
    from PIL import Image

    m = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    pix = (ds.images.detach().float() * s + m).clamp(0, 1)
    pix = (pix * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    counters: dict[int, int] = {}
    for img, lab in zip(pix, ds.labels.tolist()):
        k = counters.get(lab, 0)
        counters[lab] = k + 1
        d = directory / "classes" / str(lab)
        d.mkdir(parents=True, exist_ok=True)
        arr = img[..., 0] if img.shape[-1] == 1 else img
        Image.fromarray(arr).save(d / f"{k:04d}.png")


def save_artifact(ds: SyntheticDataset, labels: SoftLabelSet | None, directory: str | Path,
                  cfg: CondenseConfig | None = None, mean=None, std=None,
                  metadata: dict | None = None, previews: bool = True) -> ArtifactManifest:
    directory = Path(directory)
    if labels is not None and labels.labels.shape[0] != len(ds):
        raise ArtifactError(
            f"soft labels have {labels.labels.shape[0]} rows for {len(ds)} images")
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {
        "images": _write_tensor(directory / "images.bin", ds.images, "float32"),
        "ema_images": _write_tensor(directory / "ema_images.bin", ds.ema_images, "float32"),
        "labels": _write_tensor(directory / "labels.bin", ds.labels, "int64"),
    }
    if labels is not None:
        tensors["soft_labels"] = _write_tensor(directory / "soft_labels.bin",
                                               labels.labels, "float32")
        if labels.epoch_cache is not None:
            tensors["epoch_labels"] = _write_tensor(directory / "epoch_labels.bin",
                                                    labels.epoch_cache.labels, "float32")
    c = ds.images.shape[1]
    mean = tuple(mean) if mean is not None else (0.0,) * c
    std = tuple(std) if std is not None else (1.0,) * c
    meta = {"ipc": ds.ipc, "num_classes": ds.num_classes, "mean": list(mean), "std": list(std),
            "soft_label_provenance": labels.provenance if labels is not None else None,
            "soft_label_mode": labels.mode if labels is not None else None,
            "python": platform.python_version(), "torch": torch.__version__}
    if labels is not None and labels.epoch_cache is not None:
        ec = labels.epoch_cache
        meta["epoch_cache"] = {"seeds": list(ec.seeds), "crop_scale_min": ec.crop_scale_min,
                               "flip": ec.flip}
    meta.update(metadata or {})
    manifest = ArtifactManifest(ARTIFACT_VERSION, (cfg or make_config()).to_dict(), tensors, meta)
    (directory / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2,
                                                        sort_keys=True))
    if previews:
        _write_previews(directory, ds, mean, std)
    return manifest


def read_manifest(directory: str | Path) -> ArtifactManifest:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ArtifactError(f"no manifest at {path}")
    try:
        body = json.loads(path.read_bytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"manifest unreadable: {exc}") from exc
    stored = body.pop("manifest_sha256", None)
    if stored != _digest_json(body):
        raise IntegrityError("manifest checksum mismatch")
    return ArtifactManifest(body["version"], body["config"], body["tensors"],
                            body.get("metadata", {}))


def load_artifact(directory: str | Path
                  ) -> tuple[SyntheticDataset, SoftLabelSet | None, ArtifactManifest]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    t = {k: _read_tensor(directory, e) for k, e in manifest.tensors.items()}
    meta = manifest.metadata
    ds = SyntheticDataset(t["images"], t["labels"], t["ema_images"], int(meta["ipc"]),
                          int(meta["num_classes"]))
    labels = None
    if "soft_labels" in t:
        cache = None
        if "epoch_labels" in t:
            ec = meta["epoch_cache"]
            cache = EpochLabelCache(list(ec["seeds"]), t["epoch_labels"],
                                    float(ec["crop_scale_min"]), bool(ec["flip"]))
        labels = SoftLabelSet(t["soft_labels"], list(meta.get("soft_label_provenance") or []),
                              meta.get("soft_label_mode") or "static", cache)
    return ds, labels, manifest
