"""Data synthesis: initialization, weak augmentation and the matching loop."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .artifact import SyntheticDataset
from .config import CondenseConfig
from .data import OriginalDatasetRef
from .flatness import (EmaState, ema_update, flatness_loss_logits, flatness_loss_stats,
                       hessian_fro_probe, sam_perturbation)
from .matching import FeatureBatch, soft_category_loss
from .models import ObserverEnsemble
from .stats import FeatureTap, StatsBundle, monitored_layers

logger = logging.getLogger(__name__)

_LOG_RATIO = (math.log(3 / 4), math.log(4 / 3))


class SynthesisError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


# ---------------------------------------------------------------- init

def _pick(pool: torch.Tensor, n: int, g: torch.Generator, what: str) -> torch.Tensor:
    if len(pool) >= n:
        return pool[torch.randperm(len(pool), generator=g)[:n]]
    warnings.warn(f"{what}: only {len(pool)} samples for {n} draws, sampling with replacement",
                  RuntimeWarning, stacklevel=3)
    return pool[torch.randint(len(pool), (n,), generator=g)]


def _random_crop_box(h: int, w: int, scale_min: float, g: torch.Generator
                     ) -> tuple[int, int, int, int, float]:
    """torchvision-style RandomResizedCrop box: (top, left, height, width, area fraction).

    Boxes whose rounded area falls below ``scale_min`` are rejected, so the
    realised fraction always lies in ``[scale_min, 1]``.
    """
    area = h * w
    if scale_min < 1.0:
        for _ in range(10):
            frac = scale_min + (1.0 - scale_min) * float(torch.rand((), generator=g))
            lo, hi = _LOG_RATIO
            ratio = math.exp(lo + (hi - lo) * float(torch.rand((), generator=g)))
            cw = int(round(math.sqrt(area * frac * ratio)))
            ch = int(round(math.sqrt(area * frac / ratio)))
            if 0 < cw <= w and 0 < ch <= h and ch * cw >= scale_min * area:
                top = int(torch.randint(0, h - ch + 1, (), generator=g))
                left = int(torch.randint(0, w - cw + 1, (), generator=g))
                return top, left, ch, cw, ch * cw / area
    return 0, 0, h, w, 1.0


def _patch_concat(sources: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """2x2 grid of half-resolution crops, one per source image [4, C, H, W]."""
    _, c, h, w = sources.shape
    hh, hw = h // 2, w // 2
    out = torch.empty(c, h, w, dtype=sources.dtype)
    slots = [(0, 0, hh, hw), (0, hw, hh, w - hw), (hh, 0, h - hh, hw), (hh, hw, h - hh, w - hw)]
    for src, (t, l, sh, sw) in zip(sources, slots):
        ct, cl, ch, cw, _ = _random_crop_box(h, w, 0.5, g)
        crop = src[:, ct:ct + ch, cl:cl + cw].unsqueeze(0)
        out[:, t:t + sh, l:l + sw] = F.interpolate(crop, size=(sh, sw), mode="bilinear",
                                                   align_corners=False, antialias=True)[0]
    return out


def init_synthetic(data: OriginalDatasetRef, cfg: CondenseConfig) -> SyntheticDataset:
    """Class-major synthetic set (class c owns rows ``c*ipc .. c*ipc+ipc-1``)."""
    g = torch.Generator().manual_seed(cfg.seed)
    k, ipc = data.num_classes, cfg.ipc
    c, (h, w) = data.channels, data.resolution
    labels = torch.arange(k).repeat_interleave(ipc)
    if cfg.init == "gaussian":
        images = torch.randn(k * ipc, c, h, w, generator=g)
    else:
        rows = []
        patch = cfg.init == "patch_concat" and cfg.patch_n == 4 and min(h, w) >= 2
        if cfg.init == "patch_concat" and not patch:
            logger.info("patch_concat with N=%d at %dx%d: using whole resized samples",
                        cfg.patch_n, h, w)
        for cls in range(k):
            pool = torch.as_tensor(data.class_index[cls], dtype=torch.int64)
            if patch:
                idx = _pick(pool, 4 * ipc, g, f"class {cls}")
                srcs = data.train_x[idx].view(ipc, 4, c, h, w)
                rows.append(torch.stack([_patch_concat(s, g) for s in srcs]))
            else:
                rows.append(data.train_x[_pick(pool, ipc, g, f"class {cls}")])
        images = torch.cat(rows)
    images = images.to(torch.float32).contiguous()
    return SyntheticDataset(images, labels, images.clone(), ipc, k)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    boxes: list[tuple[int, int, int, int]]
    flips: list[bool]
    area_fractions: list[float]


def sample_augment_params(n: int, size: tuple[int, int], crop_scale_min: float,
                          g: torch.Generator, flip: bool = True) -> AugmentParams:
    if not 0.0 < crop_scale_min <= 1.0:
        raise ValueError(f"crop_scale_min={crop_scale_min} outside (0, 1]")
    h, w = size
    boxes, flips, fracs = [], [], []
    for _ in range(n):
        t, l, ch, cw, frac = _random_crop_box(h, w, crop_scale_min, g)
        boxes.append((t, l, ch, cw))
        fracs.append(frac)
        flips.append(bool(flip and float(torch.rand((), generator=g)) < 0.5))
    return AugmentParams(boxes, flips, fracs)


def apply_augment(batch: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Differentiable crop-resize-flip; the same params give the same view."""
    h, w = batch.shape[-2:]
    out = []
    for x, (t, l, ch, cw), fl in zip(batch, params.boxes, params.flips):
        if (ch, cw) != (h, w):
            x = F.interpolate(x[:, t:t + ch, l:l + cw].unsqueeze(0), size=(h, w),
                              mode="bilinear", align_corners=False)[0]
        if fl:
            x = x.flip(-1)
        out.append(x)
    return torch.stack(out) if out else batch.clone()


def weak_augment(batch: torch.Tensor, crop_scale_min: float, seed: int,
                 flip: bool = True) -> torch.Tensor:
    """Random resized crop (area in [crop_scale_min, 1]) plus a p=0.5 flip."""
    g = torch.Generator().manual_seed(seed)
    params = sample_augment_params(batch.shape[0], tuple(batch.shape[-2:]), crop_scale_min,
                                   g, flip)
    return apply_augment(batch, params)


# ---------------------------------------------------------------- optimizer

class PixelAdam:
    """Adam over rows of one tensor; only the rows passed to ``step`` move.

    Moments and step counts live per row, so bias correction follows how
    often each image has actually been optimized.
    """

    def __init__(self, like: torch.Tensor, betas: tuple[float, float] = (0.5, 0.9),
                 eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = torch.zeros_like(like)
        self.v = torch.zeros_like(like)
        self.t = torch.zeros(like.shape[0], dtype=torch.int64)

    @torch.no_grad()
    def step(self, params: torch.Tensor, idx: torch.Tensor, grad: torch.Tensor,
             lr: float) -> torch.Tensor:
        self.t[idx] += 1
        m = self.m[idx].mul_(self.b1).add_(grad, alpha=1 - self.b1)
        v = self.v[idx].mul_(self.b2).addcmul_(grad, grad, value=1 - self.b2)
        self.m[idx], self.v[idx] = m, v
        shape = (-1,) + (1,) * (grad.dim() - 1)
        t = self.t[idx].to(grad.dtype).view(shape)
        m_hat = m / (1 - self.b1 ** t)
        v_hat = v / (1 - self.b2 ** t)
        delta = lr * m_hat / (v_hat.sqrt() + self.eps)
        params[idx] -= delta
        return delta


# ---------------------------------------------------------------- loop

@dataclass
class SynthesisLog:
    records: list[dict] = field(default_factory=list)
    probes: list[tuple[int, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.records]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
            for it, est in self.probes:
                fh.write(json.dumps({"probe_iteration": it, "hessian_fro": est}) + "\n")


def synth_lr_at(cfg: CondenseConfig, it: int) -> float:
    if cfg.synth_lr_schedule == "constant":
        return cfg.synth_lr
    return cfg.synth_lr * 0.5 * (1.0 + math.cos(math.pi * it / cfg.synth_iters))


def check_compatible(ensemble: ObserverEnsemble, stats: StatsBundle,
                     whitelist=None) -> None:
    for name, model in ensemble:
        if name not in stats.layers:
            raise SynthesisError(f"statistics carry no entry for observer {name!r}")
        missing = set(monitored_layers(model, whitelist)) - set(stats.layers[name])
        if missing:
            raise SynthesisError(f"observer {name!r} layers without statistics: "
                                 f"{sorted(missing)}")


def class_grouped_batch(labels: torch.Tensor, num_classes: int, ipc: int, synth_batch: int,
                        g: torch.Generator) -> torch.Tensor:
    n_cls = min(math.ceil(synth_batch / ipc), num_classes)
    classes = torch.randperm(num_classes, generator=g)[:n_cls].sort().values
    return torch.cat([torch.nonzero(labels == c).flatten() for c in classes.tolist()])


def matching_objective(ensemble: ObserverEnsemble, stats: StatsBundle, labels: torch.Tensor,
                       alpha: float, whitelist=None) -> Callable[[torch.Tensor], torch.Tensor]:
    """Un-augmented soft category loss summed over observers, as a function of the pixels."""
    def fn(images: torch.Tensor) -> torch.Tensor:
        total = None
        for name, model in ensemble:
            with FeatureTap(model, whitelist) as tap:
                tap.run(images)
                rep = soft_category_loss(FeatureBatch(name, tap.features, labels), stats, alpha)
            total = rep.total if total is None else total + rep.total
        return total
    return fn


def synthesize(data: OriginalDatasetRef, ensemble: ObserverEnsemble, stats: StatsBundle,
               cfg: CondenseConfig, init: SyntheticDataset | None = None,
               probe_every: int = 0, probe_probes: int = 8,
               log_path: str | Path | None = None) -> tuple[SyntheticDataset, SynthesisLog]:
    whitelist = cfg.layer_whitelist
    check_compatible(ensemble, stats, whitelist)
    if stats.num_classes != data.num_classes:
        raise SynthesisError("statistics and dataset disagree on the number of classes")
    ds = init if init is not None else init_synthetic(data, cfg)
    images = ds.images.clone()
    ema = EmaState(ds.ema_images.clone(), cfg.beta)
    opt = PixelAdam(images)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    log = SynthesisLog()
    observers = list(ensemble)
    k = data.num_classes
    size = tuple(images.shape[-2:])
    t0 = time.perf_counter()

    with contextlib.ExitStack() as stack:
        taps = [stack.enter_context(FeatureTap(m, whitelist)) for _, m in observers]

        def batch_loss(name, tap, xb, yb, teacher_view):
            tap.run(xb)
            live = FeatureBatch(name, dict(tap.features), yb)
            report = soft_category_loss(live, stats, cfg.alpha)
            fl = None
            if cfg.flatness in ("logits", "stats") and cfg.flatness_weight > 0:
                with torch.no_grad():
                    teacher_logits = tap.run(teacher_view)
                    shadow = FeatureBatch(name, dict(tap.features), yb)
                if cfg.flatness == "logits":
                    fl = flatness_loss_logits(live.features["logits"] if "logits" in live.features
                                              else tap.model(xb), teacher_logits, cfg.tau)
                else:
                    fl = flatness_loss_stats(live, shadow, cfg.alpha, k).total
            total = report.total if fl is None else report.total + cfg.flatness_weight * fl
            return total, report, fl

        for it in range(cfg.synth_iters):
            o = it % len(observers)
            name, model = observers[o]
            tap = taps[o]
            idx = class_grouped_batch(ds.labels, k, ds.ipc, cfg.synth_batch, g)
            yb = ds.labels[idx]
            aug_seed = int(torch.randint(0, 2 ** 31 - 1, (), generator=g))
            params = sample_augment_params(len(idx), size, cfg.crop_scale_min,
                                           torch.Generator().manual_seed(aug_seed))
            teacher_view = apply_augment(ema.shadow[idx], params)
            xb = images[idx].clone().requires_grad_(True)
            try:
                total, report, fl = batch_loss(name, tap, apply_augment(xb, params), yb,
                                               teacher_view)
            except FloatingPointError as exc:
                raise SynthesisError(f"{exc} at iteration {it}", it) from exc
            if not torch.isfinite(total):
                raise SynthesisError(f"non-finite loss at iteration {it}", it)
            (grad,) = torch.autograd.grad(total, xb)
            if cfg.flatness == "sam" and cfg.sam_rho > 0:
                eps = sam_perturbation(grad, cfg.sam_rho)
                xp = (xb.detach() + eps).requires_grad_(True)
                total_p, _, _ = batch_loss(name, tap, apply_augment(xp, params), yb, teacher_view)
                if not torch.isfinite(total_p):
                    raise SynthesisError(f"non-finite perturbed loss at iteration {it}", it)
                (grad,) = torch.autograd.grad(total_p, xp)
            lr = synth_lr_at(cfg, it)
            opt.step(images, idx, grad, lr)
            ema_update(ema, images)
            log.records.append({
                "iteration": it, "observer": name, "report": report.as_record(),
                "total": float(total.detach()),
                "flatness": None if fl is None else float(fl.detach()),
                "lr": lr, "wall_time": time.perf_counter() - t0,
            })
            if probe_every and ((it + 1) % probe_every == 0 or it + 1 == cfg.synth_iters):
                fn = matching_objective(ensemble, stats, ds.labels, cfg.alpha, whitelist)
                log.probes.append((it + 1, hessian_fro_probe(fn, images, probe_probes,
                                                             cfg.seed)))
    out = SyntheticDataset(images, ds.labels.clone(), ema.shadow, ds.ipc, k)
    if log_path is not None:
        log.write_jsonl(log_path)
    return out, log
