"""Post-evaluation: LR schedules, student training with soft labels and weight EMA,
and the gradient-alignment probe."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifact import SoftLabelSet, SyntheticDataset
from .config import CondenseConfig
from .data import OriginalDatasetRef
from .models import accuracy, build_model
from .soft_labels import epoch_view

logger = logging.getLogger(__name__)


class EvalError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedules

def smoothing_lr(i: float, n: int, zeta: float) -> float:
    """(1 + cos(i*pi / (zeta*N))) / 2."""
    return (1.0 + math.cos(i * math.pi / (zeta * n))) / 2.0


def ssrs_lr(i: float, n: int, zeta: float) -> float:
    """Smoothing before 5N/6, then a linear ramp to zero scaled by the smoothing value at 5N/6.

    The branch point itself takes the ramp value, so ``ssrs_lr(5N/6)`` is
    already one sixth of the smoothing value there.
    """
    if 6 * i < 5 * n:
        return smoothing_lr(i, n, zeta)
    return (1.0 + math.cos(5 * math.pi / (6 * zeta))) / 2.0 * (6 * n - 6 * i) / (6 * n)


def alrs_next(lr_prev: float, loss: float, loss_prev: float, gamma: float = 0.997,
              h1: float = 0.02, h2: float = 0.02) -> float:
    """Decay by ``gamma`` when the loss has plateaued in relative and absolute terms."""
    delta = abs(loss - loss_prev)
    if loss == 0:
        if delta != 0:
            logger.debug("ALRS: zero loss with nonzero change, relative test fails")
            return lr_prev
        return lr_prev * gamma
    if delta / abs(loss) <= h1 and delta <= h2:
        return lr_prev * gamma
    return lr_prev


def multistep_lr(i: int, milestones: tuple[int, ...], gamma: float) -> float:
    return gamma ** sum(1 for m in milestones if i >= m)


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    n: int
    zeta: float = 2.0
    alrs: tuple[float, float, float] = (0.997, 0.02, 0.02)
    multistep: tuple[float, tuple[int, ...]] = (0.5, ())

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be positive")
        if self.kind in ("smoothing", "ssrs") and self.zeta < 1:
            raise ValueError(f"zeta={self.zeta} must be >= 1")
        if self.kind == "multistep":
            ms = self.multistep[1]
            if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.n or m < 0 for m in ms):
                raise ValueError(f"milestones {ms} must be strictly increasing and < N")
        if self.kind not in ("smoothing", "ssrs", "alrs", "multistep", "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    @classmethod
    def from_config(cls, cfg: CondenseConfig) -> "ScheduleSpec":
        return cls(cfg.schedule, cfg.eval_epochs, cfg.zeta,
                   (cfg.alrs_gamma, cfg.alrs_h1, cfg.alrs_h2),
                   (cfg.multistep_gamma, tuple(cfg.multistep_milestones)))

    def multiplier(self, i: int) -> float:
        """Closed-form multiplier at epoch ``i`` (ALRS is loss-driven, see ``Scheduler``)."""
        if self.kind == "smoothing":
            return smoothing_lr(i, self.n, self.zeta)
        if self.kind == "ssrs":
            return ssrs_lr(i, self.n, self.zeta)
        if self.kind == "cosine":
            return smoothing_lr(i, self.n, 1.0)
        if self.kind == "multistep":
            return multistep_lr(i, self.multistep[1], self.multistep[0])
        if self.kind == "constant":
            return 1.0
        raise ValueError("ALRS has no closed-form multiplier")


class Scheduler:
    """Per-epoch multiplier, stateful for ALRS."""

    def __init__(self, spec: ScheduleSpec):
        self.spec = spec
        self.mult = 1.0
        self.prev_loss: float | None = None

    def at(self, i: int) -> float:
        return self.mult if self.spec.kind == "alrs" else self.spec.multiplier(i)

    def observe(self, loss: float) -> None:
        if self.spec.kind != "alrs":
            return
        if self.prev_loss is not None:
            g, h1, h2 = self.spec.alrs
            self.mult = alrs_next(self.mult, loss, self.prev_loss, g, h1, h2)
        self.prev_loss = loss


# ---------------------------------------------------------------- training

def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()


@torch.no_grad()
def ema_weights_update(ema: nn.Module, model: nn.Module, rate: float) -> None:
    """``ema = rate * ema + (1 - rate) * model`` over parameters and float buffers."""
    for pe, pm in zip(ema.parameters(), model.parameters()):
        pe.mul_(rate).add_(pm, alpha=1.0 - rate)
    for be, bm in zip(ema.buffers(), model.buffers()):
        if be.is_floating_point():
            be.mul_(rate).add_(bm, alpha=1.0 - rate)
        else:
            be.copy_(bm)


@dataclass
class EvalResult:
    epochs: list[dict] = field(default_factory=list)
    final_ema_acc: float | None = None
    final_raw_acc: float | None = None
    best_ema_acc: float | None = None

    def summary(self) -> dict:
        return {"final_ema_acc": self.final_ema_acc, "final_raw_acc": self.final_raw_acc,
                "best_ema_acc": self.best_ema_acc, "epochs": len(self.epochs)}


def epoch_batches(m: int, batch: int, g: torch.Generator) -> list[torch.Tensor]:
    """One shuffled pass over ``range(m)`` in batches of ``batch`` (last may be short)."""
    perm = torch.randperm(m, generator=g)
    return [perm[i:i + batch] for i in range(0, m, batch)]


def train_student(ds: SyntheticDataset, labels: SoftLabelSet | None, student: str,
                  cfg: CondenseConfig, test: OriginalDatasetRef | tuple, seed: int | None = None,
                  augment: bool = True) -> EvalResult:
    """Train ``student`` from scratch on the condensed set; ``labels=None`` means hard labels.

    With a per-epoch label cache the cached augmented views and their labels
    are replayed; otherwise each epoch draws a fresh weak-augmentation view.
    """
    seed = cfg.seed if seed is None else seed
    m, k = len(ds), ds.num_classes
    if labels is not None and labels.labels.shape != (m, k):
        raise EvalError(f"labels {tuple(labels.labels.shape)} do not match {m} images, {k} classes")
    test_x, test_y = (test.test_x, test.test_y) if isinstance(test, OriginalDatasetRef) else test
    sched = Scheduler(ScheduleSpec.from_config(cfg))
    c, h = ds.images.shape[1], ds.images.shape[2]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = build_model(student, c, k, h)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.eval_lr,
                            weight_decay=cfg.eval_weight_decay)
    g = torch.Generator().manual_seed(seed)
    hard = F.one_hot(ds.labels, k).to(torch.float32)
    cache = labels.epoch_cache if labels is not None else None
    images = ds.images.detach()
    result = EvalResult()
    best = None
    for epoch in range(cfg.eval_epochs):
        lr = cfg.eval_lr * sched.at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        if cache is not None:
            e = epoch % len(cache)
            x = epoch_view(images, cache.seeds[e], cache.crop_scale_min, cache.flip)
            y = cache.labels[e]
        else:
            aug_seed = int(torch.randint(0, 2 ** 31 - 1, (), generator=g))
            x = epoch_view(images, aug_seed, cfg.eval_crop_scale_min) if augment else images
            y = labels.labels if labels is not None else hard
        model.train()
        total, seen = 0.0, 0
        for idx in epoch_batches(m, cfg.eval_batch, g):
            loss = soft_cross_entropy(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise EvalError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_weights_update(ema, model, cfg.eval_ema_rate)
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        train_loss = total / seen
        sched.observe(train_loss)
        rec = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "raw_acc": None,
               "ema_acc": None}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.eval_epochs:
            rec["raw_acc"] = accuracy(model, test_x, test_y)
            rec["ema_acc"] = accuracy(ema, test_x, test_y)
            best = rec["ema_acc"] if best is None else max(best, rec["ema_acc"])
        result.epochs.append(rec)
    last = result.epochs[-1]
    result.final_raw_acc, result.final_ema_acc, result.best_ema_acc = (
        last["raw_acc"], last["ema_acc"], best)
    return result


# ---------------------------------------------------------------- gradient alignment

def _flat_grad(model: nn.Module, x: torch.Tensor, y: torch.Tensor,
               reduction: str = "mean") -> torch.Tensor:
    params = [p for p in model.parameters() if p.requires_grad]
    loss = F.cross_entropy(model(x), y, reduction=reduction)
    return torch.cat([g.flatten() for g in torch.autograd.grad(loss, params)])


def global_gradient(model: nn.Module, x: torch.Tensor, y: torch.Tensor,
                    chunk: int = 512) -> torch.Tensor:
    """Mean-loss gradient over the whole set, by accumulation over chunks."""
    acc = None
    for i in range(0, len(y), chunk):
        gsum = _flat_grad(model, x[i:i + chunk], y[i:i + chunk], "sum")
        acc = gsum if acc is None else acc + gsum
    return acc / len(y)


def gradient_alignment_probe(model: nn.Module, condensed: SyntheticDataset | tuple,
                             original: OriginalDatasetRef | tuple, batch: int, trials: int,
                             seed: int = 0) -> tuple[float, float]:
    """Mean cosine of random-batch gradients against the full-original gradient.

    Returns ``(condensed_mean, original_mean)``; the model is probed in eval
    mode with hard-label cross-entropy on both sides.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    cx, cy = ((condensed.images, condensed.labels) if isinstance(condensed, SyntheticDataset)
              else condensed)
    ox, oy = ((original.train_x, original.train_y) if isinstance(original, OriginalDatasetRef)
              else original)
    if batch > len(cy) or batch > len(oy):
        raise ValueError("batch exceeds a dataset size")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    g_full = global_gradient(model, ox, oy)
    norm = torch.linalg.vector_norm(g_full)
    if norm == 0:
        raise EvalError("global gradient is zero")
    gen = torch.Generator().manual_seed(seed)
    cos_c, cos_o = [], []
    for _ in range(trials):
        ic = torch.randperm(len(cy), generator=gen)[:batch]
        io = torch.randperm(len(oy), generator=gen)[:batch]
        cos_c.append(float(F.cosine_similarity(_flat_grad(model, cx[ic], cy[ic]), g_full, dim=0)))
        cos_o.append(float(F.cosine_similarity(_flat_grad(model, ox[io], oy[io]), g_full, dim=0)))
    return sum(cos_c) / trials, sum(cos_o) / trials
