"""Flatness machinery for synthesis: EMA shadow, EMA-teacher regularizers,
the two-stage SAM baseline and a Hutchinson Hessian-Frobenius probe."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .matching import FeatureBatch, MatchTermReport, bundle_from_features, soft_category_loss

logger = logging.getLogger(__name__)


@dataclass
class EmaState:
    shadow: torch.Tensor
    beta: float

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta={self.beta} outside (0, 1)")


@torch.no_grad()
def ema_update(state: EmaState, live: torch.Tensor) -> EmaState:
    """In place: ``shadow = beta * shadow + (1 - beta) * live``.

    Written as a lerp so that ``live == shadow`` leaves the shadow bit-identical.
    """
    if state.shadow.shape != live.shape:
        raise ValueError(f"shape mismatch {tuple(state.shadow.shape)} vs {tuple(live.shape)}")
    state.shadow.lerp_(live, 1.0 - state.beta)
    return state


def flatness_loss_logits(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                         tau: float) -> torch.Tensor:
    """Batch-mean KL(softmax(student/tau) || softmax(teacher/tau)); teacher detached.

    No tau**2 rescaling is applied.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not (torch.isfinite(student_logits).all() and torch.isfinite(teacher_logits).all()):
        raise FloatingPointError("non-finite logits")
    log_p = F.log_softmax(student_logits / tau, dim=1)
    log_q = F.log_softmax(teacher_logits.detach() / tau, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1).mean()


def flatness_loss_stats(live: FeatureBatch, shadow: FeatureBatch, alpha: float,
                        num_classes: int) -> MatchTermReport:
    """Statistical matching of the live batch against the (detached) EMA batch."""
    target = bundle_from_features(shadow, num_classes)
    return soft_category_loss(live, target, alpha)


def sam_perturbation(grad: torch.Tensor, rho: float) -> torch.Tensor:
    """``rho * grad / ||grad||_2`` over the whole tensor (zero for a zero gradient)."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient")
    norm = torch.linalg.vector_norm(grad)
    if norm == 0:
        warnings.warn("zero gradient: SAM ascent direction undefined, using no perturbation",
                      RuntimeWarning, stacklevel=2)
        return torch.zeros_like(grad)
    return grad * (rho / norm)


def hessian_vector_product(loss_fn: Callable[[torch.Tensor], torch.Tensor],
                           point: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    x = point.detach().clone().requires_grad_(True)
    loss = loss_fn(x)
    (g,) = torch.autograd.grad(loss, x, create_graph=True)
    if not g.requires_grad:          # loss is at most linear in x
        return torch.zeros_like(x)
    (hv,) = torch.autograd.grad((g * v).sum(), x, allow_unused=True)
    return torch.zeros_like(x) if hv is None else hv


def hessian_fro_probe(loss_fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor,
                      probes: int = 64, seed: int = 0) -> float:
    """sqrt of the Hutchinson estimate E_v ||H v||^2 with Rademacher ``v``."""
    if probes < 1:
        raise ValueError("probes must be positive")
    g = torch.Generator().manual_seed(seed)
    acc = 0.0
    for _ in range(probes):
        v = (torch.randint(0, 2, point.shape, generator=g) * 2 - 1).to(point.dtype)
        hv = hessian_vector_product(loss_fn, point, v)
        sq = float(hv.pow(2).sum())
        if not math.isfinite(sq):
            raise FloatingPointError("non-finite Hessian-vector product")
        acc += sq
    return math.sqrt(acc / probes)
