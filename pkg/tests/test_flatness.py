import math
import warnings

import pytest
import torch
from hypothesis import given, settings, strategies as st

from edclab.flatness import (EmaState, ema_update, flatness_loss_logits, flatness_loss_stats,
                             hessian_fro_probe, sam_perturbation)
from edclab.matching import FeatureBatch, bundle_from_features, soft_category_loss


def test_ema_examples():
    s = ema_update(EmaState(torch.zeros(3), 0.99), torch.ones(3))
    assert torch.allclose(s.shadow, torch.full((3,), 0.01))
    live = torch.randn(2, 3)
    same = ema_update(EmaState(live.clone(), 0.9), live)
    assert torch.equal(same.shadow, live)
    with pytest.raises(ValueError):
        ema_update(EmaState(torch.zeros(3), 0.9), torch.zeros(4))
    with pytest.raises(ValueError):
        EmaState(torch.zeros(1), 1.0)


def test_ema_geometric_gap():
    beta = 0.9
    s = EmaState(torch.zeros(4, dtype=torch.float64), beta)
    live = torch.full((4,), 3.0, dtype=torch.float64)
    for k in range(1, 30):
        ema_update(s, live)
        assert torch.allclose(live - s.shadow, 3.0 * torch.tensor(beta, dtype=torch.float64) ** k,
                              rtol=1e-12)


def test_kl_examples():
    a = torch.tensor([[1.0, 0.0]])
    b = torch.tensor([[0.0, 1.0]])
    p = 1 / (1 + math.exp(-1))
    expected = p * 1.0 + (1 - p) * (-1.0)   # KL in nats with log ratio +-1
    assert expected == pytest.approx(0.4621, abs=1e-4)
    assert flatness_loss_logits(a, b, 1.0).item() == pytest.approx(expected, rel=1e-6)
    assert flatness_loss_logits(a, a, 1.0).item() == 0.0
    with pytest.raises(FloatingPointError):
        flatness_loss_logits(torch.tensor([[float("nan"), 0.0]]), b, 1.0)
    with pytest.raises(ValueError):
        flatness_loss_logits(a, b, 0.0)


def test_kl_decreases_with_temperature():
    g = torch.Generator().manual_seed(0)
    s, t = torch.randn(8, 5, generator=g), torch.randn(8, 5, generator=g)
    vals = [flatness_loss_logits(s, t, tau).item() for tau in (1, 4, 16, 64)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 8.0))
def test_kl_nonnegative(seed, tau):
    g = torch.Generator().manual_seed(seed)
    s, t = torch.randn(4, 3, generator=g, dtype=torch.float64), torch.randn(4, 3, generator=g, dtype=torch.float64)
    assert flatness_loss_logits(s, t, tau).item() >= -1e-12
    assert abs(flatness_loss_logits(s, s + 2.0, tau).item()) <= 1e-9   # shift-invariant softmax


def test_kl_gradients():
    g = torch.Generator().manual_seed(0)
    s = torch.randn(4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    t = torch.randn(4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    loss = flatness_loss_logits(s, t, 4.0)
    gs, gt = torch.autograd.grad(loss, (s, t), allow_unused=True)
    assert gt is None or torch.count_nonzero(gt) == 0
    h = 1e-6
    fd = torch.zeros(20, dtype=torch.float64)
    base = s.detach().flatten()
    for i in range(20):
        e = torch.zeros(20, dtype=torch.float64)
        e[i] = h
        fd[i] = (flatness_loss_logits((base + e).view(4, 5), t.detach(), 4.0)
                 - flatness_loss_logits((base - e).view(4, 5), t.detach(), 4.0)) / (2 * h)
    assert ((gs.flatten() - fd).norm() / fd.norm()).item() <= 1e-3


def test_stats_variant_delegates_to_matching():
    g = torch.Generator().manual_seed(0)
    labels = torch.tensor([0, 0, 1, 1])
    live = FeatureBatch("o", {"bn": torch.randn(4, 3, generator=g)}, labels)
    shadow = FeatureBatch("o", {"bn": torch.randn(4, 3, generator=g)}, labels)
    got = flatness_loss_stats(live, shadow, 0.5, 2).total
    want = soft_category_loss(live, bundle_from_features(shadow, 2), 0.5).total
    assert got.item() == want.item()
    assert flatness_loss_stats(live, live, 0.5, 2).total.item() == pytest.approx(0.0, abs=1e-7)


def test_sam_examples():
    assert torch.allclose(sam_perturbation(torch.tensor([3.0, 4.0]), 1.0), torch.tensor([0.6, 0.8]))
    assert torch.equal(sam_perturbation(torch.tensor([3.0, 4.0]), 0.0), torch.zeros(2))
    with pytest.warns(RuntimeWarning):
        z = sam_perturbation(torch.zeros(3), 0.5)
    assert torch.equal(z, torch.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0), st.floats(1e-2, 100.0))
def test_sam_norm_and_homogeneity(seed, rho, scale):
    grad = torch.randn(3, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    e = sam_perturbation(grad, rho)
    assert torch.linalg.vector_norm(e).item() == pytest.approx(rho, rel=1e-6)
    assert torch.allclose(sam_perturbation(grad * scale, rho), e, rtol=1e-9)
    assert torch.allclose(sam_perturbation(grad, 2 * rho), 2 * e, rtol=1e-9)


def _quadratic(x):
    return 0.5 * (x[0] ** 2 + 2 * x[1] ** 2)


def test_hessian_probe_quadratic():
    point = torch.tensor([0.3, -1.0], dtype=torch.float64)
    a = hessian_fro_probe(_quadratic, point, 256, 0)
    b = hessian_fro_probe(_quadratic, point, 256, 1)
    assert a == pytest.approx(math.sqrt(5), rel=0.05)
    assert abs(a - b) / max(a, b) <= 0.10
    assert hessian_fro_probe(_quadratic, point, 16, 3) == hessian_fro_probe(_quadratic, point, 16, 3)


def test_hessian_probe_general_matrix():
    g = torch.Generator().manual_seed(0)
    m = torch.randn(6, 6, generator=g, dtype=torch.float64)
    h = m + m.T
    est = hessian_fro_probe(lambda x: 0.5 * x @ h @ x, torch.zeros(6, dtype=torch.float64), 4096, 0)
    assert est == pytest.approx(torch.linalg.matrix_norm(h).item(), rel=0.05)


def test_hessian_probe_linear_is_zero():
    w = torch.tensor([1.0, -2.0, 0.5])
    assert hessian_fro_probe(lambda x: (w * x).sum(), torch.ones(3), 8, 0) == 0.0
    with pytest.raises(ValueError):
        hessian_fro_probe(_quadratic, torch.ones(2), 0)
