import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from edclab.artifact import SoftLabelSet, SyntheticDataset
from edclab.config import make_config
from edclab.models import build_model
from edclab.post_eval import (EvalError, ScheduleSpec, Scheduler, alrs_next, ema_weights_update,
                              epoch_batches, gradient_alignment_probe, multistep_lr, smoothing_lr,
                              soft_cross_entropy, ssrs_lr, train_student)

GRID = [(300, 1.0), (300, 2.0), (1000, 2.0)]


def test_smoothing_examples():
    assert smoothing_lr(0, 300, 2) == 1.0
    assert smoothing_lr(300, 300, 1) == pytest.approx(0.0, abs=1e-15)
    assert smoothing_lr(300, 300, 2) == pytest.approx(0.5, abs=1e-15)


def test_ssrs_examples():
    assert ssrs_lr(0, 300, 2) == 1.0
    assert ssrs_lr(300, 300, 2) == 0.0
    expected = (1 + math.cos(math.radians(75))) / 2 / 6
    assert ssrs_lr(250, 300, 2) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1049, abs=1e-4)
    assert ssrs_lr(249, 300, 2) == pytest.approx(smoothing_lr(249, 300, 2), abs=1e-15)


@pytest.mark.parametrize("n,zeta", GRID)
def test_monotone_and_single_jump(n, zeta):
    s = [smoothing_lr(i, n, zeta) for i in range(n + 1)]
    assert all(a >= b for a, b in zip(s, s[1:]))
    r = [ssrs_lr(i, n, zeta) for i in range(n + 1)]
    assert all(a >= b for a, b in zip(r, r[1:]))
    jumps = [i for i in range(1, n + 1) if r[i - 1] - r[i] > 0.05]
    assert jumps == [math.ceil(5 * n / 6)]


def test_alrs_examples():
    assert alrs_next(0.1, 1.0, 1.0) == pytest.approx(0.1 * 0.997)
    assert alrs_next(0.1, 1.0, 1.5) == 0.1
    assert alrs_next(0.1, 1.0, 1.01) == pytest.approx(0.0997)   # both thresholds hold
    assert alrs_next(0.1, 1.0, 1.03) == 0.1                     # relative miss
    assert alrs_next(0.1, 10.0, 10.1) == 0.1                    # absolute miss (0.1 > 0.02)
    assert alrs_next(0.1, 0.0, 0.1) == 0.1
    assert alrs_next(0.1, 0.0, 0.0) == pytest.approx(0.0997)


def test_stateful_alrs_scheduler():
    sched = Scheduler(ScheduleSpec("alrs", 10))
    for loss in (2.0, 2.0, 2.0, 1.0):
        sched.observe(loss)
    assert sched.at(4) == pytest.approx(0.997 ** 2)


def test_schedule_validation():
    with pytest.raises(ValueError, match="zeta"):
        ScheduleSpec("smoothing", 10, zeta=0.5)
    with pytest.raises(ValueError, match="milestones"):
        ScheduleSpec("multistep", 10, multistep=(0.5, (5, 3)))
    with pytest.raises(ValueError, match="milestones"):
        ScheduleSpec("multistep", 10, multistep=(0.5, (5, 10)))
    spec = ScheduleSpec("multistep", 10, multistep=(0.1, (3, 6)))
    assert [spec.multiplier(i) for i in (0, 3, 6, 9)] == pytest.approx([1, 0.1, 0.01, 0.01])
    assert multistep_lr(4, (3, 6), 0.5) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 7))
def test_soft_ce_gradient_identity(seed, b, k):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, k, generator=g, dtype=torch.float64, requires_grad=True)
    y = torch.rand(b, k, generator=g, dtype=torch.float64)
    y = y / y.sum(1, keepdim=True)
    (grad,) = torch.autograd.grad(soft_cross_entropy(z, y), z)
    assert torch.allclose(grad, (z.detach().softmax(1) - y) / b, atol=1e-6)


def test_ema_closed_form_geometric_sum():
    rate = 0.9
    live = nn.Linear(1, 1, bias=False).double()
    ema = nn.Linear(1, 1, bias=False).double()
    w = [0.3, -1.0, 2.0, 0.7, 0.7, 5.0]
    with torch.no_grad():
        ema.weight.fill_(w[0])
    for x in w[1:]:
        with torch.no_grad():
            live.weight.fill_(x)
        ema_weights_update(ema, live, rate)
    k = len(w) - 1
    closed = rate ** k * w[0] + sum((1 - rate) * rate ** (k - j) * w[j] for j in range(1, k + 1))
    assert abs(ema.weight.item() - closed) <= 1e-8


def test_epoch_batches_cover_every_sample():
    for m, b in ((10, 3), (12, 4), (1, 5)):
        batches = epoch_batches(m, b, torch.Generator().manual_seed(0))
        assert sorted(torch.cat(batches).tolist()) == list(range(m))
        assert all(len(x) <= b for x in batches)


def _tiny_set(seed=0, k=3, ipc=4, res=8):
    g = torch.Generator().manual_seed(seed)
    centers = torch.randn(k, 3, res, res, generator=g)
    labels = torch.arange(k).repeat_interleave(ipc)
    x = centers[labels] + 0.3 * torch.randn(k * ipc, 3, res, res, generator=g)
    tl = torch.arange(k).repeat(10)
    tx = centers[tl] + 0.3 * torch.randn(len(tl), 3, res, res, generator=g)
    return SyntheticDataset(x, labels, x.clone(), ipc, k), (tx, tl)


def _eval_cfg(**over):
    base = dict(eval_epochs=6, eval_batch=4, eval_lr=0.01, schedule="smoothing", zeta=2.0,
                eval_every=1, seed=0)
    base.update(over)
    return make_config(base)


def test_zero_ema_rate_tracks_raw_model():
    ds, test = _tiny_set()
    res = train_student(ds, None, "convnet-w8-d2", _eval_cfg(eval_ema_rate=0.0), test)
    assert len(res.epochs) == 6
    for rec in res.epochs:
        assert rec["ema_acc"] == rec["raw_acc"]
        assert 0.0 <= rec["raw_acc"] <= 1.0


def test_train_student_is_seed_deterministic():
    ds, test = _tiny_set()
    labels = SoftLabelSet(F.one_hot(ds.labels, 3).float() * 0.8 + 0.2 / 3, ["x"])
    a = train_student(ds, labels, "convnet-w8-d2", _eval_cfg(), test, seed=5)
    b = train_student(ds, labels, "convnet-w8-d2", _eval_cfg(), test, seed=5)
    assert a.summary() == b.summary()
    assert [r["train_loss"] for r in a.epochs] == [r["train_loss"] for r in b.epochs]
    lrs = [r["lr"] for r in a.epochs]
    assert lrs == pytest.approx([0.01 * smoothing_lr(i, 6, 2.0) for i in range(6)])


def test_label_image_mismatch():
    ds, test = _tiny_set()
    with pytest.raises(EvalError, match="do not match"):
        train_student(ds, SoftLabelSet(torch.full((5, 3), 1 / 3), ["x"]), "linear",
                      _eval_cfg(), test)


def test_alignment_full_batch_is_one():
    ds, (tx, tl) = _tiny_set()
    torch.manual_seed(0)
    model = build_model("convnet-w8-d2", 3, 3, 8)
    cond, orig = gradient_alignment_probe(model, (tx, tl), (tx, tl), len(tl), 3, seed=0)
    assert orig == pytest.approx(1.0, abs=1e-5)
    assert cond == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValueError):
        gradient_alignment_probe(model, ds, (tx, tl), len(ds) + 1, 1)


def test_alignment_opposed_labels_on_linear_model():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(20, 1, 2, 2, generator=g)
    y = torch.arange(20) % 2
    model = build_model("linear", 1, 2, 2)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    cond, orig = gradient_alignment_probe(model, (x, 1 - y), (x, y), 20, 2, seed=0)
    assert cond == pytest.approx(-1.0, abs=1e-5)
    assert orig == pytest.approx(1.0, abs=1e-5)
