import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcss.errors import DegenerateInputError, ValidationError
from dcss.losses import (
    EPS,
    ASLConfig,
    asymmetric_loss,
    ce_loss,
    dice_loss,
    grad_check,
    seg_loss,
    seg_loss_from_logits,
)


def test_dice_examples():
    g = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert dice_loss(g, g).item() == 0.0
    assert dice_loss(1 - g, g).item() == 1.0
    assert abs(dice_loss(torch.full((2, 2), 0.5, dtype=torch.float64), g).item() - 1 / 3) <= 1e-12
    with pytest.raises(DegenerateInputError):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 2))


def test_ce_examples():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert ce_loss(y, y).item() <= 1e-6
    half = torch.full((4, 2), 0.5, dtype=torch.float64)
    assert abs(ce_loss(half, torch.tensor([[1.0, 0], [0, 1], [1, 0], [1, 0]])).item() - math.log(2)) <= 1e-12
    with pytest.raises(ValidationError):
        ce_loss(torch.tensor([[0.6, 0.6]]), torch.tensor([[1.0, 0.0]]))


def test_ce_three_pixel_loop_oracle(rng):
    p1 = rng.uniform(0.05, 0.95, 3)
    p = np.stack([1 - p1, p1], axis=1)
    labels = [0, 1, 1]
    y = np.eye(2)[labels]
    ref = -sum(math.log(p[i, labels[i]]) for i in range(3)) / 3
    assert abs(ce_loss(torch.from_numpy(p), torch.from_numpy(y)).item() - ref) <= 1e-9


def test_seg_loss_is_sum(rng):
    for _ in range(10):
        p = torch.from_numpy(rng.uniform(0.01, 0.99, (6, 6)))
        g = torch.from_numpy((rng.random((6, 6)) > 0.5).astype(np.float64))
        y = torch.stack([1 - g, g], dim=-1)
        ref = dice_loss(p, g) + ce_loss(torch.stack([1 - p, p], dim=-1), y)
        assert abs(seg_loss(p, g, y).item() - ref.item()) <= 1e-12
        assert abs(seg_loss(p, g).item() - ref.item()) <= 1e-12
    g = torch.zeros(4, 4, dtype=torch.float64)
    g[1:3, 1:3] = 1
    assert seg_loss(g, g).item() <= 1e-6


def test_seg_loss_logit_gradient():
    torch.manual_seed(0)
    logits = torch.randn(2, 5, 5, dtype=torch.float64)
    g = (torch.rand(2, 5, 5) > 0.5).double()
    assert grad_check(lambda: seg_loss_from_logits(logits, g), [logits]) < 1e-3


def test_seg_loss_decreases_under_gradient_descent():
    torch.manual_seed(1)
    logits = torch.randn(8, 8, dtype=torch.float64, requires_grad=True)
    g = torch.zeros(8, 8, dtype=torch.float64)
    g[2:6, 1:5] = 1
    values = []
    for _ in range(50):
        loss = seg_loss_from_logits(logits, g)
        values.append(loss.item())
        (grad,) = torch.autograd.grad(loss, logits)
        with torch.no_grad():
            logits -= 1e-2 * grad
    assert all(b < a for a, b in zip(values, values[1:]))


def test_asl_examples():
    bce = ASLConfig(0.0, 0.0)
    assert abs(asymmetric_loss(torch.tensor([0.5]), torch.tensor([1.0]), bce).item() - math.log(2)) <= 1e-6
    assert asymmetric_loss(torch.tensor([1 - EPS], dtype=torch.float64), torch.tensor([1.0]), bce).item() <= 1e-6
    v = asymmetric_loss(torch.tensor([0.2], dtype=torch.float64), torch.tensor([0.0]), ASLConfig(0.0, 2.0)).item()
    assert abs(v - (-(0.2**2) * math.log(0.8))) <= 1e-6
    assert abs(v - 0.00893) < 1e-5


def test_asl_down_weights_easy_negatives():
    p, y = torch.tensor([0.1], dtype=torch.float64), torch.tensor([0.0])
    assert asymmetric_loss(p, y, ASLConfig(0, 2)) < asymmetric_loss(p, y, ASLConfig(0, 0))


def test_asl_rejects_negative_exponent():
    with pytest.raises(ValidationError):
        ASLConfig(-1.0, 0.0)


def test_asl_zero_score_is_finite():
    v = asymmetric_loss(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 0.0]))
    assert torch.isfinite(v)


probs = arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1))


@given(probs, st.data())
def test_losses_nonnegative(p, data):
    y = data.draw(arrays(np.float64, p.shape, elements=st.sampled_from([0.0, 1.0])))
    gp, gn = data.draw(st.floats(0, 4)), data.draw(st.floats(0, 4))
    assert asymmetric_loss(torch.from_numpy(p), torch.from_numpy(y), ASLConfig(gp, gn)).item() >= 0
    P = torch.from_numpy(p).view(1, -1)
    G = torch.from_numpy(y).view(1, -1)
    if (P * P + G * G).sum() > 0:
        assert -1e-12 <= dice_loss(P, G).item() <= 1 + 1e-12
        assert seg_loss(P, G).item() >= 0


def test_grad_check_quadratic():
    theta = torch.randn(10, dtype=torch.float64)
    assert grad_check(lambda: (theta**2).sum(), [theta]) <= 1e-7


def test_grad_check_detects_wrong_gradient():
    theta = torch.randn(5, dtype=torch.float64)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(5, dtype=torch.float64)

    assert grad_check(lambda: Wrong.apply(theta), [theta]) > 0.1
    with pytest.raises(ValidationError):
        grad_check(lambda: theta * 2, [theta])
