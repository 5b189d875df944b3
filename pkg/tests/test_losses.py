import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdpdnet.losses import masked_loss


def _loss_oracle(logits, target, mask, alpha=1.0, beta=1.0, eps=1e-5):
    """Plain-python Dice + BCE over present (item, channel) pairs."""
    dices, ces = [], []
    for b in range(logits.shape[0]):
        for c in range(logits.shape[1]):
            if not mask[b][c]:
                continue
            z, y = logits[b, c].ravel().tolist(), target[b, c].ravel().tolist()
            p = [1 / (1 + math.exp(-v)) for v in z]
            inter = sum(pi * yi for pi, yi in zip(p, y))
            dices.append(1 - (2 * inter + eps) / (sum(p) + sum(y) + eps))
            ces.append(-sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / len(p))
    return alpha * sum(dices) / len(dices) + beta * sum(ces) / len(ces)


def test_hand_computed_two_voxel_case():
    logits = torch.zeros(1, 1, 2, dtype=torch.float64)
    target = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    _, t = masked_loss(logits, target, [True])
    assert float(t["dice_term"]) == pytest.approx(1 - (1 + 1e-5) / (2 + 1e-5), rel=1e-12)
    assert float(t["ce_term"]) == pytest.approx(math.log(2), rel=1e-12)


def test_perfect_prediction_limit():
    target = torch.tensor([[[1.0, 0.0, 1.0, 0.0]]], dtype=torch.float64)
    logits = (target * 2 - 1) * 20
    _, t = masked_loss(logits, target, [True])
    assert float(t["dice_term"]) < 1e-8
    assert float(t["ce"].max()) <= 1e-8


def test_matches_oracle_random():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 3, 2, 2, 2, generator=g, dtype=torch.float64)
    target = (torch.rand(2, 3, 2, 2, 2, generator=g) > 0.5).double()
    mask = [[True, False, True], [False, True, False]]
    total, _ = masked_loss(logits, target, torch.tensor(mask), alpha=0.7, beta=1.3)
    assert float(total) == pytest.approx(_loss_oracle(logits, target, mask, 0.7, 1.3), rel=1e-5)


@given(st.integers(0, 10_000), st.floats(-1e6, 1e6))
@settings(max_examples=40, deadline=None)
def test_absent_channel_perturbation_is_exactly_invisible(seed, value):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, 3, 2, 2, 2, generator=g, requires_grad=True)
    target = (torch.rand(1, 3, 2, 2, 2, generator=g) > 0.5).float()
    mask = torch.tensor([True, False, True])
    l1, _ = masked_loss(logits, target, mask)
    (g1,) = torch.autograd.grad(l1, logits)
    perturbed = target.clone()
    perturbed[:, 1] = value + torch.randn(2, 2, 2, generator=g)
    l2, _ = masked_loss(logits, perturbed, mask)
    (g2,) = torch.autograd.grad(l2, logits)
    assert l1.item() == l2.item()
    assert torch.equal(g1, g2)
    assert torch.count_nonzero(g1[:, 1]) == 0


def test_finite_difference_gradient():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(1, 2, 2, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    target = (torch.rand(1, 2, 2, 2, 2, generator=g) > 0.5).double()
    assert torch.autograd.gradcheck(lambda z: masked_loss(z, target, [True, True])[0], (logits,), rtol=1e-3, atol=1e-7)


def test_all_absent_is_an_error():
    with pytest.raises(ValueError, match="at least one"):
        masked_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), [False, False])
    with pytest.raises(ValueError):
        masked_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), [True, True])


def test_descent_on_bias_only_toy():
    torch.manual_seed(0)
    feats = torch.randn(1, 1, 4, 4, 4)
    target = (feats > 0).float().expand(1, 2, 4, 4, 4).contiguous()
    bias = torch.zeros(1, 2, 1, 1, 1, requires_grad=True)
    opt = torch.optim.SGD([bias], lr=0.5)
    losses = []
    for _ in range(10):
        loss, _ = masked_loss(feats * 3 + bias, target, [True, False])
        losses.append(loss.item())
        opt.zero_grad(); loss.backward(); opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))
