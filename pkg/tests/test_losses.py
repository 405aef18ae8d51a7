import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from apsnet.losses import ContrastiveConfig, composite, cross_entropy, pair_masks, supervised_contrastive


def ce_loop(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        exps = [math.exp(v) for v in row]
        total += -math.log(exps[y] / sum(exps))
    return total / len(labels)


def contrast_loop(reps, labels, kappa):
    b = len(reps)
    unit = []
    for r in reps:
        norm = math.sqrt(sum(v * v for v in r))
        unit.append([v / max(norm, 1e-12) for v in r])
    total = 0.0
    for i in range(b):
        for j in range(b):
            cos = sum(a * c for a, c in zip(unit[i], unit[j]))
            if labels[i] == labels[j]:
                total += 1.0 - cos
            else:
                total += max(cos - kappa, 0.0)
    return total / (b * b)


@pytest.mark.parametrize("n", [2, 17, 100])
def test_uniform_logits_give_log_n(n):
    loss = cross_entropy(torch.zeros(5, n, dtype=torch.float64), torch.zeros(5, dtype=torch.long))
    assert abs(loss.item() - math.log(n)) < 1e-6


def test_saturated_true_class():
    logits = torch.zeros(3, 4)
    labels = torch.tensor([0, 2, 3])
    logits[torch.arange(3), labels] = 1000.0
    assert cross_entropy(logits, labels).item() < 1e-6


def test_cross_entropy_matches_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rng.normal(0, 3, (3, 4))
        labels = rng.integers(0, 4, 3)
        got = cross_entropy(torch.tensor(logits), torch.tensor(labels)).item()
        assert abs(got - ce_loop(logits.tolist(), labels.tolist())) < 1e-7


def test_cross_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        cross_entropy(torch.tensor([[0.0, float("nan")]]), torch.tensor([0]))
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(1, 3), torch.tensor([3]))


def test_pair_masks_small():
    m = pair_masks(torch.tensor([0, 0, 1]))
    assert m.positive.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    assert (m.positive + m.negative).eq(1).all()


def test_pair_masks_all_equal():
    m = pair_masks(torch.tensor([2, 2, 2, 2]))
    assert m.positive.eq(1).all() and m.negative.eq(0).all()


def test_pair_masks_match_double_loop():
    labels = np.random.default_rng(0).integers(0, 4, 16)
    m = pair_masks(torch.tensor(labels))
    for i in range(16):
        for j in range(16):
            assert m.positive[i, j] == (labels[i] == labels[j])
            assert m.negative[i, j] == (labels[i] != labels[j])
    assert torch.equal(m.positive, m.positive.T)
    assert m.positive.diagonal().eq(1).all()


def test_contrastive_analytic_cases():
    same = torch.tensor([[1.0, 2.0], [1.0, 2.0]])
    assert supervised_contrastive(same, torch.tensor([0, 0])).item() == pytest.approx(0.0, abs=1e-7)
    ortho = torch.tensor([[1.0, 0.0], [0.0, 3.0]])
    assert supervised_contrastive(ortho, torch.tensor([0, 1]), 0.0).item() == pytest.approx(0.0, abs=1e-7)
    # different classes, identical rows, kappa 0: oracle gives (0 + 0 + 1 + 1) / 4
    expected = contrast_loop([[1.0, 2.0], [1.0, 2.0]], [0, 1], 0.0)
    assert expected == pytest.approx(0.5)
    assert supervised_contrastive(same, torch.tensor([0, 1])).item() == pytest.approx(expected, abs=1e-7)


def test_contrastive_zero_row_is_finite():
    reps = torch.tensor([[0.0, 0.0], [1.0, 0.0]], requires_grad=True)
    loss = supervised_contrastive(reps, torch.tensor([0, 0]))
    loss.backward()
    assert torch.isfinite(loss) and torch.isfinite(reps.grad).all()


def test_kappa_range():
    with pytest.raises(ValueError):
        ContrastiveConfig(1.5)


@settings(max_examples=50, deadline=None)
@given(
    b=st.integers(1, 16),
    d=st.integers(1, 32),
    kappa=st.sampled_from([0.0, 0.2, 0.5]),
    seed=st.integers(0, 2**31 - 1),
    scale=st.floats(0.01, 100.0),
)
def test_contrastive_properties(b, d, kappa, seed, scale):
    rng = np.random.default_rng(seed)
    reps = torch.tensor(rng.normal(size=(b, d)))
    labels = torch.tensor(rng.integers(0, 3, b))
    base = supervised_contrastive(reps, labels, kappa)
    assert abs(base.item() - contrast_loop(reps.tolist(), labels.tolist(), kappa)) <= 1e-6
    # row rescaling
    assert abs(supervised_contrastive(reps * scale, labels, kappa).item() - base.item()) <= 1e-6
    # batch permutation
    perm = torch.tensor(rng.permutation(b))
    assert abs(supervised_contrastive(reps[perm], labels[perm], kappa).item() - base.item()) <= 1e-9


def test_negative_pair_above_kappa_increases_loss():
    labels = torch.tensor([0, 1])
    losses = []
    for angle in (1.5, 1.0, 0.6, 0.1):  # cos 0.07 (below kappa 0.2), then rising above it
        reps = torch.tensor([[1.0, 0.0], [math.cos(angle), math.sin(angle)]], dtype=torch.float64)
        losses.append(supervised_contrastive(reps, labels, 0.2).item())
    assert losses[0] == 0.0
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_positive_pair_zero_only_when_aligned():
    labels = torch.tensor([0, 0])
    aligned = torch.tensor([[1.0, 1.0], [2.0, 2.0]])
    tilted = torch.tensor([[1.0, 1.0], [2.0, 2.1]])
    assert supervised_contrastive(aligned, labels).item() == pytest.approx(0.0, abs=1e-7)
    assert supervised_contrastive(tilted, labels).item() > 0


def test_composite_is_sum():
    logits = torch.zeros(2, 17)
    reps = torch.tensor([[1.0, 2.0], [1.0, 2.0]])
    ce, con, total = composite(logits, reps, torch.tensor([0, 0]))
    assert con.item() == pytest.approx(0.0, abs=1e-7)
    assert total.item() == pytest.approx(math.log(17), abs=1e-6)

    ce, con, total = composite(logits, reps, torch.tensor([0, 1]))
    assert total.item() == pytest.approx(math.log(17) + 0.5, abs=1e-6)
    assert total.item() >= max(ce.item(), con.item())
