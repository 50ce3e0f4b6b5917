import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from conftest import make_model
from dfa.gradcheck import central_difference_grad, max_relative_error
from dfa.model import (ConfigError, CosineClassifier, DegenerateFeatureError, FeatureExtractor,
                       classification_loss, classify, extract, l2_normalize)


class Fixed(nn.Module):
    def __init__(self, out):
        super().__init__()
        self.out = out

    def forward(self, x):
        return self.out.expand(len(x), -1)


def test_extract_normalizes_3_4():
    ext = FeatureExtractor(Fixed(torch.tensor([[3.0, 4.0]], dtype=torch.float64)), 2)
    out = extract(torch.zeros(1, 1, dtype=torch.float64), ext)
    assert torch.allclose(out, torch.tensor([[0.6, 0.8]], dtype=torch.float64), atol=1e-15)


def test_extract_rejects_zero_feature():
    ext = FeatureExtractor(Fixed(torch.zeros(1, 3)), 3)
    with pytest.raises(DegenerateFeatureError):
        extract(torch.zeros(2, 1), ext)


def test_extract_rejects_nonfinite_input(model64):
    ext, _ = model64
    with pytest.raises(ValueError):
        extract(torch.tensor([[float("nan"), 0.0, 0.0]], dtype=torch.float64), ext)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(1e-3, 1e3))
def test_unit_norm_and_scale_invariance(v, scale):
    raw = torch.tensor([v], dtype=torch.float64)
    if raw.norm() < 1e-6:
        return
    a = l2_normalize(raw)
    b = l2_normalize(raw * scale)
    assert abs(float(a.norm()) - 1.0) < 1e-6
    assert torch.allclose(a, b, atol=1e-12)


def test_normalization_jacobian_matches_finite_differences():
    torch.manual_seed(0)
    v = torch.randn(5, dtype=torch.float64, requires_grad=True)
    jac = torch.autograd.functional.jacobian(lambda u: l2_normalize(u[None])[0], v)
    h = 1e-5
    fd = torch.zeros(5, 5, dtype=torch.float64)
    with torch.no_grad():
        for j in range(5):
            e = torch.zeros(5, dtype=torch.float64)
            e[j] = h
            fd[:, j] = (l2_normalize((v + e)[None])[0] - l2_normalize((v - e)[None])[0]) / (2 * h)
    rel = ((jac - fd).abs() / (jac.abs() + 1e-8)).max()
    assert float(rel) < 1e-4


def test_identical_weights_give_uniform():
    clf = CosineClassifier(4, 6).double()
    with torch.no_grad():
        clf.weight[:] = torch.tensor([1.0, 2.0, 0.0, -1.0])
    m = l2_normalize(torch.randn(3, 4, dtype=torch.float64))
    assert torch.allclose(classify(m, clf), torch.full((3, 6), 1 / 6, dtype=torch.float64))


def test_two_class_temperature_example():
    clf = CosineClassifier(2, 2, temperature=0.05).double()
    with torch.no_grad():
        clf.weight[:] = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    p = classify(torch.tensor([[1.0, 0.0]], dtype=torch.float64), clf).detach()
    expected = math.exp(20) / (math.exp(20) + 1)
    assert abs(float(p[0, 0]) - expected) < 1e-15
    assert abs(float(p[0, 0]) - (1 - 2.061e-9)) < 1e-12


def test_default_temperature():
    assert CosineClassifier(4, 3).temperature == 0.05


def test_rejects_nonpositive_temperature():
    with pytest.raises(ConfigError):
        CosineClassifier(4, 3, temperature=0.0)
    clf = CosineClassifier(4, 3)
    clf.temperature = -1.0
    with pytest.raises(ConfigError):
        classify(torch.ones(1, 4) / 2, clf)


def test_softmax_shift_invariance(model64):
    ext, clf = model64
    logits = clf(ext(torch.randn(5, 3, dtype=torch.float64)))
    assert torch.allclose(F.softmax(logits, 1), F.softmax(logits + 123.4, 1), atol=1e-9)


def test_probabilities_sum_to_one(model64):
    ext, clf = model64
    p = classify(ext(torch.randn(9, 3, dtype=torch.float64)), clf)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(1), torch.ones(9, dtype=torch.float64), atol=1e-6)


def test_loss_zero_when_confident_and_lnk_when_uniform():
    clf = CosineClassifier(2, 3, temperature=1e-3).double()
    with torch.no_grad():
        clf.weight[:] = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, -1.0]])
    m = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert float(classification_loss(m, torch.tensor([0]), clf)) < 1e-12
    same = CosineClassifier(2, 3).double()
    with torch.no_grad():
        same.weight[:] = torch.tensor([0.3, 0.4])
    loss = classification_loss(l2_normalize(torch.randn(4, 2, dtype=torch.float64)), torch.tensor([0, 1, 2, 0]), same)
    assert abs(float(loss) - math.log(3)) < 1e-12


def test_loss_rejects_empty(model64):
    _, clf = model64
    with pytest.raises(ValueError):
        classification_loss(torch.zeros(0, 8, dtype=torch.float64), torch.zeros(0, dtype=torch.long), clf)


def test_classification_loss_gradient():
    ext, clf = make_model(seed=3, in_dim=3, feature_dim=8, hidden=(6,))
    x = torch.randn(6, 3, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3, 0, 1])
    params = list(ext.parameters()) + list(clf.parameters())
    loss_fn = lambda: classification_loss(ext(x), y, clf)
    analytic = torch.autograd.grad(loss_fn(), params)
    numeric = central_difference_grad(loss_fn, params)
    assert max_relative_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases_on_separable_toy(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 64)
    x = rng.normal(size=(64, 2)) * 0.3 + np.where(y[:, None] == 0, -2.0, 2.0)
    x = torch.tensor(x)
    y = torch.tensor(y)
    ext, clf = make_model(seed=seed, in_dim=2, feature_dim=4, n_classes=2, hidden=(8,))
    opt = torch.optim.SGD(list(ext.parameters()) + list(clf.parameters()), lr=1e-3)
    losses = []
    for _ in range(50):
        loss = classification_loss(ext(x), y, clf)
        losses.append(float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
