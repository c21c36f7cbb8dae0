import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from comatch.geometry import Transform, identity_params
from comatch.losses import bce, contrastive_loss, contrastive_terms, figure_ground_split, task_consistency_loss
from comatch.networks import SemanticExtractor


@pytest.fixture(scope="module")
def extractor():
    return SemanticExtractor(dim=32, channels=(8, 16, 32)).double()


def _rand(seed, *shape):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_figure_ground_examples():
    img = _rand(0, 2, 3, 8, 8)
    fg = figure_ground_split(img, torch.ones(2, 8, 8, dtype=torch.float64))
    assert torch.equal(fg.object_image, img) and torch.count_nonzero(fg.background_image) == 0
    half = figure_ground_split(img, torch.full((2, 8, 8), 0.5, dtype=torch.float64))
    assert torch.equal(half.object_image, img / 2) and torch.equal(half.background_image, img / 2)


@given(seed=st.integers(0, 10_000))
def test_figure_ground_parts_sum_to_image(seed):
    img, m = _rand(seed, 1, 3, 6, 6), _rand(seed + 1, 1, 6, 6)
    fg = figure_ground_split(img, m)
    assert torch.allclose(fg.object_image + fg.background_image, img, rtol=0, atol=1e-15)


def test_figure_ground_rejects_resolution_mismatch():
    with pytest.raises(ValueError):
        figure_ground_split(torch.zeros(1, 3, 8, 8), torch.zeros(1, 4, 4))


def test_identical_inputs_have_zero_positive_distance(extractor):
    img, m = _rand(1, 2, 3, 16, 16), _rand(2, 2, 16, 16)
    terms = contrastive_terms(img, img, m, m, extractor)
    assert float(terms.positive) == 0.0


def test_hinge_saturates_when_figure_and_ground_differ(extractor):
    img = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
    img[:, 0, :, :8] = 1.0  # red left half
    img[:, 2, :, 8:] = 1.0  # blue right half
    m = torch.zeros(1, 16, 16, dtype=torch.float64)
    m[:, :, :8] = 1.0
    terms = contrastive_terms(img, img, m, m, extractor, margin=0.5)
    assert float(terms.negative) == 0.0


def test_contrastive_matches_vector_oracle(extractor):
    for seed in range(100):
        ia, ib = _rand(seed, 1, 3, 16, 16), _rand(seed + 500, 1, 3, 16, 16)
        ma, mb = _rand(seed + 1000, 1, 16, 16), _rand(seed + 1500, 1, 16, 16)
        margin = 2.0 if seed % 2 else 0.5
        vec = [extractor(x)[0].tolist() for x in (ma[:, None] * ia, mb[:, None] * ib, (1 - ma[:, None]) * ia, (1 - mb[:, None]) * ib)]
        d_pos, d_neg = oracles.contrastive(*vec, margin)
        terms = contrastive_terms(ia, ib, ma, mb, extractor, margin)
        assert float(terms.positive) == pytest.approx(d_pos, abs=1e-6)
        assert float(terms.negative) == pytest.approx(d_neg, abs=1e-6)


@given(seed=st.integers(0, 10_000), margin=st.floats(0, 5))
def test_contrastive_bounds_and_symmetry(extractor, seed, margin):
    ia, ib = _rand(seed, 2, 3, 8, 8), _rand(seed + 1, 2, 3, 8, 8)
    ma, mb = _rand(seed + 2, 2, 8, 8), _rand(seed + 3, 2, 8, 8)
    t = contrastive_terms(ia, ib, ma, mb, extractor, margin)
    s = contrastive_terms(ib, ia, mb, ma, extractor, margin)
    assert float(t.total) >= 0
    assert 0 <= float(t.negative) <= margin
    assert float(t.positive) == pytest.approx(float(s.positive), abs=1e-12)
    assert float(t.negative) == pytest.approx(float(s.negative), abs=1e-12)


def test_contrastive_rejects_bad_margin_and_dimension(extractor):
    img, m = _rand(0, 1, 3, 8, 8), _rand(1, 1, 8, 8)
    with pytest.raises(ValueError):
        contrastive_loss(img, img, m, m, extractor, margin=-1.0)
    with pytest.raises(ValueError):
        contrastive_loss(img, img, m, m, extractor, dim=64)


def test_bce_against_half_prediction_is_log_two():
    target = _rand(3, 1, 16, 16)
    assert float(bce(target, torch.full_like(target, 0.5))) == pytest.approx(math.log(2), abs=1e-12)


def test_task_loss_constant_masks_closed_form():
    m = torch.full((1, 16, 16), 0.9, dtype=torch.float64)
    I = identity_params("cascade")
    entropy = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert float(task_consistency_loss(m, m, I, I)) == pytest.approx(2 * entropy, abs=1e-8)


@given(seed=st.integers(0, 10_000))
def test_task_loss_identity_equal_masks_is_twice_entropy(seed):
    m = _rand(seed, 1, 8, 8) * 0.98 + 0.01
    I = identity_params("cascade")
    ent = -(m * torch.log(m) + (1 - m) * torch.log(1 - m)).mean()
    assert float(task_consistency_loss(m, m, I, I)) == pytest.approx(2 * float(ent), abs=1e-8)


def test_task_loss_matches_pixel_loop_oracle(rng):
    for _ in range(100):
        m_a, m_b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        c_ab = np.array([1, 0, 0, 0, 1, 0]) + rng.uniform(-0.15, 0.15, 6)
        c_ba = np.array([1, 0, 0, 0, 1, 0]) + rng.uniform(-0.15, 0.15, 6)
        T_ab = Transform("affine", affine=torch.tensor(c_ab[None]))
        T_ba = Transform("affine", affine=torch.tensor(c_ba[None]))
        got = float(task_consistency_loss(torch.tensor(m_a[None]), torch.tensor(m_b[None]), T_ab, T_ba))
        assert got == pytest.approx(oracles.task_consistency(m_a, m_b, c_ab, c_ba), abs=1e-6)


@given(seed=st.integers(0, 10_000))
def test_task_loss_symmetric_under_swap(seed):
    r = np.random.default_rng(seed)
    m_a, m_b = torch.tensor(r.uniform(size=(2, 8, 8))), torch.tensor(r.uniform(size=(2, 8, 8)))
    T_ab = Transform("affine", affine=torch.tensor(np.array([1, 0, 0, 0, 1, 0]) + r.normal(0, 0.1, (2, 6))))
    T_ba = Transform("affine", affine=torch.tensor(np.array([1, 0, 0, 0, 1, 0]) + r.normal(0, 0.1, (2, 6))))
    a = float(task_consistency_loss(m_a, m_b, T_ab, T_ba))
    b = float(task_consistency_loss(m_b, m_a, T_ba, T_ab))
    assert a == pytest.approx(b, abs=1e-12)


def test_task_loss_detached_targets_still_train_transforms():
    m_a = _rand(4, 1, 8, 8).requires_grad_(True)
    m_b = _rand(5, 1, 8, 8).requires_grad_(True)
    aff = torch.tensor([[1.0, 0.0, 0.1, 0.0, 1.0, 0.0]], dtype=torch.float64, requires_grad=True)
    T = Transform("affine", affine=aff)
    loss = task_consistency_loss(m_a, m_b, T, T, detach_targets=True)
    loss.backward()
    assert float(aff.grad.abs().sum()) > 0
    # Each mask still receives gradient as a prediction.
    assert float(m_a.grad.abs().sum()) > 0
    full_a = m_a.detach().clone().requires_grad_(True)
    task_consistency_loss(full_a, m_b.detach(), T.detach(), T.detach()).backward()
    assert not torch.allclose(full_a.grad, m_a.grad)
