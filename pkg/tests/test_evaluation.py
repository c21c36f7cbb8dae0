import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from comatch.data import PairSample, SyntheticConfig, gen_synthetic_dataset
from comatch.evaluation import (
    binarize,
    coseg_report,
    jaccard,
    keypoint_errors,
    otsu_threshold,
    pck,
    pck_report,
    precision,
)
from comatch.geometry import identity_params, translation


def test_pck_of_ground_truth_is_one():
    for s in gen_synthetic_dataset(10, SyntheticConfig(), seed=4):
        for a in (0.05, 0.1, 0.15):
            assert pck(s.gt_transform, s.keypoints_a, s.keypoints_b, (48, 48), a) == 1.0
        assert keypoint_errors(s.gt_transform, s.keypoints_a, s.keypoints_b, (48, 48)).max() < 1e-6


def test_pck_three_of_four():
    # Image 40x40: one normalized unit is 20 px, threshold at alpha=0.1 is 4 px.
    kp_a = np.zeros((4, 2))
    kp_b = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, -0.19], [0.25, 0.0]])  # 0, 2, 3.8, 5 px
    errs = keypoint_errors(identity_params("affine"), kp_a, kp_b, (40, 40))
    assert errs == pytest.approx([0, 2, 3.8, 5])
    assert pck(identity_params("affine"), kp_a, kp_b, (40, 40), 0.1) == 0.75


def test_pck_alpha_zero_and_bbox():
    kp = np.zeros((3, 2))
    T = translation(0.01, 0.0)
    assert pck(T, kp, kp, (48, 48), 0.0) == 0.0
    # 0.01 normalized units on 48 px is 0.24 px; a bbox of 2 px puts the threshold at 0.2 px.
    assert pck(T, kp, kp, (48, 48), 0.1, bbox_hw=(2, 2)) == 0.0
    assert pck(T, kp, kp, (48, 48), 0.1, bbox_hw=(3, 1)) == 1.0


def test_pck_needs_keypoints():
    with pytest.raises(ValueError):
        pck(identity_params("affine"), np.zeros((0, 2)), np.zeros((0, 2)), (48, 48), 0.1)


@given(seed=st.integers(0, 10_000))
def test_pck_nondecreasing_in_alpha(seed):
    r = np.random.default_rng(seed)
    kp_a, kp_b = r.uniform(-1, 1, (10, 2)), r.uniform(-1, 1, (10, 2))
    T = translation(*r.normal(0, 0.1, 2))
    vals = [pck(T, kp_a, kp_b, (48, 64), a) for a in np.linspace(0, 1, 21)]
    assert all(0 <= v <= 1 for v in vals)
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_precision_and_jaccard_examples():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 2:6] = True
    assert precision(gt, gt) == 1.0 and precision(~gt, gt) == 0.0
    assert jaccard(gt, gt) == 1.0
    other = np.zeros_like(gt)
    other[0, 0] = True
    assert jaccard(other, gt) == 0.0
    assert jaccard(np.zeros_like(gt), np.zeros_like(gt)) == 1.0


def test_half_overlapping_rectangles_give_one_third():
    a = np.zeros((10, 10), bool)
    b = np.zeros((10, 10), bool)
    a[2:6, 0:4] = True
    b[2:6, 2:6] = True
    assert jaccard(a, b) == pytest.approx(1 / 3) == oracles.jaccard(a, b)


def test_metrics_match_pixel_loop_oracles(rng):
    for _ in range(100):
        p, g = rng.uniform(size=(8, 8)) < 0.5, rng.uniform(size=(8, 8)) < rng.uniform()
        assert precision(p, g) == pytest.approx(oracles.precision(p, g), abs=1e-12)
        assert jaccard(p, g) == pytest.approx(oracles.jaccard(p, g), abs=1e-12)


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ValueError):
        precision(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        jaccard(np.zeros((4, 4)), np.zeros((5, 4)))


@given(seed=st.integers(0, 10_000))
def test_complement_invariance(seed):
    r = np.random.default_rng(seed)
    p, g = r.uniform(size=(6, 6)) < 0.5, r.uniform(size=(6, 6)) < 0.5
    assert precision(~p, ~g) == precision(p, g)


def test_jaccard_is_not_complement_invariant():
    p = np.zeros((4, 4), bool)
    g = np.zeros((4, 4), bool)
    p[0, :2] = True
    g[0, :3] = True
    assert jaccard(p, g) != jaccard(~p, ~g)


@given(seed=st.integers(0, 10_000))
def test_jaccard_one_iff_equal(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(size=(5, 5)) < 0.5
    p[0, 0] = True
    assert jaccard(p, p.copy()) == 1.0
    q = p.copy()
    q[r.integers(5), r.integers(5)] ^= True
    assert jaccard(p, q) < 1.0 or not q.any()


def test_otsu_separates_bimodal_mask():
    soft = np.full((8, 8), 0.1)
    soft[:, 4:] = 0.9
    t = otsu_threshold(soft)
    best_t, _, variances = oracles.otsu_scan(soft)
    assert variances[t] == pytest.approx(max(variances.values()), rel=1e-12)
    assert np.array_equal(binarize(soft), soft > 0.5)


def test_otsu_matches_exhaustive_scan(rng):
    for i in range(100):
        n = 64
        if i % 2:
            soft = np.concatenate([rng.beta(2, 8, n // 2), rng.beta(8, 2, n // 2)])
        else:
            soft = rng.uniform(size=n)
        t = otsu_threshold(soft)
        best_t, best, variances = oracles.otsu_scan(soft)
        assert variances[t] == pytest.approx(best, rel=1e-9, abs=1e-15)
        idx = np.clip((soft * 256).astype(int), 0, 255)
        # Splits on a plateau of empty bins give the same mask.
        assert np.array_equal(binarize(soft), idx >= best_t)


def test_fixed_threshold():
    soft = np.array([[0.4, 0.6], [0.6, 0.4]])
    assert np.array_equal(binarize(soft, "fixed", 0.5), soft > 0.5)


def test_constant_mask_falls_back_to_half():
    assert otsu_threshold(np.full((4, 4), 0.7)) is None
    assert binarize(np.full((4, 4), 0.7)).all()
    assert not binarize(np.full((4, 4), 0.3)).any()


def test_unknown_binarization_methods():
    with pytest.raises(NotImplementedError):
        binarize(np.zeros((2, 2)), "grabcut")
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2)), "magic")


def test_reports_aggregate_and_serialize():
    samples = gen_synthetic_dataset(4, SyntheticConfig(), seed=6)
    transforms = [s.gt_transform for s in samples[:2]] + [identity_params("affine")] * 2
    rep = pck_report(transforms, samples, (0.05, 0.1), classes=["x", "x", "y", "y"])
    assert rep.n_pairs == 4 and rep.n_keypoints == sum(len(s.keypoints_a) for s in samples)
    assert rep.per_class["x"][0.1] == 1.0
    assert rep.values[0.05] <= rep.values[0.1]
    text = rep.to_csv()
    assert text.splitlines()[0] == "class,n_pairs,n_keypoints,pck@0.05,pck@0.1,mean_error_px"
    assert "PCK@0.1" in rep.table()
    with pytest.raises(ValueError):
        pck_report(transforms, [PairSample(s.image_a, s.image_b) for s in samples])

    masks = [s.gt_mask_a for s in samples]
    crep = coseg_report(masks, masks, classes=["x", "x", "y", "y"])
    assert crep.precision == 1.0 and crep.jaccard == 1.0 and crep.per_class["y"]["n_masks"] == 2
    assert crep.to_csv().splitlines()[1] == "all,4,1.000000,1.000000"
    with pytest.raises(ValueError):
        coseg_report([], [])
