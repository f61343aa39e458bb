import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from octchoroid.metrics import PSNR_CAP_DB, ausde, binarize_vessels, image_fidelity, \
    report_psnr, seg_scores, ssim, vessel_density
from octchoroid.oct_core import OctDataError

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
               elements=st.integers(0, 1))


def test_seg_scores_counts():
    p = np.array([[1, 1, 0, 0], [1, 0, 0, 0]])
    g = np.array([[1, 0, 0, 0], [1, 1, 1, 0]])
    # tp=2 fp=1 fn=2 tn=3
    s = seg_scores(p, g)
    assert s.di == pytest.approx(4 / 7, abs=1e-12)
    assert s.iou == pytest.approx(2 / 5, abs=1e-12)
    assert s.acc == pytest.approx(5 / 8, abs=1e-12)
    assert s.sen == pytest.approx(2 / 4, abs=1e-12)


def test_seg_scores_degenerate():
    z = np.zeros((3, 3), np.uint8)
    s = seg_scores(z, z)
    assert (s.di, s.iou, s.sen, s.acc) == (1.0, 1.0, 1.0, 1.0)
    o = np.ones((3, 3), np.uint8)
    s = seg_scores(z, o)
    assert (s.di, s.iou, s.sen, s.acc) == (0.0, 0.0, 0.0, 0.0)
    s = seg_scores(o, z)
    assert s.sen == 1.0 and s.di == 0.0


def test_seg_scores_rejects_shape_and_values():
    with pytest.raises(OctDataError):
        seg_scores(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        seg_scores(np.full((2, 2), 2), np.zeros((2, 2)))


@given(masks, st.data())
def test_dice_iou_identity(p, data):
    g = data.draw(arrays(np.uint8, p.shape, elements=st.integers(0, 1)))
    s = seg_scores(p, g)
    assert abs(s.di - 2 * s.iou / (1 + s.iou)) < 1e-12


def test_ausde_hand_cases():
    assert ausde([3, 4, 5], [3, 4, 5]) == 0
    assert ausde([1, 2, 3], [2, 4, 6]) == pytest.approx(2.0)
    # sentinel columns are skipped
    err, cov = ausde([1, -1, 3, 7], [2, 5, -1, 7], return_coverage=True)
    assert err == pytest.approx(0.5) and cov == pytest.approx(0.5)
    with pytest.raises(OctDataError):
        ausde([-1, -1], [1, 2])


@given(arrays(np.int64, 10, elements=st.integers(0, 50)),
       arrays(np.int64, 10, elements=st.integers(0, 50)),
       arrays(np.int64, 10, elements=st.integers(0, 50)))
def test_ausde_symmetric_and_triangle(a, b, c):
    assert ausde(a, b) == ausde(b, a)
    assert ausde(a, c) <= ausde(a, b) + ausde(b, c) + 1e-12


def test_vessel_density_cases():
    assert vessel_density(np.ones((4, 5), np.uint8)) == 1.0
    cb = (np.indices((6, 6)).sum(0) % 2).astype(np.uint8)
    assert vessel_density(cb) == 0.5
    roi = np.zeros((6, 6), np.uint8)
    roi[:2] = 1
    assert vessel_density(cb, roi) == pytest.approx(6 / 12, abs=1e-12)
    with pytest.raises(OctDataError):
        vessel_density(cb, np.zeros((6, 6), np.uint8))


@given(masks, st.randoms(use_true_random=False))
def test_vessel_density_permutation_invariant(v, r):
    flat = v.ravel().copy()
    r.shuffle(flat)
    assert vessel_density(flat.reshape(v.shape)) == vessel_density(v)


def test_binarize_vessels_dark_lines():
    img = np.full((40, 40), 0.7)
    img[:, 10:13] = 0.2
    v = binarize_vessels(img)
    assert v[:, 10:13].all()
    assert v[:, 25:].sum() == 0
    assert binarize_vessels(np.full((20, 20), 0.5)).sum() == 0


def test_binarize_vessels_removes_specks():
    img = np.full((30, 30), 0.8)
    img[15, 15] = 0.0
    assert binarize_vessels(img, min_size=5).sum() == 0
    assert binarize_vessels(img, min_size=1)[15, 15] == 1


def test_image_fidelity_closed_forms(rng):
    a = rng.uniform(0.1, 0.8, (32, 32))
    s, p, m = image_fidelity(a, a)
    assert s == 1.0 and m == 0.0 and math.isinf(p)
    assert report_psnr(p) == PSNR_CAP_DB
    s, p, m = image_fidelity(a, a + 0.1)
    assert m == pytest.approx(0.01, abs=1e-12)
    assert p == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(OctDataError):
        image_fidelity(a, a[:, :5])


@pytest.mark.parametrize("seed", range(6))
def test_ssim_matches_reference_implementation(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 1, (48, 40))
    b = np.clip(a + r.normal(0, 0.05 * (seed + 1), a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


@given(arrays(np.uint8, (16, 16)), arrays(np.uint8, (16, 16)))
def test_mse_detects_any_change(a, b):
    # 8-bit grid: squared differences cannot underflow to zero
    a, b = a / 255.0, b / 255.0
    _, _, m = image_fidelity(a, b)
    assert (m > 0) == (not np.array_equal(a, b))
    assert image_fidelity(a, a)[0] == 1.0
