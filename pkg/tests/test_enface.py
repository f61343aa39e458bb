
import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from octchoroid.enface import derive_rpe_band, enface_pair, minmax, project_mean, rpe_shift_px
from octchoroid.oct_core import SENTINEL, OctVolume
from octchoroid.phantom import PhantomConfig, enface_truth, generate_volume


def test_shift_px():
    assert rpe_shift_px(3000 / 992) == 7
    assert rpe_shift_px(20.0) == 1


def test_rpe_band_clamps_and_keeps_sentinel():
    up, lo = derive_rpe_band(np.array([3, 50, SENTINEL]), 3000 / 992)
    assert up.tolist() == [0, 43, SENTINEL]
    assert lo.tolist() == [3, 50, SENTINEL]


def test_project_mean_constant_and_ramp():
    vol = np.full((2, 30, 4), 0.4)
    img, empty = project_mean(vol, np.full((2, 4), 5), np.full((2, 4), 12))
    np.testing.assert_allclose(img, 0.4)
    assert not empty.any()
    h = 40
    ramp = np.broadcast_to((np.arange(h) / h)[None, :, None], (1, h, 3))
    img, _ = project_mean(ramp, np.full((1, 3), 10), np.full((1, 3), 20))
    np.testing.assert_allclose(img, np.arange(10, 20).mean() / h, rtol=1e-12)


def test_project_mean_empty_band_flagged():
    vol = np.ones((1, 10, 3))
    img, empty = project_mean(vol, np.array([[2, 4, SENTINEL]]), np.array([[5, 4, SENTINEL]]))
    assert empty.tolist() == [[False, True, True]]
    assert img[0, 1] == 0 and img[0, 2] == 0


@given(arrays(np.float64, (2, 12, 5), elements=st.floats(0, 1)), st.integers(0, 11))
def test_height_one_band_is_the_row(vol, r):
    img, _ = project_mean(vol, np.full((2, 5), r), np.full((2, 5), r + 1))
    np.testing.assert_array_equal(img, vol[:, r, :])


@given(arrays(np.float64, (1, 12, 4), elements=st.floats(0, 1)),
       st.integers(0, 11), st.integers(0, 3), st.floats(0, 1))
def test_projection_monotone(vol, r, c, bump):
    up, lo = np.full((1, 4), 2), np.full((1, 4), 9)
    before, _ = project_mean(vol, up, lo)
    v2 = vol.copy()
    v2[0, r, c] += bump
    after, _ = project_mean(v2, up, lo)
    assert (after >= before - 1e-12).all()


def test_minmax():
    img, rng = minmax(np.array([[2.0, 4.0], [3.0, 6.0]]))
    assert rng == (2.0, 6.0) and img.min() == 0 and img.max() == 1
    z, _ = minmax(np.full((2, 2), 3.0))
    assert (z == 0).all()


def _truth_pair(cfg):
    vol, samples = generate_volume(cfg)
    t = enface_truth(samples)
    return vol, t, enface_pair(vol, t["choroid_upper"], t["choroid_lower"])


def test_noiseless_choroid_enface_is_planted_texture():
    cfg = PhantomConfig(seed=4, frames=8, speckle_contrast=0.0, shadow_attenuation=1.0)
    _, t, ef = _truth_pair(cfg)
    expect, _ = minmax(t["clean_choroid"])
    np.testing.assert_allclose(ef.choroid, expect, atol=1e-6)
    assert ef.rpe.shape == (8, cfg.width)


def test_single_frame_volume():
    _, _, ef = _truth_pair(PhantomConfig(seed=1, frames=1))
    assert ef.rpe.shape == (1, 192) and ef.choroid.shape == (1, 192)


def test_noiseless_shadows_dark_exactly_at_shadow_columns():
    cfg = PhantomConfig(seed=6, frames=16, speckle_contrast=0.0, boundary_wiggle_amplitude_px=0.0)
    _, t, ef = _truth_pair(cfg)
    shadow = t["shadow_mask"].astype(bool)
    assert shadow.any()
    assert ef.rpe[shadow].max() < ef.rpe[~shadow].min()


def test_shadow_columns_darker_than_neighbourhood_median():
    _, t, ef = _truth_pair(PhantomConfig(seed=9, frames=32))
    shadow = t["shadow_mask"].astype(bool)
    f, a = shadow.shape
    darker = []
    for i, j in np.argwhere(shadow):
        nb = [ef.rpe[y, x] for y in range(max(i - 1, 0), min(i + 2, f))
              for x in range(max(j - 1, 0), min(j + 2, a))
              if (y, x) != (i, j) and not shadow[y, x]]
        if nb:
            darker.append(ef.rpe[i, j] < np.median(nb))
    assert len(darker) > 20
    assert np.mean(darker) >= 0.95
    assert ef.rpe[shadow].mean() < np.median(ef.rpe[~shadow])


def test_empty_choroid_frame_flagged():
    cfg = PhantomConfig(seed=2, frames=3)
    vol, samples = generate_volume(cfg)
    t = enface_truth(samples)
    up, lo = t["choroid_upper"].copy(), t["choroid_lower"].copy()
    up[1] = SENTINEL
    lo[1] = SENTINEL
    ef = enface_pair(vol, up, lo)
    assert ef.empty[1].all() and not ef.empty[0].any()
    assert (ef.rpe[1] == 0).all()
    assert 0 <= ef.choroid.min() and ef.choroid.max() <= 1


def test_accepts_plain_arrays():
    vol = OctVolume(np.random.default_rng(0).uniform(0, 1, (2, 20, 5)))
    a, _ = project_mean(vol, np.full((2, 5), 3), np.full((2, 5), 9))
    b, _ = project_mean(vol.voxels, np.full((2, 5), 3), np.full((2, 5), 9))
    np.testing.assert_array_equal(a, b)
