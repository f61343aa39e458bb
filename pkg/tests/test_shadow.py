from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from octchoroid import shadow as sh
from octchoroid.enface import minmax
from octchoroid.phantom import PhantomConfig, enface_truth, generate_volume
from octchoroid.training import TrainingDivergence


# -- refinement ------------------------------------------------------------------------


def _caliber(mask, row):
    return int(mask[row].sum())


def test_refine_empty_and_line():
    assert sh.refine_mask(np.zeros((20, 20), np.uint8)).sum() == 0
    m = np.zeros((60, 60), np.uint8)
    m[:, 30] = 1
    r = sh.refine_mask(m)
    assert _caliber(r, 30) == 7
    assert r[:, 27:34].all() and r[:, :27].sum() == 0


def test_refine_bridges_gap():
    m = np.zeros((60, 60), np.uint8)
    m[30, 5:25] = 1
    m[30, 27:50] = 1
    assert ndimage.label(m)[1] == 2
    assert ndimage.label(sh.refine_mask(m))[1] == 1


def test_refine_line_at_border_survives():
    m = np.zeros((30, 30), np.uint8)
    m[0, :] = 1
    r = sh.refine_mask(m)
    assert r[0].all() and _caliber(r.T, 10) == 4


@settings(max_examples=100)
@given(arrays(np.uint8, st.tuples(st.integers(5, 40), st.integers(5, 40)),
              elements=st.sampled_from([0, 0, 0, 1])))
def test_refine_is_superset(m):
    r = sh.refine_mask(m)
    assert r.shape == m.shape and (r >= m).all()


def test_refine_rejects_non_binary():
    with pytest.raises(ValueError):
        sh.refine_mask(np.full((4, 4), 3))


# -- edges -----------------------------------------------------------------------------


def test_edge_map_constant_image_is_empty():
    assert sh.edge_map(np.full((20, 30), 0.4)).sum() == 0


def test_edge_map_vertical_step_is_single_line():
    img = np.full((32, 32), 0.25)
    img[:, 16:] = 0.75
    e = sh.edge_map(img)
    inner = e[4:-4]
    assert (inner.sum(1) == 1).all()
    # the step sits between columns 15 and 16; either may carry the edge
    assert set(np.argwhere(inner)[:, 1]) <= {15, 16}
    assert ndimage.label(e, np.ones((3, 3)))[1] == 1
    assert e[:, :12].sum() == 0 and e[:, 20:].sum() == 0


def test_edge_map_recalls_planted_vessel_boundaries():
    _, samples = generate_volume(PhantomConfig(seed=3, frames=64))
    t = enface_truth(samples)
    clean, _ = minmax(t["clean_choroid"])
    e = sh.edge_map(clean).astype(bool)
    v = t["vessel_map"]
    boundary = v ^ ndimage.binary_erosion(v)
    hit = ndimage.binary_dilation(e) & boundary
    assert hit.sum() / boundary.sum() >= 0.7


# -- networks --------------------------------------------------------------------------


def test_patch_discriminator_receptive_field_is_70():
    assert sh.receptive_field() == 70
    d = sh.PatchDiscriminator(1, 4)
    # empirical check: gradient support of one output logit on the input
    x = torch.zeros(1, 1, 140, 140, requires_grad=True)
    with torch.no_grad():
        for m in d.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight_orig.fill_(1.0) if hasattr(m, "weight_orig") else m.weight.fill_(1.0)
    out, _ = d(x + 0.1)
    out[0, 0, out.shape[2] // 2, out.shape[3] // 2].backward()
    rows = np.flatnonzero(x.grad[0, 0].abs().sum(1).numpy())
    assert rows[-1] - rows[0] + 1 == 70


def test_generators_preserve_shape_and_range():
    g = sh.Generator(3, 8, 2, 2)
    y = g(torch.rand(2, 3, 30, 50))
    assert y.shape == (2, 1, 30, 50) and y.min() >= 0 and y.max() <= 1
    e = sh.Generator(3, 8, 2, 2, edge=True)(torch.rand(1, 3, 16, 16))
    assert e.min() >= 0 and e.max() <= 1


def test_feature_extractor_fixed():
    a, b = sh.FeatureExtractor(), sh.FeatureExtractor()
    x = torch.rand(1, 1, 16, 16)
    for fa, fb in zip(a(x), b(x)):
        assert torch.equal(fa, fb)
    assert not any(p.requires_grad for p in a.parameters())


# -- sampler ---------------------------------------------------------------------------


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_vessel_mask_nonempty_and_bounded(seed):
    m = sh.vessel_mask((48, 48), np.random.default_rng(seed))
    assert m.any() and m.mean() <= 0.4 and set(np.unique(m)) <= {0, 1}


def test_vessel_mask_width():
    rng = np.random.default_rng(0)
    m = sh.vessel_mask((64, 64), rng, width_px=(5, 5), strokes=(1, 1))
    # the medial axis distance of a width-w stroke is about w / 2
    d = ndimage.distance_transform_edt(m)
    assert 2 <= d.max() <= 4


# -- training contract --------------------------------------------------------------------

TINY = sh.DeshadowConfig(steps={"edge": 2, "inpaint": 2, "joint": 2}, batch_size=2,
                         crop=(32, 32), base_channels=4, n_blocks=1)


@pytest.fixture(scope="module")
def textures():
    r = np.random.default_rng(0)
    return [ndimage.gaussian_filter(r.uniform(0, 1, (40, 48)), 2) for _ in range(3)]


def test_stage_order_enforced(textures):
    with pytest.raises(ValueError):
        sh.train_deshadow(textures, TINY, "inpaint")
    model, rows = sh.train_deshadow(textures, TINY, "edge")
    assert model.stages_done == ["edge"] and len(rows) == 2
    with pytest.raises(ValueError, match="inpaint"):
        sh.train_deshadow(textures, TINY, "joint", model)
    with pytest.raises(ValueError):
        sh.train_deshadow(textures, TINY, "polish", model)


def test_full_cascade_and_checkpoint(textures, tmp_path):
    model, rows = sh.train_deshadow_all(textures, TINY)
    assert model.stages_done == list(sh.STAGES)
    assert {"tex_l1", "edge_fm"} <= set(rows[-1])
    sh.save_deshadow(model, tmp_path / "d.ckpt", TINY)
    m2 = sh.load_deshadow(tmp_path / "d.ckpt")
    assert m2.stages_done == model.stages_done
    img = textures[0].astype(np.float32)
    mask = np.zeros_like(img, np.uint8)
    mask[10:20, 5:30] = 1
    a = sh.eliminate_shadows(img, mask, model)
    b = sh.eliminate_shadows(img, mask, m2)
    assert np.array_equal(a, b)
    assert np.array_equal(a, sh.eliminate_shadows(img, mask, model))


def test_texture_too_small(textures):
    with pytest.raises(ValueError):
        sh.train_deshadow([t[:10] for t in textures], TINY, "edge")


def test_collapse_guard():
    g = sh._CollapseGuard(1e-4, 50)
    for _ in range(49):
        g.update(1e-6, "edge")
    g.update(0.5, "edge")  # streak reset
    for _ in range(49):
        g.update(1e-6, "edge")
    with pytest.raises(TrainingDivergence, match="discriminator"):
        g.update(1e-6, "edge")


# -- elimination ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(0)
    m = sh.DeshadowModel(4, 1)
    m.stages_done = list(sh.STAGES)
    return m.eval()


def test_empty_mask_returns_input(untrained):
    img = np.random.default_rng(1).uniform(0, 1, (24, 40)).astype(np.float32)
    out = sh.eliminate_shadows(img, np.zeros_like(img, np.uint8), untrained)
    assert np.array_equal(out, img)


def test_large_mask_refused(untrained):
    img = np.zeros((20, 20), np.float32)
    m = np.zeros((20, 20), np.uint8)
    m[:13] = 1
    with pytest.raises(ValueError, match="60%"):
        sh.eliminate_shadows(img, m, untrained)


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_composition_exact_outside_mask(untrained, seed):
    r = np.random.default_rng(seed)
    img = r.uniform(0, 1, (24, 40)).astype(np.float32)
    m = (r.uniform(size=img.shape) < 0.2).astype(np.uint8)
    out = sh.eliminate_shadows(img, m, untrained)
    assert np.array_equal(out[m == 0], img[m == 0])
    assert out.min() >= 0 and out.max() <= 1


def test_shape_mismatch(untrained):
    with pytest.raises(ValueError):
        sh.eliminate_shadows(np.zeros((8, 8)), np.zeros((8, 9), np.uint8), untrained)


# -- segmenter -------------------------------------------------------------------------


def test_segmenter_smoke(tmp_path):
    r = np.random.default_rng(0)
    img = r.uniform(0.5, 1, (16, 32)).astype(np.float32)
    m = np.zeros((16, 32), np.uint8)
    m[:, 10:13] = 1
    img[m == 1] *= 0.3
    cfg = replace(sh.SHADOW_SEG_CONFIG, max_epochs=2)
    model, ck, rows = sh.train_shadow_segmenter([(img, m)], cfg, base_channels=4, levels=3,
                                                min_epoch_samples=8)
    assert len(rows) == 2
    sh.save_shadow_segmenter(model, tmp_path / "s.ckpt", ck)
    m2 = sh.load_shadow_segmenter(tmp_path / "s.ckpt")
    np.testing.assert_array_equal(sh.shadow_probability(img, model), sh.shadow_probability(img, m2))
    refined, raw = sh.locate_shadows(img, model)
    assert (refined >= raw).all()
    with pytest.raises(ValueError):
        sh.train_shadow_segmenter([])
