import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from octchoroid.oct_core import AXIAL_PITCH_UM, CHOROID, LAYER_NAMES, SENTINEL, BScan, \
    OctDataError, OctVolume, boundary_from_mask, fill_columns, layer_order_violations, \
    load_image, load_labels, load_mask, load_volume, mask_from_boundaries, save_image, \
    save_labels, save_mask, save_volume, thickness_from_mask

THREE_COL = np.array([
    [0, 0, 0],
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [1, 1, 1],
    [0, 1, 1],
    [0, 0, 1],
    [0, 0, 0],
], dtype=np.uint8)


def test_layer_list():
    assert len(LAYER_NAMES) == 12
    assert LAYER_NAMES[CHOROID] == "choroid"
    assert AXIAL_PITCH_UM == pytest.approx(3.024, abs=1e-3)


def test_volume_invariants():
    with pytest.raises(OctDataError):
        OctVolume(np.zeros((2, 3)))
    with pytest.raises(OctDataError):
        OctVolume(np.full((1, 2, 2), 1.5))
    with pytest.raises(OctDataError):
        OctVolume(np.zeros((1, 2, 2)), axial_pitch_um=0)
    with pytest.raises(OctDataError):
        OctVolume(np.zeros((1, 2, 2)), frame_pitch_um=float("inf"))
    v = OctVolume(np.zeros((2, 9, 8)))
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1
    assert v.bscan(1).shape == (9, 8)
    with pytest.raises(OctDataError):
        BScan(np.zeros((7, 20)))


def test_boundary_from_mask_examples():
    m = np.zeros((30, 5), np.uint8)
    m[10:20] = 1
    u, l = boundary_from_mask(m)
    assert (u == 10).all() and (l == 20).all()
    u, l = boundary_from_mask(np.zeros((4, 3)))
    assert (u == SENTINEL).all() and (l == SENTINEL).all()
    u, l = boundary_from_mask(THREE_COL)
    assert u.tolist() == [2, 3, 4] and l.tolist() == [5, 6, 7]


def test_boundary_from_mask_rejects_split_column():
    m = np.zeros((10, 4), np.uint8)
    m[1:3, 2] = 1
    m[6:8, 2] = 1
    with pytest.raises(OctDataError, match="column 2"):
        boundary_from_mask(m)


def test_mask_from_boundaries_examples():
    assert mask_from_boundaries([0, 0], [6, 6], (6, 2)).all()
    assert not mask_from_boundaries([3, 4], [3, 4], (6, 2)).any()
    np.testing.assert_array_equal(mask_from_boundaries([2, 3, 4], [5, 6, 7], (8, 3)), THREE_COL)
    with pytest.raises(OctDataError, match="cross"):
        mask_from_boundaries([5, 1], [2, 3], (8, 2))


@st.composite
def single_run_masks(draw):
    h = draw(st.integers(1, 20))
    w = draw(st.integers(1, 12))
    m = np.zeros((h, w), np.uint8)
    for c in range(w):
        if draw(st.booleans()):
            a = draw(st.integers(0, h - 1))
            b = draw(st.integers(a + 1, h))
            m[a:b, c] = 1
    return m


@given(single_run_masks())
def test_boundary_mask_round_trip(m):
    u, l = boundary_from_mask(m)
    np.testing.assert_array_equal(mask_from_boundaries(u, l, m.shape), m)


@given(single_run_masks(), st.floats(0.1, 20))
def test_thickness_linear_in_pitch(m, pitch):
    if not m.any():
        return
    a = thickness_from_mask(m, 1.0)
    b = thickness_from_mask(m, pitch)
    np.testing.assert_allclose(b.values, a.values * pitch, rtol=1e-12)


def test_thickness_examples():
    m = np.zeros((40, 6), np.uint8)
    m[5:15] = 1
    t = thickness_from_mask(m, AXIAL_PITCH_UM)
    assert t.mean == pytest.approx(30.24, abs=0.01)
    m[:, :3] = 0
    t = thickness_from_mask(m, 2.0)
    assert t.valid.tolist() == [False] * 3 + [True] * 3
    assert t.mean == 20.0
    with pytest.raises(OctDataError):
        thickness_from_mask(np.zeros((5, 5)))


def test_layer_order_and_fill():
    lab = np.repeat(np.arange(12)[:, None], 3, axis=1)
    assert not layer_order_violations(lab).any()
    lab[5, 1] = 2
    assert layer_order_violations(lab).tolist() == [False, True, False]
    m = np.zeros((8, 2), np.uint8)
    m[1, 0] = m[4, 0] = 1
    f = fill_columns(m)
    assert f[1:5, 0].all() and f[:, 1].sum() == 0


def test_volume_round_trip(tmp_path, rng):
    vox = rng.integers(0, 256, (3, 10, 7)).astype(np.float32) / 255
    v = OctVolume(vox, axial_pitch_um=2.5)
    save_volume(v, tmp_path / "v.raw")
    w = load_volume(tmp_path / "v.raw")
    np.testing.assert_array_equal(w.voxels, v.voxels)
    assert w.axial_pitch_um == 2.5


def test_load_volume_max_bytes_and_errors(tmp_path):
    p = tmp_path / "a.raw"
    p.write_bytes(b"\xff" * 64)
    with pytest.raises(OctDataError, match="sidecar"):
        load_volume(p)
    (tmp_path / "a.json").write_text(json.dumps({"frames": 4, "depth": 4, "alines": 4}))
    assert (load_volume(p).voxels == 1.0).all()
    (tmp_path / "a.json").write_text(json.dumps({"frames": 4, "depth": 4, "alines": 5}))
    with pytest.raises(OctDataError, match="bytes"):
        load_volume(p)
    (tmp_path / "a.json").write_text(json.dumps({"frames": 4, "depth": 4, "alines": 4,
                                                 "axial_pitch_um": -1}))
    with pytest.raises(OctDataError):
        load_volume(p)


def test_volume_sidecar_geometry(tmp_path):
    # the sidecar dims, not the byte order, decide the axis layout
    p = tmp_path / "b.raw"
    p.write_bytes(bytes(range(24)))
    (tmp_path / "b.json").write_text(json.dumps({"frames": 2, "depth": 3, "alines": 4}))
    v = load_volume(p)
    assert v.shape == (2, 3, 4)
    assert v.voxels[1, 0, 0] == pytest.approx(12 / 255)


def test_png_round_trips(tmp_path, rng):
    img = rng.integers(0, 256, (9, 11)) / 255
    save_image(tmp_path / "i.png", img)
    np.testing.assert_allclose(load_image(tmp_path / "i.png"), img, atol=1e-6)
    m = rng.integers(0, 2, (9, 11))
    save_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)
    lab = rng.integers(0, 12, (9, 11))
    save_labels(tmp_path / "l.png", lab)
    np.testing.assert_array_equal(load_labels(tmp_path / "l.png"), lab)
    with pytest.raises(OctDataError):
        save_labels(tmp_path / "bad.png", np.full((2, 2), 12))
