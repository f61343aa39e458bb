"""En-face projection of segmented layer bands."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .oct_core import SENTINEL

RPE_SHIFT_UM = 20.0


def rpe_shift_px(axial_pitch_um, shift_um=RPE_SHIFT_UM):
    return int(round(shift_um / axial_pitch_um))


def derive_rpe_band(choroid_upper, axial_pitch_um, shift_um=RPE_SHIFT_UM):
    """RPE band ``[upper - shift, upper)`` above the choroid, clamped at row 0.

    ``choroid_upper`` may be one curve or a (frames, alines) stack; sentinel
    columns stay sentinel.
    """
    up = np.asarray(choroid_upper, dtype=np.float64)
    shift = rpe_shift_px(axial_pitch_um, shift_um)
    missing = up == SENTINEL
    top = np.clip(np.rint(up) - shift, 0, None)
    band_upper = np.where(missing, SENTINEL, top)
    band_lower = np.where(missing, SENTINEL, np.rint(up))
    return band_upper.astype(np.int64), band_lower.astype(np.int64)


def project_mean(voxels, upper, lower):
    """Mean of voxels in rows ``[upper, lower)`` for every (frame, aline).

    ``voxels`` is a (frames, depth, alines) array or an ``OctVolume``;
    ``upper``/``lower`` are (frames, alines) row arrays (fractional rows are
    rounded).  Returns ``(image, empty)`` where ``empty`` flags positions
    with no rows in the band; those pixels are 0.
    """
    vox = np.asarray(getattr(voxels, "voxels", voxels), dtype=np.float64)
    f, d, a = vox.shape
    u = np.asarray(upper, dtype=np.float64).reshape(f, a)
    l = np.asarray(lower, dtype=np.float64).reshape(f, a)
    missing = (u == SENTINEL) | (l == SENTINEL)
    ui = np.clip(np.rint(u), 0, d).astype(np.int64)
    li = np.clip(np.rint(l), 0, d).astype(np.int64)
    # masked sums rather than cumulative differences: a one-row band returns
    # the voxel row exactly
    rows = np.arange(d)[None, :, None]
    band = (rows >= ui[:, None, :]) & (rows < li[:, None, :])
    total = np.where(band, vox, 0.0).sum(axis=1)
    n = li - ui
    empty = missing | (n <= 0)
    image = np.where(empty, 0.0, total / np.maximum(n, 1))
    return image, empty


def minmax(image, valid=None):
    img = np.asarray(image, dtype=np.float64)
    vals = img[valid] if valid is not None and valid.any() else img
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        return np.zeros_like(img), (lo, hi)
    return np.clip((img - lo) / (hi - lo), 0, 1), (lo, hi)


@dataclass(frozen=True)
class EnFacePair:
    rpe: np.ndarray
    choroid: np.ndarray
    empty: np.ndarray
    rpe_range: tuple
    choroid_range: tuple


def enface_pair(volume, choroid_upper, choroid_lower, axial_pitch_um=None):
    """Min-max normalized en-face RPE and choroid images of a segmented volume.

    ``choroid_upper``/``choroid_lower`` are (frames, alines) boundary rows of
    the segmented choroid (sentinel where a frame's choroid is missing).
    """
    pitch = axial_pitch_um or volume.axial_pitch_um
    up = np.asarray(choroid_upper)
    lo = np.asarray(choroid_lower)
    ru, rl = derive_rpe_band(up, pitch)
    rpe, e1 = project_mean(volume, ru, rl)
    ch, e2 = project_mean(volume, up, lo)
    empty = e1 | e2
    rpe_n, r_range = minmax(rpe, ~empty)
    ch_n, c_range = minmax(ch, ~empty)
    rpe_n[empty] = 0
    ch_n[empty] = 0
    return EnFacePair(rpe_n.astype(np.float32), ch_n.astype(np.float32), empty, r_range, c_range)


def enface_from_segmentations(volume, segmentations):
    """En-face pair from per-frame ``Segmentation`` results."""
    up = np.stack([s.upper for s in segmentations])
    lo = np.stack([s.lower for s in segmentations])
    return enface_pair(volume, up, lo)
