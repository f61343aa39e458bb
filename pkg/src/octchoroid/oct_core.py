"""Data model, file I/O and boundary/region conversions for OCT data.

Arrays follow a single axis convention everywhere in the package:
volumes are ``(frame, depth_row, aline)``, B-scans and label maps are
``(depth_row, aline)`` and en-face images are ``(frame, aline)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

# Default device geometry: 992 samples over ~3 mm depth, 6x6 mm scan of
# 512 A-lines by 256 frames.
AXIAL_PITCH_UM = 3000.0 / 992
LATERAL_PITCH_UM = 6000.0 / 512
FRAME_PITCH_UM = 6000.0 / 256

LAYER_NAMES = (
    "background_above",
    "rnfl",
    "gcl",
    "ipl",
    "inl",
    "opl",
    "onl",
    "prl",
    "rpe",
    "choroid",
    "sclera",
    "background_below",
)
N_LAYERS = len(LAYER_NAMES)
GCL = LAYER_NAMES.index("gcl")
RPE = LAYER_NAMES.index("rpe")
CHOROID = LAYER_NAMES.index("choroid")

# Row value marking an A-line with no region pixels.
SENTINEL = -1

STORAGE_MAX = 255


class OctDataError(ValueError):
    """Raised for malformed volumes, masks or sidecars."""


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def _check_pitch(name, value):
    if not np.isfinite(value) or value <= 0:
        raise OctDataError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class OctVolume:
    voxels: np.ndarray
    axial_pitch_um: float = AXIAL_PITCH_UM
    lateral_pitch_um: float = LATERAL_PITCH_UM
    frame_pitch_um: float = FRAME_PITCH_UM

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise OctDataError(f"volume must be 3D with all dims >= 1, got {vox.shape}")
        if vox.size and (vox.min() < 0 or vox.max() > 1 or not np.isfinite(vox).all()):
            raise OctDataError("voxel intensities must lie in [0, 1]")
        for name in ("axial_pitch_um", "lateral_pitch_um", "frame_pitch_um"):
            _check_pitch(name, getattr(self, name))
        object.__setattr__(self, "voxels", _frozen(vox))

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def frames(self):
        return self.voxels.shape[0]

    @property
    def depth(self):
        return self.voxels.shape[1]

    @property
    def alines(self):
        return self.voxels.shape[2]

    def bscan(self, index):
        return BScan(self.voxels[index], self.axial_pitch_um, self.lateral_pitch_um)


@dataclass(frozen=True)
class BScan:
    pixels: np.ndarray
    axial_pitch_um: float = AXIAL_PITCH_UM
    lateral_pitch_um: float = LATERAL_PITCH_UM

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] < 8 or px.shape[1] < 8:
            raise OctDataError(f"B-scan must be 2D and at least 8x8, got {px.shape}")
        if px.min() < 0 or px.max() > 1:
            raise OctDataError("B-scan intensities must lie in [0, 1]")
        _check_pitch("axial_pitch_um", self.axial_pitch_um)
        _check_pitch("lateral_pitch_um", self.lateral_pitch_um)
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class ThicknessProfile:
    """Per-A-line thickness; ``valid`` is False where the region is absent.

    ``values`` holds 0 for invalid columns.  ``mean`` averages valid columns
    only and is the scalar biomarker.
    """

    values: np.ndarray
    valid: np.ndarray
    unit: str = "um"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        object.__setattr__(self, "valid", _frozen(self.valid, bool))

    @property
    def mean(self):
        if not self.valid.any():
            return float("nan")
        return float(self.values[self.valid].mean())

    def flipped(self):
        return ThicknessProfile(self.values[::-1], self.valid[::-1], self.unit)


def check_binary(mask, name="mask"):
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if not np.isin(m, (0, 1)).all():
        raise OctDataError(f"{name} must be binary (values 0/1)")
    return m.astype(bool)


def column_runs(mask):
    """Number of contiguous runs of ones in every column of a 2D mask."""
    m = check_binary(mask).astype(np.int8)
    rising = np.diff(m, axis=0, prepend=0) == 1
    return rising.sum(axis=0)


def boundary_from_mask(mask):
    """Upper (first row) and lower (one past last row) boundary per column.

    Columns with no region pixels get ``SENTINEL`` in both curves.
    """
    m = check_binary(mask)
    if m.ndim != 2:
        raise OctDataError("mask must be 2D")
    runs = column_runs(m)
    bad = np.flatnonzero(runs > 1)
    if bad.size:
        raise OctDataError(
            f"column {bad[0]} has {runs[bad[0]]} separate runs; expected at most one"
        )
    present = runs == 1
    upper = np.where(present, np.argmax(m, axis=0), SENTINEL)
    last = m.shape[0] - np.argmax(m[::-1], axis=0)
    lower = np.where(present, last, SENTINEL)
    return upper.astype(np.int64), lower.astype(np.int64)


def mask_from_boundaries(upper, lower, shape):
    """Region mask with rows ``upper[i] <= r < lower[i]`` set in column ``i``.

    Fractional rows are rounded to the nearest integer.  Sentinel columns
    stay empty.
    """
    height, width = shape
    u = np.asarray(upper, dtype=np.float64)
    l = np.asarray(lower, dtype=np.float64)
    if u.shape != (width,) or l.shape != (width,):
        raise OctDataError(f"boundary length must equal mask width {width}")
    if not (np.isfinite(u).all() and np.isfinite(l).all()):
        raise OctDataError("boundary curves must be finite")
    skip = (u == SENTINEL) | (l == SENTINEL)
    ui = np.rint(u).astype(np.int64)
    li = np.rint(l).astype(np.int64)
    crossing = np.flatnonzero(~skip & (ui > li))
    if crossing.size:
        raise OctDataError(f"boundaries cross at column {crossing[0]}")
    rows = np.arange(height)[:, None]
    m = (rows >= ui) & (rows < li) & ~skip
    return m.astype(np.uint8)


def thickness_from_boundaries(upper, lower, axial_pitch_um=1.0):
    u = np.asarray(upper, dtype=np.float64)
    l = np.asarray(lower, dtype=np.float64)
    valid = (u != SENTINEL) & (l != SENTINEL)
    values = np.where(valid, (l - u) * axial_pitch_um, 0.0)
    unit = "px" if axial_pitch_um == 1.0 else "um"
    return ThicknessProfile(values, valid, unit)


def thickness_from_mask(mask, axial_pitch_um=1.0):
    """Per-column region thickness scaled by the axial pitch.

    With the default pitch of 1 the result is in pixels.
    """
    _check_pitch("axial_pitch_um", axial_pitch_um)
    upper, lower = boundary_from_mask(mask)
    profile = thickness_from_boundaries(upper, lower, axial_pitch_um)
    if not profile.valid.any():
        raise OctDataError("mask is empty in every column")
    return profile


def layer_order_violations(labels):
    """Boolean per column: True where the column is not an ordered layer stack.

    A column is well ordered when each label occupies one contiguous interval
    and labels never decrease going down the column.
    """
    lab = np.asarray(labels)
    decreasing = (np.diff(lab, axis=0) < 0).any(axis=0)
    # With no decreases, every label's rows are automatically contiguous.
    return decreasing


def fill_columns(mask):
    """Make every column a single run by filling between its first and last pixel."""
    m = check_binary(mask)
    present = m.any(axis=0)
    first = np.argmax(m, axis=0)
    last = m.shape[0] - np.argmax(m[::-1], axis=0)
    return mask_from_boundaries(
        np.where(present, first, SENTINEL), np.where(present, last, SENTINEL), m.shape
    )


# -- file I/O ---------------------------------------------------------------


def _sidecar(path):
    return Path(path).with_suffix(".json")


def save_volume(volume, path):
    """Write ``volume`` as raw uint8 voxels plus a JSON sidecar next to it."""
    path = Path(path)
    q = np.rint(np.clip(volume.voxels, 0, 1) * STORAGE_MAX).astype("<u1")
    path.write_bytes(q.tobytes(order="C"))
    meta = {
        "frames": volume.frames,
        "depth": volume.depth,
        "alines": volume.alines,
        "axial_pitch_um": volume.axial_pitch_um,
        "lateral_pitch_um": volume.lateral_pitch_um,
        "frame_pitch_um": volume.frame_pitch_um,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_volume(path):
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise OctDataError(f"missing metadata sidecar {side}")
    meta = json.loads(side.read_text())
    try:
        dims = tuple(int(meta[k]) for k in ("frames", "depth", "alines"))
    except KeyError as exc:
        raise OctDataError(f"sidecar {side} lacks key {exc.args[0]!r}") from None
    raw = np.frombuffer(path.read_bytes(), dtype="<u1")
    if raw.size != int(np.prod(dims)):
        raise OctDataError(
            f"{path} holds {raw.size} bytes but sidecar dims {dims} need {int(np.prod(dims))}"
        )
    voxels = raw.reshape(dims).astype(np.float32) / STORAGE_MAX
    return OctVolume(
        voxels,
        axial_pitch_um=float(meta.get("axial_pitch_um", AXIAL_PITCH_UM)),
        lateral_pitch_um=float(meta.get("lateral_pitch_um", LATERAL_PITCH_UM)),
        frame_pitch_um=float(meta.get("frame_pitch_um", FRAME_PITCH_UM)),
    )


def save_image(path, image):
    """Save a [0, 1] float image as 8-bit grayscale PNG."""
    a = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * STORAGE_MAX)
    Image.fromarray(a.astype(np.uint8), mode="L").save(path)


def load_image(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.float32) / STORAGE_MAX


def save_mask(path, mask):
    m = check_binary(mask)
    Image.fromarray(m.astype(np.uint8) * STORAGE_MAX, mode="L").save(path)


def load_mask(path):
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def save_labels(path, labels):
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() >= N_LAYERS:
        raise OctDataError(f"label values must be in 0..{N_LAYERS - 1}")
    Image.fromarray(lab.astype(np.uint8), mode="L").save(path)


def load_labels(path):
    lab = np.asarray(Image.open(path), dtype=np.int64)
    if lab.max() >= N_LAYERS:
        raise OctDataError(f"{path} holds label values above {N_LAYERS - 1}")
    return lab
