"""Synthetic OCT phantoms with exact ground truth.

Every structure of a phantom volume (layer surfaces, choroidal vessel
pattern, retinal vessel paths) is a deterministic function of
``(config.seed, frame, aline)``.  A single B-scan can therefore be generated
on its own and is bit-identical to the same frame cut from the volume.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .oct_core import (
    AXIAL_PITCH_UM,
    CHOROID,
    GCL,
    LAYER_NAMES,
    N_LAYERS,
    BScan,
    OctDataError,
    OctVolume,
    ThicknessProfile,
    layer_order_violations,
    save_image,
    save_labels,
    save_mask,
    thickness_from_mask,
)

SEED_STRIDE = 1_000_000


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    width: int = 192
    height: int = 192
    frames: int = 1
    # background-above, RNFL, GCL, IPL, INL, OPL, ONL, PRL, RPE, choroid, sclera, background-below
    layer_mean_thicknesses_px: tuple = (26, 10, 10, 8, 9, 6, 14, 8, 6, 30, 30, 15)
    layer_reflectances: tuple = (0.04, 0.80, 0.48, 0.62, 0.30, 0.56, 0.18, 0.42, 0.95, 0.70, 0.36, 0.10)
    boundary_wiggle_amplitude_px: float = 2.0
    layer_thickness_jitter: float = 0.15
    choroid_thickness_jitter: float = 0.35
    retina_curvature_px: float = 8.0
    speckle_contrast: float = 0.25
    vessel_count_range: tuple = (2, 4)
    vessel_radius_range_px: tuple = (1.5, 3.5)
    vessel_reflectance: float = 0.85
    shadow_attenuation: float = 0.3
    csi_blur_sigma_px: float = 3.0
    choroid_vessel_fraction: float = 0.45
    choroid_vessel_contrast: float = 0.55
    choroid_vessel_scale_px: float = 2.5
    axial_pitch_um: float = AXIAL_PITCH_UM

    def __post_init__(self):
        # tuples survive JSON round trips as lists
        for name in ("layer_mean_thicknesses_px", "layer_reflectances",
                     "vessel_count_range", "vessel_radius_range_px"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.width < 8 or self.height < 8 or self.frames < 1:
            raise OctDataError("phantom needs width, height >= 8 and frames >= 1")
        t = np.asarray(self.layer_mean_thicknesses_px, dtype=float)
        r = np.asarray(self.layer_reflectances, dtype=float)
        if t.shape != (N_LAYERS,) or r.shape != (N_LAYERS,):
            raise OctDataError(f"need {N_LAYERS} layer thicknesses and reflectances")
        if (t < 0).any() or t.sum() >= self.height:
            raise OctDataError("layer thicknesses must be >= 0 and sum below the image height")
        if (r < 0).any() or (r > 1).any():
            raise OctDataError("reflectances must lie in [0, 1]")
        if (np.abs(np.diff(r)) < 0.05).any():
            raise OctDataError("adjacent layer reflectances must differ by at least 0.05")
        if not 0 < self.shadow_attenuation <= 1:
            raise OctDataError("shadow_attenuation must lie in (0, 1]")
        if not 0 <= self.speckle_contrast < 1:
            raise OctDataError("speckle_contrast must lie in [0, 1)")
        lo, hi = self.vessel_count_range
        if lo < 0 or hi < lo:
            raise OctDataError("vessel_count_range must be an ordered non-negative pair")
        rlo, rhi = self.vessel_radius_range_px
        if rlo <= 0 or rhi < rlo:
            raise OctDataError("vessel_radius_range_px must be an ordered positive pair")
        if self.csi_blur_sigma_px < 0 or self.boundary_wiggle_amplitude_px < 0:
            raise OctDataError("blur sigma and wiggle amplitude must be >= 0")
        if not 0 <= self.choroid_vessel_fraction < 1:
            raise OctDataError("choroid_vessel_fraction must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def device_scale(cls, seed=0, **overrides):
        """Full 992 x 512 x 256 device geometry; thicknesses scaled to match."""
        base = cls()
        k = 992 / base.height
        params = dict(
            seed=seed,
            width=512,
            height=992,
            frames=256,
            layer_mean_thicknesses_px=tuple(round(v * k) for v in base.layer_mean_thicknesses_px),
            boundary_wiggle_amplitude_px=base.boundary_wiggle_amplitude_px * k,
            retina_curvature_px=base.retina_curvature_px * k,
            vessel_radius_range_px=tuple(v * 512 / 192 for v in base.vessel_radius_range_px),
            csi_blur_sigma_px=base.csi_blur_sigma_px * k,
            choroid_vessel_scale_px=base.choroid_vessel_scale_px * 512 / 192,
        )
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class PhantomSample:
    bscan: BScan
    layer_map: np.ndarray
    choroid_mask: np.ndarray
    thickness: ThicknessProfile
    shadow_columns: np.ndarray
    clean_choroid_texture: np.ndarray
    frame_index: int = 0
    choroid_vessels: np.ndarray = field(default=None, repr=False)
    boundaries: np.ndarray = field(default=None, repr=False)

    @property
    def shadow_positions(self):
        return {(self.frame_index, int(a)) for a in np.flatnonzero(self.shadow_columns)}


@dataclass(frozen=True)
class _Structure:
    """Volume-wide random structure shared by all frames."""

    nominal: np.ndarray        # (12,) jittered mean layer thickness
    wiggle_params: list        # per inner boundary: (weights, u, v, phase)
    choroid_vessels: np.ndarray  # (frames, width) bool
    vessels: list              # retinal vessel paths: (x0, slope, amp, period, phase, radius)


def _structure(config):
    rng = np.random.default_rng([config.seed, 0])
    t = np.asarray(config.layer_mean_thicknesses_px, dtype=float)
    jit = rng.uniform(-1, 1, N_LAYERS) * config.layer_thickness_jitter
    jit[CHOROID] = rng.uniform(-1, 1) * config.choroid_thickness_jitter
    nominal = t * (1 + jit)

    wiggles = []
    for _ in range(N_LAYERS - 1):
        w = rng.uniform(0.2, 1.0, 4)
        w /= w.sum()
        u = rng.uniform(0.3, 2.5, 4)
        v = rng.uniform(0.0, 1.5, 4)
        ph = rng.uniform(0, 2 * np.pi, 4)
        wiggles.append((w, u, v, ph))

    noise = rng.standard_normal((config.frames, config.width))
    s = config.choroid_vessel_scale_px
    band = ndimage.gaussian_filter(noise, s, mode="reflect") - ndimage.gaussian_filter(
        noise, 2 * s, mode="reflect"
    )
    if config.choroid_vessel_fraction > 0:
        thr = np.quantile(band, 1 - config.choroid_vessel_fraction)
        choroid_vessels = band > thr
    else:
        choroid_vessels = np.zeros_like(band, dtype=bool)

    lo, hi = config.vessel_count_range
    n_vessels = int(rng.integers(lo, hi + 1))
    vessels = []
    for _ in range(n_vessels):
        vessels.append((
            rng.uniform(0.05, 0.95) * config.width,
            rng.uniform(-1.2, 1.2),
            rng.uniform(0, 0.08) * config.width,
            rng.uniform(0.5, 2.0) * max(config.frames, 16),
            rng.uniform(0, 2 * np.pi),
            rng.uniform(*config.vessel_radius_range_px),
        ))
    return _Structure(nominal, wiggles, choroid_vessels, vessels)


def _boundaries(config, st, frame):
    """Float boundary rows, shape (13, width); boundary k tops layer k."""
    x = np.arange(config.width) + 0.5
    ux = 2 * x / config.width - 1
    uf = 0.0 if config.frames == 1 else 2 * (frame + 0.5) / config.frames - 1
    bow = config.retina_curvature_px * (1 - (ux**2 + uf**2) / 2)
    fpos = (frame + 0.5) / config.frames
    b = np.zeros((N_LAYERS + 1, config.width))
    cum = np.cumsum(st.nominal)
    for k in range(1, N_LAYERS):
        w, u, v, ph = st.wiggle_params[k - 1]
        n = (w[:, None] * np.sin(2 * np.pi * (u[:, None] * x / config.width + v[:, None] * fpos)
                                 + ph[:, None])).sum(0)
        b[k] = cum[k - 1] + bow + config.boundary_wiggle_amplitude_px * n
    # keep the inner retinal layers and the choroid at least one pixel thick
    for k in range(2, N_LAYERS):
        b[k] = np.maximum(b[k], b[k - 1] + 1)
    b[N_LAYERS] = config.height
    return np.clip(b, 0, config.height)


def _vessel_distance(config, st, frame):
    """Per A-line (normalized distance to nearest vessel axis, radius of that vessel)."""
    x = np.arange(config.width) + 0.5
    f = frame + 0.5
    best = np.full(config.width, np.inf)
    radius = np.zeros(config.width)
    for x0, slope, amp, period, ph, r in st.vessels:
        fc = config.frames / 2
        xc = x0 + slope * (f - fc) + amp * np.sin(2 * np.pi * f / period + ph)
        dx = slope + amp * 2 * np.pi / period * np.cos(2 * np.pi * f / period + ph)
        d = np.abs(x - xc) / np.sqrt(1 + dx**2) / r
        closer = d < best
        best = np.where(closer, d, best)
        radius = np.where(closer, r, radius)
    return best, radius


def _render(config, st, frame):
    H, W = config.height, config.width
    bf = _boundaries(config, st, frame)
    bi = np.rint(bf).astype(np.int64)
    rows = np.arange(H)[:, None]
    labels = np.zeros((H, W), dtype=np.int64)
    for k in range(1, N_LAYERS):
        labels[rows >= bi[k]] = k

    refl = np.asarray(config.layer_reflectances, dtype=np.float64)
    base = refl[labels]

    # choroidal vessel lumens in the middle of the choroid band
    top, csi = bi[CHOROID], bi[CHOROID + 1]
    thick = np.maximum(csi - top, 1)
    depth = (rows + 0.5 - top) / thick
    cv = st.choroid_vessels[frame]
    lumen = cv[None, :] & (depth >= 0.15) & (depth < 0.85)
    ch_val = refl[CHOROID] * np.where(lumen, 1 - config.choroid_vessel_contrast, 1.0)
    in_ch = labels == CHOROID
    base = np.where(in_ch, ch_val, base)

    if config.csi_blur_sigma_px > 0:
        s = ndtr((rows + 0.5 - csi) / config.csi_blur_sigma_px)
        zone = (labels == CHOROID) | (labels == CHOROID + 1)
        blended = ch_val * (1 - s) + refl[CHOROID + 1] * s
        base = np.where(zone, blended, base)

    # retinal vessels in the GCL and their shadows
    d, r = _vessel_distance(config, st, frame)
    shadow = d <= 1.0
    attenuated = base
    if shadow.any():
        centre = (bf[GCL] + bf[GCL + 1]) / 2
        half = r * np.sqrt(np.clip(1 - d**2, 0, None))
        vtop = centre - half
        vbot = centre + half
        in_vessel = shadow[None, :] & (rows + 0.5 >= vtop) & (rows + 0.5 < vbot)
        under = shadow[None, :] & (rows + 0.5 >= vbot)
        base = np.where(in_vessel, config.vessel_reflectance, base)
        attenuated = np.where(under, base * config.shadow_attenuation, base)

    if config.speckle_contrast > 0:
        rng = np.random.default_rng([config.seed, 1, frame])
        k = 1.0 / config.speckle_contrast**2
        speckle = rng.gamma(k, 1.0 / k, size=(H, W))
    else:
        speckle = 1.0
    image = np.clip(attenuated * speckle, 0, 1)
    clean = np.clip(base * speckle, 0, 1)
    return labels, image, clean, shadow, cv, bi


def _sample(config, st, frame):
    labels, image, clean, shadow, cv, bi = _render(config, st, frame)
    choroid = (labels == CHOROID).astype(np.uint8)
    clean_tex = np.where(choroid.astype(bool), clean, 0.0).astype(np.float32)
    thickness = thickness_from_mask(choroid)
    return PhantomSample(
        bscan=BScan(image.astype(np.float32), config.axial_pitch_um),
        layer_map=labels,
        choroid_mask=choroid,
        thickness=thickness,
        shadow_columns=shadow,
        clean_choroid_texture=clean_tex,
        frame_index=frame,
        choroid_vessels=cv.copy(),
        boundaries=bi,
    )


def generate_bscan(config, frame_index=0):
    """One phantom B-scan with its exact ground truth."""
    config.validate()
    if not 0 <= frame_index < config.frames:
        raise OctDataError(f"frame_index {frame_index} outside 0..{config.frames - 1}")
    return _sample(config, _structure(config), frame_index)


def generate_volume(config):
    config.validate()
    st = _structure(config)
    samples = [_sample(config, st, f) for f in range(config.frames)]
    vox = np.stack([s.bscan.pixels for s in samples])
    return OctVolume(vox, axial_pitch_um=config.axial_pitch_um), samples


def enface_truth(samples):
    """En-face ground truth of a phantom volume.

    Returns a dict with the shadow mask, the planted choroidal vessel map and
    its area fraction, the mean choroid texture per A-line (shadow free) and
    the exact RPE/choroid upper boundaries.
    """
    shadow = np.stack([s.shadow_columns for s in samples])
    vessels = np.stack([s.choroid_vessels for s in samples])
    clean = []
    for s in samples:
        m = s.choroid_mask.astype(bool)
        n = m.sum(0)
        tex = np.where(n > 0, (s.clean_choroid_texture * m).sum(0) / np.maximum(n, 1), 0.0)
        clean.append(tex)
    return {
        "shadow_mask": shadow,
        "vessel_map": vessels,
        "vessel_fraction": float(vessels.mean()),
        "clean_choroid": np.stack(clean),
        "choroid_upper": np.stack([s.boundaries[CHOROID] for s in samples]),
        "choroid_lower": np.stack([s.boundaries[CHOROID + 1] for s in samples]),
    }


def sample_seeds(master_seed, n_train, n_test):
    """Disjoint per-sample seeds: train first, then test."""
    base = master_seed * SEED_STRIDE
    if n_train + n_test >= SEED_STRIDE:
        raise OctDataError("too many samples for the seed stride")
    return [base + i for i in range(n_train)], [base + n_train + i for i in range(n_test)]


def bscan_dataset(config, seeds):
    """Generate single-frame phantom samples, one per seed."""
    cfg = replace(config, frames=1)
    return [generate_bscan(replace(cfg, seed=s)) for s in seeds]


def generate_dataset(config, n_train, n_test, out_dir):
    """Write a B-scan phantom dataset and return its manifest dict."""
    if n_train < 1 or n_test < 1:
        raise OctDataError("n_train and n_test must both be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_seeds, test_seeds = sample_seeds(config.seed, n_train, n_test)
    entries = []
    for i, (split, seed) in enumerate(
        [("train", s) for s in train_seeds] + [("test", s) for s in test_seeds]
    ):
        s = bscan_dataset(config, [seed])[0]
        save_image(out / f"bscan_{i:05d}.png", s.bscan.pixels)
        save_labels(out / f"layers_{i:05d}.png", s.layer_map)
        save_mask(out / f"choroid_{i:05d}.png", s.choroid_mask)
        entries.append({
            "index": i,
            "split": split,
            "seed": seed,
            "mean_thickness_px": s.thickness.mean,
            "shadow_alines": np.flatnonzero(s.shadow_columns).tolist(),
        })
    manifest = {
        "format": "octchoroid-phantom-dataset",
        "version": 1,
        "config": config.to_dict(),
        "n_train": n_train,
        "n_test": n_test,
        "layer_names": list(LAYER_NAMES),
        "samples": entries,
    }
    (out / "meta.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def check_sample(sample):
    """Raise if a phantom sample breaks its ground-truth invariants."""
    if not np.array_equal(sample.choroid_mask, (sample.layer_map == CHOROID).astype(np.uint8)):
        raise AssertionError("choroid mask differs from layer map")
    t = thickness_from_mask(sample.choroid_mask)
    if not np.array_equal(t.values, sample.thickness.values):
        raise AssertionError("stored thickness differs from mask thickness")
    if layer_order_violations(sample.layer_map).any():
        raise AssertionError("layer map is not an ordered stack")
