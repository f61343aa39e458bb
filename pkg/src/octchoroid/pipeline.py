"""End-to-end runs: segmentation, en-face projection, shadow removal, vessel density.

A run is described by a flat INI file (one section per stage) or by the
``manifest.json`` of an earlier run.  Every resolved setting is echoed into
the new run's manifest together with per-stage seeds, checkpoint hashes and
output hashes, so a manifest alone reproduces its run.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import time
import zlib
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import bionet as bn
from . import shadow as sh
from .enface import enface_pair
from .metrics import binarize_vessels, image_fidelity, report_psnr, seg_scores, ausde, \
    vessel_density
from .oct_core import AXIAL_PITCH_UM, OctDataError, boundary_from_mask, load_volume, \
    save_image, save_labels, save_mask, save_volume
from .phantom import PhantomConfig, bscan_dataset, enface_truth, generate_volume, sample_seeds

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key path."""


STAGE_NAMES = ("phantom", "biomarker", "bionet", "shadow_seg", "deshadow")

# section -> {key: default}; None marks optional paths
SCHEMA = {
    "run": {"seed": 0, "out_dir": "run"},
    "input": {"volume": None, "phantom": True},
    "phantom": {f.name: f.default for f in fields(PhantomConfig)
                if f.name not in ("seed",)},
    "models": {"biomarker": None, "bionet": None, "shadow_seg": None, "deshadow": None},
    "segment": {"threshold": 0.5},
    "shadow": {"threshold": 0.5},
    "vessels": {"window": 15, "offset": 0.02, "min_size": 5},
}
SCHEMA["phantom"].update({"frames": 32, "shadow_attenuation": 0.3})


def stage_seed(master, stage):
    """Deterministic per-stage seed derived from the master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _coerce(value, default, path):
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            try:
                v = float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
            return int(v) if isinstance(default, int) and v.is_integer() else v
        if isinstance(default, tuple):
            try:
                return tuple(float(x) for x in value.replace(",", " ").split())
            except ValueError:
                raise ConfigError(f"{path}: expected numbers, got {value!r}") from None
        if default is None and value.strip().lower() in ("", "none"):
            return None
        return value
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def resolve_config(raw):
    """Validate a nested ``{section: {key: value}}`` dict and fill defaults."""
    out = {}
    for section, values in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        for key in values:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
    for section, defaults in SCHEMA.items():
        given = raw.get(section, {})
        out[section] = {k: _coerce(given.get(k, d), d, f"{section}.{k}")
                        for k, d in defaults.items()}
    try:
        phantom_config(out).validate()
    except OctDataError as e:
        raise ConfigError(f"phantom: {e}") from None
    if not out["input"]["phantom"] and not out["input"]["volume"]:
        raise ConfigError("input.volume: required when input.phantom is false")
    return out


def read_config(path):
    """Parse an INI run configuration or a previous run's manifest."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: configuration file not found")
    if path.suffix == ".json":
        try:
            raw = json.loads(path.read_text())["config"]
        except (json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"{path}: not a run manifest ({e})") from None
        return resolve_config(raw)
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return resolve_config({s: dict(cp[s]) for s in cp.sections()})


def phantom_config(config):
    ph = dict(config["phantom"])
    ph["seed"] = stage_seed(config["run"]["seed"], "phantom")
    return PhantomConfig(**ph)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, key):
    if not path:
        raise ConfigError(f"models.{key}: checkpoint path required")
    if not Path(path).exists():
        raise FileNotFoundError(f"models.{key}: checkpoint {path} not found")
    return Path(path)


def _jsonable(config):
    return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
            for s, d in config.items()}


def run_pipeline(config, out_dir=None):
    """Run every stage and write a self-describing run directory.

    ``config`` is a path (INI or manifest) or an already resolved dict.
    Returns the run directory path.
    """
    if not isinstance(config, dict):
        config = read_config(config)
    else:
        config = resolve_config(config)
    out = Path(out_dir or config["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    master = config["run"]["seed"]
    seeds = {s: stage_seed(master, s) for s in STAGE_NAMES}

    models = {k: _require(config["models"][k], k) for k in ("bionet", "shadow_seg", "deshadow")}
    net = bn.load_bionet(models["bionet"])
    seg_model = sh.load_shadow_segmenter(models["shadow_seg"])
    inpainter = sh.load_deshadow(models["deshadow"])

    truth = None
    if config["input"]["volume"]:
        volume = load_volume(config["input"]["volume"])
    else:
        volume, samples = generate_volume(phantom_config(config))
        truth = enface_truth(samples)
        save_volume(volume, out / "volume.raw")

    # choroid segmentation
    segs = bn.segment_volume(volume, net, config["segment"]["threshold"])
    seg_dir = out / "seg"
    seg_dir.mkdir(exist_ok=True)
    for i, s in enumerate(segs):
        save_mask(seg_dir / f"choroid_{i:03d}.png", s.choroid_mask)
        if s.layer_map is not None:
            save_labels(seg_dir / f"layers_{i:03d}.png", s.layer_map)
    write_thickness(out / "thickness.csv", segs, volume.axial_pitch_um)

    # en-face projection
    ef = enface_pair(volume, np.stack([s.upper for s in segs]), np.stack([s.lower for s in segs]))
    save_image(out / "rpe.png", ef.rpe)
    save_image(out / "choroid.png", ef.choroid)

    # shadow localization and removal
    mask, raw = sh.locate_shadows(ef.rpe, seg_model, config["shadow"]["threshold"])
    mask = mask * (~ef.empty)
    save_mask(out / "shadow_raw.png", raw)
    save_mask(out / "shadow_mask.png", mask)
    deshadowed = sh.eliminate_shadows(ef.choroid, mask, inpainter)
    save_image(out / "choroid_deshadowed.png", deshadowed)

    # vessel density before/after, plus the shadow-excluded reference
    vcfg = config["vessels"]
    v_orig = binarize_vessels(ef.choroid, vcfg["window"], vcfg["offset"], vcfg["min_size"])
    v_des = binarize_vessels(deshadowed, vcfg["window"], vcfg["offset"], vcfg["min_size"])
    save_mask(out / "vessels_original.png", v_orig)
    save_mask(out / "vessels_deshadowed.png", v_des)
    valid = ~ef.empty
    keep = valid & ~mask.astype(bool)
    # frames without a segmented choroid are excluded; an all-empty volume has no VD
    vd = {
        "original": vessel_density(v_orig, valid) if valid.any() else None,
        "deshadowed": vessel_density(v_des, valid) if valid.any() else None,
        "shadow_excluded": vessel_density(v_orig, keep) if keep.any() else None,
        "shadow_fraction": float(mask[valid].mean()) if valid.any() else 0.0,
        "empty_frames": [i for i, s in enumerate(segs) if s.empty],
    }
    if truth is not None:
        vd["truth_vessel_fraction"] = truth["vessel_fraction"]
    (out / "vd.json").write_text(json.dumps(vd, indent=2, sort_keys=True))

    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "version": __version__,
        "config": _jsonable(config),
        "seeds": seeds,
        "checkpoints": {k: {"path": str(p), "sha256": sha256(p)} for k, p in models.items()},
        "outputs": {str(p.relative_to(out)): sha256(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def write_thickness(path, segmentations, axial_pitch_um=AXIAL_PITCH_UM):
    """Per-frame mean choroid thickness in micrometres (blank for empty frames)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "mean_thickness_um", "valid_alines"])
        for i, s in enumerate(segmentations):
            t = s.thickness
            scale = axial_pitch_um if t.unit == "px" else 1.0
            mean = "" if s.empty else f"{t.mean * scale:.4f}"
            w.writerow([i, mean, int(np.count_nonzero(t.valid))])


# -- ablation -----------------------------------------------------------------------

ABLATION_METHODS = ("baseline", "gms_only", "gms", "bio", "full")
ABLATION_COLUMNS = ("IOU", "AUSDE", "DI", "Acc", "Sen")


def score_segmentations(segs, samples):
    """Mean IOU, AUSDE (both boundaries, px), DI, Acc, Sen over test samples."""
    rows = []
    for g, s in zip(segs, samples):
        sc = seg_scores(g.choroid_mask, s.choroid_mask)
        u, l = boundary_from_mask(s.choroid_mask)
        if g.empty:
            a_bm = a_csi = float(s.choroid_mask.shape[0])
        else:
            a_bm, a_csi = ausde(g.upper, u), ausde(g.lower, l)
        rows.append({"IOU": sc.iou, "DI": sc.di, "Acc": sc.acc, "Sen": sc.sen,
                     "AUSDE": (a_bm + a_csi) / 2, "AUSDE_BM": a_bm, "AUSDE_CSI": a_csi})
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}, rows


def ablation_suite(out_dir, seeds=(0, 1, 2, 3, 4), methods=ABLATION_METHODS, n_train=200,
                   n_test=40, phantom=None, train_config=None, bio_net=None, data_seed=1,
                   model_dir=None):
    """Train every ablation variant with shared seeds and tabulate test scores.

    Writes ``ablation_runs.csv`` (one row per method and seed, with the
    training wall time) and ``ablation.csv`` (per-method medians over seeds,
    columns method, IOU, AUSDE, DI, Acc, Sen).  With ``model_dir`` each run's
    model is saved as ``bionet_<variant>_s<seed>.ckpt``.  Returns
    ``(median_rows, run_rows)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    phantom = phantom or PhantomConfig()
    train_config = train_config or bn.BIONET_CONFIG
    tr, te = sample_seeds(data_seed, n_train, n_test)
    train_samples = bscan_dataset(phantom, tr)
    test_samples = bscan_dataset(phantom, te)
    if bio_net is None and any(bn.VARIANTS[m][2].bio_choroid for m in methods):
        bio_net, _ = bn.train_biomarker_net([s.choroid_mask for s in train_samples])
    runs = []
    for seed in seeds:
        for m in methods:
            t0 = time.perf_counter()
            model, ckpt, _ = bn.train_bionet(train_samples, bio_net,
                                             replace(train_config, seed=seed), variant=m)
            elapsed = time.perf_counter() - t0
            if model_dir is not None:
                Path(model_dir).mkdir(parents=True, exist_ok=True)
                bn.save_bionet(model, Path(model_dir) / f"bionet_{m}_s{seed}.ckpt", ckpt)
            segs = bn.segment_batch([s.bscan for s in test_samples], model)
            mean, _ = score_segmentations(segs, test_samples)
            runs.append({"method": bn.VARIANT_LABELS[m], "variant": m, "seed": seed, **mean,
                         "train_s": elapsed})
            log.info("ablation %s seed %d DI %.4f", m, seed, mean["DI"])
    _write_rows(out / "ablation_runs.csv", runs,
                ["method", "variant", "seed", *ABLATION_COLUMNS, "AUSDE_BM", "AUSDE_CSI", "train_s"])
    medians = []
    for m in methods:
        rs = [r for r in runs if r["variant"] == m]
        medians.append({"method": bn.VARIANT_LABELS[m],
                        **{k: float(np.median([r[k] for r in rs])) for k in ABLATION_COLUMNS}})
    _write_rows(out / "ablation.csv", medians, ["method", *ABLATION_COLUMNS])
    return medians, runs


def _write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# -- inpainting evaluation ------------------------------------------------------------


def shadow_free_pair(config, seed):
    """En-face images of one phantom with and without its vessel shadows.

    Both volumes share every random draw; only the attenuation differs, so
    the shadow-free choroid image is the exact clean counterpart.  The clean
    image is mapped through the shadowed image's normalization.  Returns
    ``(shadowed EnFacePair, clean choroid, truth dict)``.
    """
    cfg = replace(config, seed=seed)
    vol, samples = generate_volume(cfg)
    truth = enface_truth(samples)
    ef = enface_pair(vol, truth["choroid_upper"], truth["choroid_lower"])
    clean_vol, _ = generate_volume(replace(cfg, shadow_attenuation=1.0))
    clean = enface_pair(clean_vol, truth["choroid_upper"], truth["choroid_lower"])
    lo, hi = ef.choroid_range
    raw = clean.choroid * (clean.choroid_range[1] - clean.choroid_range[0]) + clean.choroid_range[0]
    clean_img = np.clip((raw - lo) / (hi - lo), 0, 1).astype(np.float32)
    clean_img[ef.empty] = 0
    return ef, clean_img, truth


def clean_textures(config, seeds):
    """Shadow-free en-face choroid images used to train the inpainter."""
    out = []
    for s in seeds:
        vol, samples = generate_volume(replace(config, seed=s, shadow_attenuation=1.0))
        t = enface_truth(samples)
        out.append(enface_pair(vol, t["choroid_upper"], t["choroid_lower"]).choroid)
    return out


def inpainting_fidelity(model, config, seeds):
    """Deshadowed-vs-clean and masked-vs-clean fidelity on phantoms with oracle masks."""
    rows = []
    for s in seeds:
        ef, clean, truth = shadow_free_pair(config, s)
        m = truth["shadow_mask"].astype(np.uint8)
        out = sh.eliminate_shadows(ef.choroid, m, model)
        masked = ef.choroid * (1 - m)
        row = {"seed": s, "mask_fraction": float(m.mean())}
        for name, img in (("deshadowed", out), ("masked", masked), ("shadowed", ef.choroid)):
            ssim_v, psnr_v, mse_v = image_fidelity(img, clean)
            row.update({f"{name}_ssim": ssim_v, f"{name}_psnr": report_psnr(psnr_v),
                        f"{name}_mse": mse_v})
        row["outside_identical"] = bool(np.array_equal(out[m == 0], ef.choroid[m == 0]))
        rows.append(row)
    return rows


def vd_comparison(model, config, seeds, mask_fn=None):
    """Vessel density of original, deshadowed and shadow-excluded choroid images.

    ``mask_fn(EnFacePair, truth)`` supplies the shadow mask; the refined
    oracle mask is used when omitted.
    """
    rows = []
    for s in seeds:
        ef, _, truth = shadow_free_pair(config, s)
        m = mask_fn(ef, truth) if mask_fn else sh.refine_mask(truth["shadow_mask"], 0, 1)
        out = sh.eliminate_shadows(ef.choroid, m, model)
        valid = ~ef.empty
        v_o, v_d = binarize_vessels(ef.choroid), binarize_vessels(out)
        rows.append({
            "seed": s,
            "original": vessel_density(v_o, valid),
            "deshadowed": vessel_density(v_d, valid),
            "shadow_excluded": vessel_density(v_o, valid & (m == 0)),
            "truth": truth["vessel_fraction"],
        })
    return rows


def write_csv(path, rows):
    if rows:
        _write_rows(path, rows, list(rows[0]))
