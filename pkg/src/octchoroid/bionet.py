"""Biomarker-regularized global-to-local choroid segmentation.

Three learned parts:

* a thickness regressor (``BiomarkerNet``) trained on choroid masks and
  frozen afterwards,
* a global U-Net predicting all 12 layers,
* a local U-Net predicting the choroid from the B-scan concatenated with
  the global probabilities.

The local module is regularized by comparing the regressor's mean
thickness of the predicted choroid with its mean thickness of the
ground-truth choroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .nets import BiomarkerNet, UNet
from .oct_core import (
    CHOROID,
    N_LAYERS,
    ThicknessProfile,
    boundary_from_mask,
    fill_columns,
    thickness_from_boundaries,
)
from .training import Checkpoint, TrainConfig, column_thickness, evaluate, load_checkpoint, \
    save_checkpoint, train

log = logging.getLogger(__name__)

EPS = 1e-7


class FrozenModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    seg_multilayers: float = 1.0
    seg_choroid: float = 1.0
    bio_choroid: float = 0.01

    def __post_init__(self):
        if min(self.seg_multilayers, self.seg_choroid, self.bio_choroid) < 0:
            raise ValueError("loss weights must be >= 0")


# Ablation variants: (uses global module, uses local module, loss weights)
VARIANTS = {
    "full": (True, True, LossWeights(1.0, 1.0, 0.01)),
    "gms": (True, True, LossWeights(1.0, 1.0, 0.0)),
    "bio": (False, True, LossWeights(0.0, 1.0, 0.01)),
    "baseline": (False, True, LossWeights(0.0, 1.0, 0.0)),
    "gms_only": (True, False, LossWeights(1.0, 0.0, 0.0)),
}
VARIANT_LABELS = {
    "gms_only": "GMS",
    "baseline": "U-Net",
    "gms": "U-Net+GMS",
    "bio": "U-Net+Bio",
    "full": "Bio-Net",
}


# -- losses -----------------------------------------------------------------------


def _one_hot(labels, like):
    if labels.dtype.is_floating_point and labels.dim() == like.dim():
        return labels
    return F.one_hot(labels.long(), like.shape[1]).movedim(-1, 1).to(like.dtype)


def multilayer_loss(g_pred, g_gt, eps=EPS):
    """Categorical cross-entropy over the 12 layer channels, mean over pixels.

    ``g_pred`` holds probabilities of shape (N, 12, H, W); ``g_gt`` is either
    a one-hot tensor of the same shape or an integer label map (N, H, W).
    """
    if bool((g_pred < 0).any()) or bool((g_pred > 1).any()):
        raise ValueError("layer probabilities must lie in [0, 1]")
    gt = _one_hot(g_gt, g_pred)
    if gt.shape != g_pred.shape:
        raise ValueError(f"shape mismatch {tuple(g_pred.shape)} vs {tuple(gt.shape)}")
    return -(gt * torch.log(g_pred.clamp(eps, 1.0))).sum(dim=1).mean()


def choroid_loss(c_pred, c_gt, eps=EPS):
    """Binary cross-entropy between choroid probabilities and the binary mask."""
    if c_pred.shape != c_gt.shape:
        raise ValueError(f"shape mismatch {tuple(c_pred.shape)} vs {tuple(c_gt.shape)}")
    p = c_pred.clamp(eps, 1 - eps)
    g = c_gt.to(p.dtype)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()


def biomarker_regression_loss(b_pred, b_gt):
    """Mean absolute error of the mean-thickness biomarker over samples."""
    return (b_pred - b_gt).abs().mean()


def bio_consistency_loss(c_pred, bio_net, b_ref):
    """Mean |B(C_pred) - B_ref| over the batch through a frozen regressor."""
    if not getattr(bio_net, "frozen", False) or any(p.requires_grad for p in bio_net.parameters()):
        raise FrozenModelError("the biomarker network must be frozen before use as a regularizer")
    b = bio_net.biomarker(c_pred)
    return (b - b_ref).abs().mean()


def total_loss(parts, weights):
    """Weighted sum of (multilayer, choroid, biomarker-consistency) losses."""
    ml, ch, bio = parts
    return weights.seg_multilayers * ml + weights.seg_choroid * ch + weights.bio_choroid * bio


# -- biomarker network ------------------------------------------------------------


def band_masks(n, shape, rng, max_thickness=None):
    """Random single-run band masks with smooth boundaries and their thickness.

    Used to widen the thickness range seen by the regressor beyond what the
    phantom anatomy produces.
    """
    h, w = shape
    max_thickness = max_thickness or h // 3
    x = np.arange(w) / w
    out = []
    for _ in range(n):
        def smooth(amp):
            k = rng.uniform(0.3, 2.0, 3)
            ph = rng.uniform(0, 2 * np.pi, 3)
            return amp * np.sin(2 * np.pi * k[:, None] * x + ph[:, None]).mean(0)

        top = rng.uniform(0.1, 0.6) * h + smooth(rng.uniform(0, 6))
        thick = np.clip(rng.uniform(0, max_thickness) + smooth(rng.uniform(0, 6)), 0, None)
        u = np.clip(np.rint(top), 0, h)
        l = np.clip(np.rint(top + thick), u, h)
        rows = np.arange(h)[:, None]
        out.append(((rows >= u) & (rows < l)).astype(np.uint8))
    return out


def _biomarker_loss_fn(model, batch):
    x = batch["image"]
    if model.training:
        x = _random_vertical_blur(x)
    h = model(x)
    t = batch["thickness"]
    reg = biomarker_regression_loss(h.mean(-1), t.mean(-1))
    profile = (h - t).abs().mean()
    return reg + profile, {"loss_bio_reg": reg, "loss_profile": profile}


def _random_vertical_blur(x, max_sigma=2.0):
    # Vertical blurring keeps each column's mass, so the thickness target is unchanged.
    sigma = float(torch.rand(()) * max_sigma)
    if sigma < 0.3:
        return x
    r = int(3 * sigma + 0.5)
    k = torch.exp(-0.5 * (torch.arange(-r, r + 1, dtype=x.dtype) / sigma) ** 2)
    k = (k / k.sum()).view(1, 1, -1, 1)
    return F.conv2d(F.pad(x, (0, 0, r, r)), k)


def _biomarker_mae(model, batch):
    return (model.biomarker(batch["image"]) - batch["thickness"].mean(-1)).abs().mean()


BIOMARKER_CONFIG = TrainConfig(initial_lr=0.001, batch_size=8, max_epochs=30,
                               lr_drop_epochs=(15, 24), rotation_degrees=10.0)


def train_biomarker_net(masks, targets=None, config=BIOMARKER_CONFIG, base_channels=8,
                        tolerance_px=2.0, extra_bands=100):
    """Fit the thickness regressor on choroid masks and freeze it.

    ``targets`` are per-column thickness profiles in pixels (computed from
    the masks when omitted).  Without explicit targets, ``extra_bands``
    random band masks (:func:`band_masks`, seeded from ``config.seed``) are
    appended so thin and thick bands are both represented.  Returns
    ``(net, report)``; the report carries the validation MAE of the mean
    thickness and a ``converged`` flag against ``tolerance_px``.
    """
    masks = list(masks)
    if targets is None and extra_bands and masks:
        rng = np.random.default_rng(config.seed)
        masks += band_masks(extra_bands, np.shape(masks[0]), rng)
    pairs = []
    for i, m in enumerate(masks):
        m = np.asarray(m, dtype=np.uint8)
        if targets is None:
            t = column_thickness(m)
        else:
            t = targets[i]
            t = t.values if isinstance(t, ThicknessProfile) else np.asarray(t)
        pairs.append((m, {"choroid": m, "thickness": t.astype(np.float32)}))
    torch.manual_seed(config.seed)
    net = BiomarkerNet(base_channels)
    ckpt, rows = train(net, pairs, _biomarker_loss_fn, config, score_fn=_biomarker_mae,
                       name="biomarker")
    mae = rows[ckpt.epoch]["val_dice"] if rows and ckpt.epoch >= 0 else float("nan")
    converged = bool(mae <= tolerance_px)
    if not converged:
        log.warning("biomarker net validation MAE %.2f px exceeds %.1f px", mae, tolerance_px)
    net.freeze()
    report = {"val_mae_px": mae, "converged": converged, "best_epoch": ckpt.epoch,
              "base_channels": base_channels}
    return net, report


def predict_thickness(bio_net, mask):
    """Per-A-line thickness (px) predicted for a single 2D mask."""
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(mask, dtype=np.float32))[None, None]
        return bio_net(x)[0].numpy()


def save_biomarker(net, path, report=None):
    ckpt = Checkpoint(state=net.state_dict(), meta={
        "kind": "biomarker", "base_channels": net.head.in_channels // 8,
        "frozen": net.frozen, "report": report or {},
    })
    return save_checkpoint(ckpt, path)


def load_biomarker(path):
    ckpt = load_checkpoint(path)
    net = BiomarkerNet(ckpt.meta["base_channels"])
    net.load_state_dict(ckpt.state)
    if ckpt.meta.get("frozen", True):
        net.freeze()
    return net


# -- segmentation model -------------------------------------------------------------


class BioNet(nn.Module):
    """Global multi-layer module feeding a local choroid module.

    ``variant`` selects the ablation configuration (see ``VARIANTS``).
    ``forward`` returns ``(g_prob, c_prob)``; ``g_prob`` is None without the
    global module and, without the local module, ``c_prob`` is the global
    choroid channel.
    """

    def __init__(self, variant="full", base_channels=8, levels=4):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        self.variant = variant
        self.base_channels = base_channels
        self.levels = levels
        use_global, use_local, _ = VARIANTS[variant]
        self.global_seg = UNet(1, N_LAYERS, base_channels, levels) if use_global else None
        cin = 1 + N_LAYERS if use_global else 1
        self.local_seg = UNet(cin, 1, base_channels, levels) if use_local else None

    @property
    def weights(self):
        return VARIANTS[self.variant][2]

    def forward(self, x):
        g = None
        if self.global_seg is not None:
            g = torch.softmax(self.global_seg(x), dim=1)
        if self.local_seg is None:
            return g, g[:, CHOROID:CHOROID + 1]
        inp = x if g is None else torch.cat([x, g], dim=1)
        return g, torch.sigmoid(self.local_seg(inp))


def bionet_loss(model, batch, bio_net=None, weights=None):
    weights = weights or model.weights
    g, c = model(batch["image"])
    gt_c = batch["choroid"][:, None]
    zero = c.new_zeros(())
    ml = multilayer_loss(g, batch["layers"]) if g is not None and weights.seg_multilayers else zero
    ch = choroid_loss(c, gt_c) if weights.seg_choroid else zero
    bio = zero
    if weights.bio_choroid:
        if bio_net is None:
            raise ValueError("the biomarker term needs a frozen biomarker network")
        with torch.no_grad():
            b_ref = bio_net.biomarker(gt_c)
        bio = bio_consistency_loss(c, bio_net, b_ref)
    parts = {"loss_seg_multilayers": ml, "loss_seg_choroid": ch, "loss_bio_choroid": bio}
    return total_loss((ml, ch, bio), weights), parts


def dice_score(model, batch):
    _, c = model(batch["image"])
    p = (c[:, 0] > 0.5).float()
    g = batch["choroid"]
    inter = (p * g).sum((1, 2))
    denom = p.sum((1, 2)) + g.sum((1, 2))
    d = torch.where(denom > 0, 2 * inter / denom.clamp(min=1), torch.ones_like(denom))
    return d.mean()


def bionet_config(epochs=12, **overrides):
    """Segmentation schedule: lr 0.01, dropped tenfold at 60% and 85% of ``epochs``."""
    kw = dict(initial_lr=0.01, batch_size=4, max_epochs=epochs,
              lr_drop_epochs=(int(epochs * 0.6), int(epochs * 0.85)), crop_width=96)
    kw.update(overrides)
    return TrainConfig(**kw)


BIONET_CONFIG = bionet_config()


def sample_pairs(samples):
    """(image, targets) training pairs from phantom samples."""
    return [(np.asarray(s.bscan.pixels, dtype=np.float32),
             {"layers": np.asarray(s.layer_map, dtype=np.int64),
              "choroid": np.asarray(s.choroid_mask, dtype=np.uint8)})
            for s in samples]


def train_bionet(dataset, bio_net=None, config=BIONET_CONFIG, weights=None, variant="full",
                 base_channels=8, levels=4):
    """Train the segmentation modules jointly; returns ``(model, checkpoint, log_rows)``.

    ``dataset`` holds phantom samples or ``(image, targets)`` pairs.  With
    ``weights`` given they override the variant's default loss weights.
    """
    pairs = dataset if dataset and isinstance(dataset[0], tuple) else sample_pairs(dataset)
    torch.manual_seed(config.seed)
    model = BioNet(variant, base_channels, levels)
    w = weights or model.weights
    if w.bio_choroid:
        if bio_net is None or not bio_net.frozen:
            raise FrozenModelError("train the biomarker network and freeze it first")
    if w.seg_multilayers and model.global_seg is None:
        w = replace(w, seg_multilayers=0.0)

    def loss_fn(m, batch):
        return bionet_loss(m, batch, bio_net, w)

    ckpt, rows = train(model, pairs, loss_fn, config, score_fn=dice_score,
                       name=f"bionet_{variant}")
    ckpt.meta.update({"kind": "bionet", "variant": variant, "base_channels": base_channels,
                      "levels": levels})
    model.eval()
    return model, ckpt, rows


def save_bionet(model, path, ckpt=None):
    meta = {"kind": "bionet", "variant": model.variant, "base_channels": model.base_channels,
            "levels": model.levels}
    c = Checkpoint(state=model.state_dict(), epoch=ckpt.epoch if ckpt else 0,
                   config=ckpt.config if ckpt else {}, meta=meta)
    return save_checkpoint(c, path)


def load_bionet(path):
    ckpt = load_checkpoint(path)
    m = BioNet(ckpt.meta["variant"], ckpt.meta["base_channels"], ckpt.meta["levels"])
    m.load_state_dict(ckpt.state)
    return m.eval()


# -- inference ----------------------------------------------------------------------


@dataclass(frozen=True)
class Segmentation:
    choroid_mask: np.ndarray
    layer_map: np.ndarray | None
    thickness: ThicknessProfile
    upper: np.ndarray
    lower: np.ndarray
    empty: bool
    choroid_prob: np.ndarray


def largest_component(mask):
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask.astype(np.uint8)
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return (lab == sizes.argmax()).astype(np.uint8)


def postprocess(c_prob, threshold=0.5):
    """Threshold, keep the largest component and fill each A-line to a single run."""
    m = largest_component(c_prob > threshold)
    return fill_columns(m) if m.any() else m


def segment_choroid(bscan, model, threshold=0.5, axial_pitch_um=1.0):
    """Segment one B-scan: choroid mask, argmax layer map and thickness profile."""
    return segment_batch([bscan], model, threshold, axial_pitch_um)[0]


def segment_batch(images, model, threshold=0.5, axial_pitch_um=1.0, batch_size=8):
    model.eval()
    results = []
    for i in range(0, len(images), batch_size):
        chunk = [np.asarray(getattr(b, "pixels", b), dtype=np.float32)
                 for b in images[i:i + batch_size]]
        with torch.no_grad():
            g, c = model(torch.from_numpy(np.stack(chunk))[:, None])
        for j in range(len(chunk)):
            cp = c[j, 0].numpy()
            mask = postprocess(cp, threshold)
            layers = g[j].argmax(0).numpy() if g is not None else None
            upper, lower = boundary_from_mask(mask)
            results.append(Segmentation(
                choroid_mask=mask,
                layer_map=layers,
                thickness=thickness_from_boundaries(upper, lower, axial_pitch_um),
                upper=upper,
                lower=lower,
                empty=not mask.any(),
                choroid_prob=cp,
            ))
    return results


def segment_volume(volume, model, threshold=0.5):
    return segment_batch(list(volume.voxels), model, threshold, volume.axial_pitch_um)


def evaluate_model(model, samples, bio_net=None, batch_size=8):
    """Mean validation loss and Dice of ``model`` on phantom samples."""
    pairs = sample_pairs(samples)

    def loss_fn(m, batch):
        return bionet_loss(m, batch, bio_net, replace(m.weights, bio_choroid=0.0))

    return evaluate(model, pairs, loss_fn, batch_size, dice_score)
