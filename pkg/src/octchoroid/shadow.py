"""Retinal vessel shadow localization and removal on en-face images.

Localization segments shadows on the en-face RPE image with a U-Net and
widens the result morphologically.  Removal is a two-stage inpainting
cascade: an edge generator completes Canny edges inside the mask, then a
texture generator fills the masked pixels using those edges.  Each
generator is trained against a 70 x 70 patch discriminator.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from skimage import feature

from .nets import UNet
from .oct_core import check_binary
from .training import Checkpoint, TrainConfig, TrainingDivergence, load_checkpoint, \
    make_optimizer, save_checkpoint, seed_everything, train

log = logging.getLogger(__name__)

STAGES = ("edge", "inpaint", "joint")
MAX_MASK_FRACTION = 0.6
CROSS = ndimage.generate_binary_structure(2, 1)


# -- localization -------------------------------------------------------------------


def _seg_loss(model, batch):
    p = torch.sigmoid(model(batch["image"]))
    g = batch["shadow"][:, None]
    bce = F.binary_cross_entropy(p.clamp(1e-6, 1 - 1e-6), g)
    return bce, {"loss_bce": bce}


def _seg_dice(model, batch):
    p = (model(batch["image"]) > 0).float()[:, 0]
    g = batch["shadow"]
    inter = (p * g).sum((1, 2))
    denom = p.sum((1, 2)) + g.sum((1, 2))
    return torch.where(denom > 0, 2 * inter / denom.clamp(min=1), torch.ones_like(denom)).mean()


SHADOW_SEG_CONFIG = TrainConfig(initial_lr=1e-3, batch_size=4, max_epochs=40,
                                lr_drop_epochs=(30,), rotation_degrees=10.0)


def train_shadow_segmenter(pairs, config=SHADOW_SEG_CONFIG, base_channels=8, levels=4,
                           min_epoch_samples=32):
    """Train a binary shadow U-Net on ``(rpe_image, shadow_mask)`` pairs.

    Small training sets are repeated (each copy augmented independently) so
    every epoch sees at least ``min_epoch_samples`` images; model selection
    uses the un-augmented pairs.  Returns ``(model, checkpoint, log_rows)``.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one training pair")
    data = [(np.asarray(img, dtype=np.float32), {"shadow": np.asarray(m, dtype=np.uint8)})
            for img, m in pairs]
    reps = max(1, -(-min_epoch_samples // len(data)))
    torch.manual_seed(config.seed)
    model = UNet(1, 1, base_channels, levels)
    ckpt, rows = train(model, data * reps, _seg_loss, config, val_set=data,
                       score_fn=_seg_dice, name="shadow_seg")
    ckpt.meta.update({"kind": "shadow_seg", "base_channels": base_channels, "levels": levels})
    return model.eval(), ckpt, rows


def shadow_probability(rpe, model):
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(rpe, dtype=np.float32))[None, None]
        return torch.sigmoid(model(x))[0, 0].numpy()


def predict_shadow_mask(rpe, model, threshold=0.5):
    """Raw (unrefined) binary shadow mask of an en-face RPE image."""
    return (shadow_probability(rpe, model) > threshold).astype(np.uint8)


def refine_mask(raw, closing_iterations=6, widen_iterations=3):
    """Bridge fragmented detections and widen them.

    Closing with a 3x3 cross (``closing_iterations`` dilations then as many
    erosions) joins broken shadow segments; ``widen_iterations`` further
    dilations add a margin so the mask fully covers each shadow.  The result
    always contains the input.
    """
    m = check_binary(raw)
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    pad = closing_iterations + 1
    p = np.pad(m, pad)
    if closing_iterations:
        p = ndimage.binary_dilation(p, CROSS, iterations=closing_iterations)
        p = ndimage.binary_erosion(p, CROSS, iterations=closing_iterations, border_value=0)
    p = p[pad:-pad, pad:-pad]
    if widen_iterations:
        p = ndimage.binary_dilation(p, CROSS, iterations=widen_iterations)
    return (p | m).astype(np.uint8)


def locate_shadows(rpe, model, threshold=0.5):
    raw = predict_shadow_mask(rpe, model, threshold)
    return refine_mask(raw), raw


def save_shadow_segmenter(model, path, ckpt=None):
    meta = dict(ckpt.meta) if ckpt else {}
    meta.update({"kind": "shadow_seg", "base_channels": model.down[0][0].out_channels,
                 "levels": model.levels})
    return save_checkpoint(Checkpoint(model.state_dict(), meta=meta), path)


def load_shadow_segmenter(path):
    ckpt = load_checkpoint(path)
    m = UNet(1, 1, ckpt.meta["base_channels"], ckpt.meta["levels"])
    m.load_state_dict(ckpt.state)
    return m.eval()


# -- edge prior ---------------------------------------------------------------------


def _smoothed_gradient_max(image, sigma):
    # Mirrors skimage's Canny preprocessing so relative thresholds refer to
    # the magnitude range Canny actually sees.
    ones = np.ones_like(image)
    sm = ndimage.gaussian_filter(image, sigma, mode="constant")
    norm = ndimage.gaussian_filter(ones, sigma, mode="constant")
    sm = sm / norm
    mag = np.hypot(ndimage.sobel(sm, axis=0), ndimage.sobel(sm, axis=1))
    return float(mag.max())


def edge_map(image, sigma=1.5, low=0.1, high=0.2):
    """Canny edges with hysteresis thresholds relative to the gradient range."""
    img = np.asarray(image, dtype=np.float64)
    top = _smoothed_gradient_max(img, sigma)
    if top <= 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)
    e = feature.canny(img, sigma=sigma, low_threshold=low * top, high_threshold=high * top)
    return e.astype(np.uint8)


# -- inpainting networks -------------------------------------------------------------


class ResnetBlock(nn.Module):
    def __init__(self, dim, dilation=2):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(dilation),
            nn.Conv2d(dim, dim, 3, dilation=dilation),
            nn.InstanceNorm2d(dim, track_running_stats=False),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim, track_running_stats=False),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder, dilated residual blocks, decoder; output in [0, 1]."""

    def __init__(self, in_channels, base_channels=16, n_down=2, n_blocks=4, edge=False):
        super().__init__()
        c = base_channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, c, 7),
                  nn.InstanceNorm2d(c), nn.ReLU(True)]
        for _ in range(n_down):
            layers += [nn.Conv2d(c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
            c *= 2
        layers += [ResnetBlock(c) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [nn.ConvTranspose2d(c, c // 2, 4, 2, 1), nn.InstanceNorm2d(c // 2),
                       nn.ReLU(True)]
            c //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 1, 7)]
        self.net = nn.Sequential(*layers)
        self.edge = edge
        self.factor = 2**n_down

    def forward(self, x):
        h, w = x.shape[-2:]
        # the dilated bottleneck needs at least 8 cells per side
        lo = 8 * self.factor
        ph = max(lo, h + (-h) % self.factor) - h
        pw = max(lo, w + (-w) % self.factor) - w
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        y = self.net(x)[..., :h, :w]
        return torch.sigmoid(y) if self.edge else (torch.tanh(y) + 1) / 2


class PatchDiscriminator(nn.Module):
    """Five 4x4 convolutions (strides 2, 2, 2, 1, 1): 70 x 70 receptive field."""

    def __init__(self, in_channels, base_channels=16):
        super().__init__()
        c = base_channels
        sn = nn.utils.spectral_norm
        self.blocks = nn.ModuleList([
            nn.Sequential(sn(nn.Conv2d(in_channels, c, 4, 2, 1)), nn.LeakyReLU(0.2, True)),
            nn.Sequential(sn(nn.Conv2d(c, 2 * c, 4, 2, 1)), nn.LeakyReLU(0.2, True)),
            nn.Sequential(sn(nn.Conv2d(2 * c, 4 * c, 4, 2, 1)), nn.LeakyReLU(0.2, True)),
            nn.Sequential(sn(nn.Conv2d(4 * c, 8 * c, 4, 1, 1)), nn.LeakyReLU(0.2, True)),
            nn.Sequential(sn(nn.Conv2d(8 * c, 1, 4, 1, 1))),
        ])

    def forward(self, x):
        feats = []
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return x, feats[:-1]


def receptive_field(kernels=(4, 4, 4, 4, 4), strides=(2, 2, 2, 1, 1)):
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


class FeatureExtractor(nn.Module):
    """Fixed random convolutional features for perceptual and style losses."""

    def __init__(self, seed=1234, widths=(16, 32, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c = 1
        for w in widths:
            conv = nn.Conv2d(c, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2 / (9 * c)) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
            c = w
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            feats.append(x)
            if i < len(self.convs) - 1:
                x = F.avg_pool2d(x, 2)
        return feats


def gram(f):
    n, c, h, w = f.shape
    f = f.reshape(n, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


@dataclass
class DeshadowConfig:
    steps: dict = field(default_factory=lambda: {"edge": 1500, "inpaint": 600, "joint": 200})
    batch_size: int = 4
    crop: tuple = (64, 64)
    lr: float = 2e-4
    d_to_g_lr: float = 0.1
    betas: tuple = (0.0, 0.9)
    adv_edge: float = 1.0
    fm_edge: float = 10.0
    l1: float = 1.0
    adv_inpaint: float = 0.1
    perceptual: float = 0.1
    style: float = 250.0
    mask_width_px: tuple = (3, 9)
    mask_strokes: tuple = (1, 4)
    seed: int = 0
    base_channels: int = 16
    n_blocks: int = 4
    collapse_threshold: float = 1e-4
    collapse_patience: int = 50

    def to_dict(self):
        return asdict(self)


class DeshadowModel(nn.Module):
    def __init__(self, base_channels=16, n_blocks=4, disc_channels=16):
        super().__init__()
        self.g_edge = Generator(3, base_channels, 2, n_blocks, edge=True)
        self.g_tex = Generator(3, base_channels, 2, n_blocks, edge=False)
        self.d_edge = PatchDiscriminator(2, disc_channels)
        self.d_tex = PatchDiscriminator(1, disc_channels)
        self.base_channels = base_channels
        self.n_blocks = n_blocks
        self.stages_done = []

    @property
    def stage(self):
        return self.stages_done[-1] if self.stages_done else None

    def complete_edges(self, masked, edges, mask):
        pred = self.g_edge(torch.cat([masked, edges * (1 - mask), mask], 1))
        return pred, edges * (1 - mask) + pred * mask

    def fill(self, masked, edges, mask):
        return self.g_tex(torch.cat([masked, edges, mask], 1))


# -- mask sampler ---------------------------------------------------------------------


def vessel_mask(shape, rng, width_px=(3, 9), strokes=(1, 4), max_fraction=0.4):
    """Curvilinear vessel-like mask built from smooth random walks.

    Zero-area draws are rejected and redrawn.
    """
    h, w = shape
    for _ in range(100):
        m = np.zeros(shape, dtype=bool)
        for _ in range(int(rng.integers(strokes[0], strokes[1] + 1))):
            pos = rng.uniform((0, 0), (h, w))
            ang = rng.uniform(0, 2 * np.pi)
            width = rng.uniform(*width_px)
            pts = []
            for _ in range(int(rng.integers(h // 2, 2 * (h + w)))):
                ang += rng.normal(0, 0.15)
                pos = pos + (np.sin(ang), np.cos(ang))
                if not (-width <= pos[0] < h + width and -width <= pos[1] < w + width):
                    break
                pts.append(pos.copy())
            if pts:
                line = np.zeros(shape, dtype=bool)
                p = np.rint(np.array(pts)).astype(int)
                ok = (p[:, 0] >= 0) & (p[:, 0] < h) & (p[:, 1] >= 0) & (p[:, 1] < w)
                line[p[ok, 0], p[ok, 1]] = True
                if line.any():
                    m |= ndimage.distance_transform_edt(~line) <= width / 2
        if m.any() and m.mean() <= max_fraction:
            return m.astype(np.uint8)
    raise RuntimeError("could not draw a non-empty vessel mask")


def _training_batch(textures, config, rng):
    ch, cw = config.crop
    imgs, edges, masks = [], [], []
    for _ in range(config.batch_size):
        t = textures[int(rng.integers(len(textures)))]
        y = int(rng.integers(0, t.shape[0] - ch + 1))
        x = int(rng.integers(0, t.shape[1] - cw + 1))
        crop = t[y:y + ch, x:x + cw]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        if rng.random() < 0.5:
            crop = crop[::-1]
        # random intensity window: inputs normalized with a shadowed image's range
        # occupy only part of [0, 1]
        lo = rng.uniform(0.0, 0.6)
        hi = rng.uniform(max(lo + 0.3, 0.85), 1.0)
        crop = lo + (hi - lo) * crop
        imgs.append(crop)
        edges.append(edge_map(crop))
        masks.append(vessel_mask((ch, cw), rng, config.mask_width_px, config.mask_strokes))
    f = lambda a: torch.from_numpy(np.stack(a).astype(np.float32))[:, None]
    return f(imgs), f(edges), f(masks)


# -- training -------------------------------------------------------------------------


def _bce(logits, target):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


class _CollapseGuard:
    def __init__(self, threshold, patience):
        self.threshold, self.patience, self.count = threshold, patience, 0

    def update(self, d_loss, name):
        self.count = self.count + 1 if d_loss < self.threshold else 0
        if self.count >= self.patience:
            raise TrainingDivergence(
                f"{name} discriminator loss below {self.threshold} for {self.patience} steps")


def _edge_step(model, opt_g, opt_d, img, edges, mask, config, guard, update_g=True):
    masked = img * (1 - mask)
    pred, _ = model.complete_edges(masked, edges, mask)
    real_in = torch.cat([img, edges], 1)
    fake_in = torch.cat([img, pred.detach()], 1)
    d_real, _ = model.d_edge(real_in)
    d_fake, _ = model.d_edge(fake_in)
    d_loss = (_bce(d_real, 1.0) + _bce(d_fake, 0.0)) / 2
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    opt_d.step()
    guard.update(d_loss.item(), "edge")

    g_fake, fake_feats = model.d_edge(torch.cat([img, pred], 1))
    with torch.no_grad():
        _, real_feats = model.d_edge(real_in)
    adv = _bce(g_fake, 1.0)
    fm = sum(F.l1_loss(a, b) for a, b in zip(fake_feats, real_feats))
    g_loss = config.adv_edge * adv + config.fm_edge * fm
    if not torch.isfinite(g_loss):
        raise TrainingDivergence("edge generator loss is not finite")
    if update_g:
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
    return pred.detach(), {"edge_d": d_loss.item(), "edge_adv": adv.item(), "edge_fm": fm.item()}


def _inpaint_step(model, opt_g, opt_d, img, edges, mask, config, guard, features):
    masked = img * (1 - mask)
    out = model.fill(masked, edges, mask)
    merged = out * mask + img * (1 - mask)
    d_real, _ = model.d_tex(img)
    d_fake, _ = model.d_tex(out.detach())
    d_loss = (_bce(d_real, 1.0) + _bce(d_fake, 0.0)) / 2
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    opt_d.step()
    guard.update(d_loss.item(), "texture")

    g_fake, _ = model.d_tex(out)
    adv = _bce(g_fake, 1.0)
    l1 = F.l1_loss(out, img) / mask.mean().clamp(min=1e-3)
    fo, fi = features(out), features(img)
    perc = sum(F.l1_loss(a, b) for a, b in zip(fo, fi))
    fm_, _ = features(merged), None
    style = sum(F.l1_loss(gram(a), gram(b)) for a, b in zip(fm_, fi))
    g_loss = (config.l1 * l1 + config.adv_inpaint * adv + config.perceptual * perc
              + config.style * style)
    if not torch.isfinite(g_loss):
        raise TrainingDivergence("texture generator loss is not finite")
    opt_g.zero_grad(set_to_none=True)
    g_loss.backward()
    opt_g.step()
    return {"tex_d": d_loss.item(), "tex_adv": adv.item(), "tex_l1": l1.item(),
            "tex_perceptual": perc.item(), "tex_style": style.item()}


def train_deshadow(textures, config=None, stage="edge", model=None):
    """Run one training stage of the inpainting cascade.

    ``textures`` are shadow-free en-face choroid images in [0, 1].  Stages
    must run in the order edge, inpaint, joint; the returned model records
    the stages completed.  Returns ``(model, log_rows)``.
    """
    config = config or DeshadowConfig()
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    if model is None:
        if stage != "edge":
            raise ValueError(f"stage {stage!r} needs a model that finished the earlier stages")
        torch.manual_seed(config.seed)
        model = DeshadowModel(config.base_channels, config.n_blocks)
    needed = STAGES[:STAGES.index(stage)]
    missing = [s for s in needed if s not in model.stages_done]
    if missing:
        raise ValueError(f"stage {stage!r} requested before {', '.join(missing)}")
    textures = [np.asarray(t, dtype=np.float64) for t in textures]
    if not textures:
        raise ValueError("no training textures")
    for t in textures:
        if t.shape[0] < config.crop[0] or t.shape[1] < config.crop[1]:
            raise ValueError(f"texture {t.shape} smaller than crop {config.crop}")

    rng = seed_everything(config.seed + STAGES.index(stage))
    features = FeatureExtractor()
    g_cfg = TrainConfig(initial_lr=config.lr, betas=config.betas)
    d_cfg = TrainConfig(initial_lr=config.lr * config.d_to_g_lr, betas=config.betas)
    opt_ge = make_optimizer(model.g_edge.parameters(), g_cfg)
    opt_de = make_optimizer(model.d_edge.parameters(), d_cfg)
    opt_gt = make_optimizer(model.g_tex.parameters(), g_cfg)
    opt_dt = make_optimizer(model.d_tex.parameters(), d_cfg)
    guard_e = _CollapseGuard(config.collapse_threshold, config.collapse_patience)
    guard_t = _CollapseGuard(config.collapse_threshold, config.collapse_patience)
    model.train()
    rows = []
    for step in range(config.steps[stage]):
        img, edges, mask = _training_batch(textures, config, rng)
        row = {"step": step, "stage": stage}
        if stage == "edge":
            _, stats = _edge_step(model, opt_ge, opt_de, img, edges, mask, config, guard_e)
            row.update(stats)
        elif stage == "inpaint":
            row.update(_inpaint_step(model, opt_gt, opt_dt, img, edges, mask, config, guard_t,
                                     features))
        else:
            pred, stats = _edge_step(model, opt_ge, opt_de, img, edges, mask, config, guard_e)
            row.update(stats)
            composed = edges * (1 - mask) + pred * mask
            row.update(_inpaint_step(model, opt_gt, opt_dt, img, composed, mask, config,
                                     guard_t, features))
        rows.append(row)
        if step % 50 == 0:
            log.info("deshadow %s step %d %s", stage, step,
                     {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
    model.stages_done.append(stage)
    model.eval()
    return model, rows


def train_deshadow_all(textures, config=None):
    """All three stages in order."""
    model, rows = None, []
    for stage in STAGES:
        model, r = train_deshadow(textures, config, stage, model)
        rows += r
    return model, rows


def eliminate_shadows(choroid, mask, model):
    """Replace masked pixels of an en-face choroid image with generated texture.

    Pixels outside the mask are returned unchanged (bit-identical).
    """
    img = np.asarray(choroid, dtype=np.float32)
    m = check_binary(mask)
    if m.shape != img.shape:
        raise ValueError(f"mask shape {m.shape} differs from image shape {img.shape}")
    frac = m.mean()
    if frac > MAX_MASK_FRACTION:
        raise ValueError(f"mask covers {frac:.0%} of the image; at most "
                         f"{MAX_MASK_FRACTION:.0%} can be inpainted")
    if not m.any():
        return img.copy()
    edges = edge_map(img)
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(img)[None, None]
        mk = torch.from_numpy(m.astype(np.float32))[None, None]
        e = torch.from_numpy(edges.astype(np.float32))[None, None]
        masked = x * (1 - mk)
        _, composed = model.complete_edges(masked, e, mk)
        out = model.fill(masked, composed, mk)[0, 0].numpy()
    return np.where(m, np.clip(out, 0, 1), img).astype(np.float32)


def predicted_edges(choroid, mask, model):
    """Edge map after the first stage: known edges outside, generated inside."""
    img = np.asarray(choroid, dtype=np.float32)
    m = check_binary(mask).astype(np.float32)
    edges = edge_map(img).astype(np.float32)
    with torch.no_grad():
        x = torch.from_numpy(img)[None, None]
        mk = torch.from_numpy(m)[None, None]
        _, composed = model.complete_edges(x * (1 - mk), torch.from_numpy(edges)[None, None], mk)
    return (composed[0, 0].numpy() > 0.5).astype(np.uint8)


def save_deshadow(model, path, config=None):
    meta = {"kind": "deshadow", "base_channels": model.base_channels,
            "n_blocks": model.n_blocks, "stages_done": list(model.stages_done)}
    return save_checkpoint(Checkpoint(model.state_dict(), config=(config.to_dict() if config else {}),
                                      meta=meta), path)


def load_deshadow(path):
    ckpt = load_checkpoint(path)
    m = DeshadowModel(ckpt.meta["base_channels"], ckpt.meta["n_blocks"])
    m.load_state_dict(ckpt.state)
    m.stages_done = list(ckpt.meta["stages_done"])
    return m.eval()
