"""Shared supervised-training machinery.

Samples are plain dicts of numpy arrays.  ``"image"`` is the network input;
every other array with the image's shape is a spatial target and receives
the same geometric transform.  A ``"thickness"`` entry is recomputed from
the transformed ``"choroid"`` mask.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OCTCHKPT"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    initial_lr: float = 0.01
    batch_size: int = 4
    max_epochs: int = 300
    lr_drop_epochs: tuple = (40, 80, 160, 240)
    lr_drop_factor: float = 0.1
    horizontal_flip: bool = True
    rotation_degrees: float = 10.0
    crop_width: int | None = None
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.lr_drop_epochs = tuple(sorted(self.lr_drop_epochs))
        if self.optimizer.lower() not in ("adam", "adamw"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not self.initial_lr >= 0:
            raise ValueError("initial_lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_drop_factor < 1:
            raise ValueError("lr_drop_factor must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def lr_at(config, epoch):
    """Step schedule: the initial rate times the drop factor per drop epoch passed."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.initial_lr * config.lr_drop_factor**drops


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    flip: bool = False
    angle: float = 0.0
    crop_start: int | None = None
    crop_width: int | None = None


def draw_transform(config, rng, width=None):
    flip = bool(config.horizontal_flip and rng.random() < 0.5)
    angle = float(rng.uniform(-config.rotation_degrees, config.rotation_degrees)) \
        if config.rotation_degrees else 0.0
    start = None
    if config.crop_width and width and config.crop_width < width:
        start = int(rng.integers(0, width - config.crop_width + 1))
    return Transform(flip, angle, start, config.crop_width if start is not None else None)


def _warp(a, t):
    # integer and boolean arrays are label-like: nearest neighbour keeps them integral
    order = 0 if a.dtype.kind in "biu" else 1
    out = a
    if t.angle:
        out = ndimage.rotate(out, t.angle, reshape=False, order=order, mode="nearest")
    if t.flip:
        out = out[:, ::-1]
    if t.crop_start is not None:
        out = out[:, t.crop_start:t.crop_start + t.crop_width]
    return np.ascontiguousarray(out)


def apply_transform(image, targets, t):
    shape = np.shape(image)
    out_img = _warp(np.asarray(image), t)
    out = {}
    for k, v in targets.items():
        if k == "thickness":
            continue
        v = np.asarray(v)
        out[k] = _warp(v, t) if v.shape == shape else v
    if "thickness" in targets and "choroid" in out:
        out["thickness"] = column_thickness(out["choroid"])
    return out_img, out


def augment(sample, config, rng):
    """Random flip/rotation (and optional width crop) applied jointly.

    ``sample`` is ``(image, targets)``; returns the transformed pair.
    """
    image, targets = sample
    t = draw_transform(config, rng, np.shape(image)[1])
    return apply_transform(image, targets, t)


def column_thickness(mask):
    """Pixel count per column; equals the run length for single-run columns."""
    return np.asarray(mask, dtype=np.float32).sum(axis=0)


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    state: dict
    epoch: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt, path):
    buf = io.BytesIO()
    torch.save({"state": ckpt.state, "epoch": ckpt.epoch, "config": ckpt.config,
                "meta": ckpt.meta}, buf)
    header = CHECKPOINT_MAGIC + struct.pack("<II", ckpt.version, 0)
    _atomic_write(path, header + buf.getvalue())
    return Path(path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, _ = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    payload = torch.load(io.BytesIO(data[16:]), map_location="cpu", weights_only=True)
    return Checkpoint(payload["state"], payload["epoch"], payload["config"],
                      payload["meta"], version)


# -- training loop --------------------------------------------------------------


def seed_everything(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def collate(samples):
    """Stack a list of (image, targets) pairs into float32 tensors."""
    images = torch.from_numpy(np.stack([s[0] for s in samples]).astype(np.float32))[:, None]
    batch = {"image": images}
    for k in samples[0][1]:
        arr = np.stack([s[1][k] for s in samples])
        t = torch.from_numpy(arr)
        batch[k] = t.long() if arr.dtype.kind in "iu" and k == "layers" else t.float()
    return batch


def split_validation(n, fraction, rng):
    idx = rng.permutation(n)
    n_val = int(round(n * fraction)) if n > 1 else 0
    if fraction > 0 and n > 1:
        n_val = max(n_val, 1)
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


def _check_finite(parts):
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise TrainingDivergence(f"loss term {name!r} is not finite ({v.detach().item() if v.numel() == 1 else v.detach()})")


def _parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(params, config):
    cls = torch.optim.AdamW if config.optimizer.lower() == "adamw" else torch.optim.Adam
    return cls(params, lr=config.initial_lr, betas=config.betas,
               weight_decay=config.weight_decay)


def evaluate(model, samples, loss_fn, batch_size, score_fn=None):
    """Mean loss (and score) over ``samples`` in eval mode without augmentation."""
    was_training = model.training
    model.eval()
    losses, scores = [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size])
            total, _ = loss_fn(model, batch)
            losses.append(float(total) * len(batch["image"]))
            if score_fn is not None:
                scores.append(float(score_fn(model, batch)) * len(batch["image"]))
    model.train(was_training)
    n = len(samples)
    return sum(losses) / n, (sum(scores) / n if score_fn is not None else None)


def train(model, dataset, loss_fn, config, val_set=None, score_fn=None, name="model",
          log_path=None):
    """Train ``model`` in place and return ``(Checkpoint, log_rows)``.

    ``dataset`` is a sequence of ``(image, targets)`` pairs and ``loss_fn``
    maps ``(model, batch)`` to ``(total, {term: value})``.  A tenth of the
    training data is held out for validation unless ``val_set`` is given;
    the weights of the epoch with the lowest validation loss are restored
    at the end.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    rng = seed_everything(config.seed)
    if val_set is None:
        tr_idx, va_idx = split_validation(len(dataset), config.val_fraction, rng)
        train_set = [dataset[i] for i in tr_idx]
        val_set = [dataset[i] for i in va_idx]
    else:
        train_set = list(dataset)
    opt = make_optimizer(_parameters(model), config)
    rows = []
    best = (float("inf"), -1, None)
    model.train()
    for epoch in range(config.max_epochs):
        lr = lr_at(config, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(train_set))
        sums, count = {}, 0
        for i in range(0, len(order), config.batch_size):
            chunk = [augment(train_set[j], config, rng) for j in order[i:i + config.batch_size]]
            batch = collate(chunk)
            total, parts = loss_fn(model, batch)
            _check_finite({"total": total, **parts})
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            n = len(chunk)
            count += n
            sums["loss_total"] = sums.get("loss_total", 0.0) + total.item() * n
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item() * n
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}, "lr": lr}
        if val_set:
            val_loss, val_score = evaluate(model, val_set, loss_fn, config.batch_size, score_fn)
        else:
            val_loss, val_score = row["loss_total"], None
        row["val_loss"] = val_loss
        row["val_dice"] = val_score
        rows.append(row)
        log.info("%s epoch %d loss %.4f val %.4f", name, epoch, row["loss_total"], val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(model.state_dict()))
    if best[2] is not None:
        model.load_state_dict(best[2])
    ckpt = Checkpoint(
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        epoch=best[1],
        config=config.to_dict(),
        meta={"name": name, "best_val_loss": best[0]},
    )
    if config.checkpoint_dir:
        save_checkpoint(ckpt, Path(config.checkpoint_dir) / f"{name}.ckpt")
    if log_path is None and config.checkpoint_dir:
        log_path = Path(config.checkpoint_dir) / f"{name}_log.csv"
    if log_path is not None:
        write_log(rows, log_path)
    return ckpt, rows


def write_log(rows, path):
    """CSV metric log: epoch, loss_total, loss components..., val_dice."""
    if not rows:
        return
    parts = [k for k in rows[0] if k.startswith("loss_") and k != "loss_total"]
    extra = [k for k in rows[0] if k not in ("epoch", "loss_total", "val_dice", *parts)]
    fields = ["epoch", "loss_total", *parts, *extra, "val_dice"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
