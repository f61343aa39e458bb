"""Segmentation, vessel-density and image-fidelity metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .oct_core import SENTINEL, OctDataError, check_binary

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class SegScores:
    di: float
    iou: float
    acc: float
    sen: float
    ausde: float = float("nan")

    def as_row(self):
        return {"di": self.di, "iou": self.iou, "ausde": self.ausde, "acc": self.acc,
                "sen": self.sen}


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise OctDataError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def seg_scores(pred, gt):
    """DI, IOU, accuracy and sensitivity of a binary prediction.

    Two empty masks score DI = IOU = 1; sensitivity against an empty ground
    truth is 1.
    """
    _same_shape(pred, gt)
    p = check_binary(pred, "pred")
    g = check_binary(gt, "gt")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    union = tp + fp + fn
    if union == 0:
        di = iou = 1.0
    else:
        di = 2 * tp / (2 * tp + fp + fn)
        iou = tp / union
    sen = 1.0 if tp + fn == 0 else tp / (tp + fn)
    acc = (tp + tn) / p.size
    return SegScores(di=di, iou=iou, acc=acc, sen=sen)


def ausde(pred_boundary, gt_boundary, return_coverage=False):
    """Mean absolute row mismatch between two boundary curves, in pixels.

    Columns where either curve holds the sentinel are skipped; the optional
    coverage is the fraction of columns that were compared.
    """
    p = np.asarray(pred_boundary, dtype=np.float64)
    g = np.asarray(gt_boundary, dtype=np.float64)
    _same_shape(p, g)
    valid = (p != SENTINEL) & (g != SENTINEL)
    if not valid.any():
        raise OctDataError("no column is valid in both boundaries")
    err = float(np.abs(p[valid] - g[valid]).mean())
    if return_coverage:
        return err, float(valid.mean())
    return err


def binarize_vessels(enface, window=15, offset=0.02, min_size=5):
    """Dark-vessel map by local mean thresholding.

    A pixel is vessel when it is darker than the mean of its
    ``window x window`` neighbourhood minus ``offset``; connected specks of
    fewer than ``min_size`` pixels are dropped.
    """
    img = np.asarray(enface, dtype=np.float64)
    local = ndimage.uniform_filter(img, size=window, mode="reflect")
    v = img < local - offset
    if min_size > 1 and v.any():
        lab, n = ndimage.label(v)
        sizes = np.bincount(lab.ravel())
        keep = sizes >= min_size
        keep[0] = False
        v = keep[lab]
    return v.astype(np.uint8)


def vessel_density(vessels, roi=None):
    """Fraction of ROI pixels that are vessel (whole image when ``roi`` is None)."""
    v = check_binary(vessels, "vessels")
    if roi is None:
        r = np.ones_like(v, dtype=bool)
    else:
        _same_shape(v, roi)
        r = check_binary(roi, "roi")
    n = np.count_nonzero(r)
    if n == 0:
        raise OctDataError("empty ROI")
    return np.count_nonzero(v & r) / n


def _gaussian_window(sigma=1.5, truncate=3.5):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def ssim(a, b, data_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity with an 11 x 11 Gaussian window.

    Window statistics use population (not sample) covariance and the mean
    is taken over pixels whose window lies fully inside the image.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    _same_shape(x, y)
    w = _gaussian_window(sigma)
    pad = len(w) // 2

    def blur(z):
        z = ndimage.correlate1d(z, w, axis=0, mode="reflect")
        return ndimage.correlate1d(z, w, axis=1, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def image_fidelity(a, b):
    """(SSIM, PSNR in dB with peak 1, MSE); identical images give PSNR = inf."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    _same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    psnr = float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)
    if np.array_equal(x, y):
        return 1.0, psnr, mse
    return ssim(x, y), psnr, mse


def report_psnr(psnr):
    """PSNR value for CSV reports: infinities capped at 99 dB."""
    return min(psnr, PSNR_CAP_DB)
