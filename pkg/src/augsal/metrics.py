"""Benchmark evaluation metrics (AUC, sAUC, NSS, CC, SIM, KL) and the
fixation-blurring ground-truth constructor.

Conventions, fixed here and mirrored by the brute-force oracles in the test
suite:

* AUC positives are the prediction values at *distinct* fixated pixels;
  negatives are all non-fixated pixels (AUC-Judd) or the shuffle points as
  given, duplicates kept (sAUC). ROC areas are exact trapezoids over all
  distinct threshold values; a constant prediction scores 0.5.
* NSS z-scores use the population standard deviation over all pixels and
  average over the fixation list (duplicates count).
* SIM and KL normalize both maps to sum 1. KL is KL(gt || pred) with the
  epsilon stabilizer; because the stabilizer can push near-identical maps a
  few eps*N below zero, the metric clamps at 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import FixationSet, ImageTensor, SaliencyMap
from .errors import DataError, NumericalError, ValidationError
from .objectives import cc as _cc_torch
from .objectives import kld as _kld_torch

DEFAULT_BLUR_SIGMA_PX = 19.0


def blur_fixations(fix: FixationSet, dims: Optional[tuple] = None,
                   sigma: float = DEFAULT_BLUR_SIGMA_PX) -> SaliencyMap:
    """Ground-truth saliency from gaze points: rasterize distinct fixation
    pixels, convolve with an untruncated Gaussian of std ``sigma``, rescale
    to max 1.

    ``dims`` defaults to the fixation set's own dims; a different output
    resolution rescales the coordinates proportionally.
    """
    if sigma <= 0:
        raise ValidationError("sigma", f"blur sigma must be > 0, got {sigma}")
    if len(fix) == 0:
        raise DataError("cannot blur an empty fixation set")
    if dims is None:
        height, width = fix.height, fix.width
        xs = fix.points[:, 0].astype(np.float64)
        ys = fix.points[:, 1].astype(np.float64)
    else:
        height, width = int(dims[0]), int(dims[1])
        xs = fix.points[:, 0] * (width / fix.width)
        ys = fix.points[:, 1] * (height / fix.height)
    raster = np.zeros((height, width), dtype=np.float64)
    ix = np.clip(np.floor(xs).astype(int), 0, width - 1)
    iy = np.clip(np.floor(ys).astype(int), 0, height - 1)
    raster[iy, ix] = 1.0

    # Full-extent separable kernels as matrices: exact, no truncation window.
    ky = np.exp(-0.5 * ((np.arange(height)[:, None] - np.arange(height)[None, :]) / sigma) ** 2)
    kx = np.exp(-0.5 * ((np.arange(width)[:, None] - np.arange(width)[None, :]) / sigma) ** 2)
    blurred = ky @ raster @ kx
    return SaliencyMap(blurred / blurred.max())


def _roc_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Exact trapezoidal ROC area with thresholds at every distinct value."""
    if pos.size == 0:
        raise DataError("ROC needs at least one positive sample")
    if neg.size == 0:
        raise DataError("ROC needs at least one negative sample")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = np.empty(thresholds.size + 1)
    fpr = np.empty(thresholds.size + 1)
    tpr[0] = 0.0
    fpr[0] = 0.0
    for k, th in enumerate(thresholds):
        tpr[k + 1] = np.count_nonzero(pos >= th) / pos.size
        fpr[k + 1] = np.count_nonzero(neg >= th) / neg.size
    return float(np.trapz(tpr, fpr))


def _fixated_mask(s_pred: SaliencyMap, fix: FixationSet) -> np.ndarray:
    if (fix.height, fix.width) != (s_pred.height, s_pred.width):
        raise ValidationError("shape", "fixations and prediction must share dims")
    mask = np.zeros(s_pred.data.shape, dtype=bool)
    mask[fix.points[:, 1], fix.points[:, 0]] = True
    return mask


def auc_judd(s_pred: SaliencyMap, fix: FixationSet) -> float:
    """ROC area: saliency at fixated pixels vs all non-fixated pixels."""
    if len(fix) == 0:
        raise DataError("AUC needs at least one fixation")
    mask = _fixated_mask(s_pred, fix)
    pos = s_pred.data[mask]
    neg = s_pred.data[~mask]
    return _roc_auc(pos, neg)


def sauc(s_pred: SaliencyMap, fix: FixationSet, shuffle_fix: FixationSet) -> float:
    """Shuffled AUC: negatives are the prediction values at other images'
    fixation locations."""
    if len(fix) == 0:
        raise DataError("sAUC needs at least one fixation")
    if len(shuffle_fix) == 0:
        raise DataError("sAUC needs a nonempty shuffle set")
    mask = _fixated_mask(s_pred, fix)
    pos = s_pred.data[mask]
    neg = s_pred.data[shuffle_fix.points[:, 1], shuffle_fix.points[:, 0]]
    return _roc_auc(pos, neg)


def nss(s_pred: SaliencyMap, fix: FixationSet) -> float:
    """Mean z-scored prediction value over the fixation list."""
    if len(fix) == 0:
        raise DataError("NSS needs at least one fixation")
    vals = s_pred.data
    std = float(np.sqrt(np.mean((vals - vals.mean()) ** 2)))
    if std == 0.0:
        raise NumericalError("NSS undefined for a constant prediction")
    z = (vals - vals.mean()) / std
    return float(z[fix.points[:, 1], fix.points[:, 0]].mean())


def sim(s_pred: SaliencyMap, s_true: SaliencyMap) -> float:
    """Histogram intersection of the two maps normalized to sum 1."""
    a = np.asarray(s_pred.data, dtype=np.float64)
    b = np.asarray(s_true.data, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("shape", f"maps must share dims, got {a.shape} vs {b.shape}")
    ta, tb = a.sum(), b.sum()
    if ta <= 0 or tb <= 0:
        raise NumericalError("SIM undefined for an all-zero map")
    return float(np.minimum(a / ta, b / tb).sum())


def kl_metric(s_pred: SaliencyMap, s_true: SaliencyMap, eps: float = 1e-7) -> float:
    """Benchmark KL(gt || pred), epsilon-stabilized, clamped at 0."""
    return max(0.0, float(_kld_torch(s_true.data, s_pred.data, eps)))


@dataclass(frozen=True)
class MetricReport:
    """Dataset-averaged values of the six benchmark metrics."""

    auc_judd: float
    sauc: float
    nss: float
    cc: float
    sim: float
    kl: float
    n_images: int

    def __post_init__(self):
        if not (0.0 <= self.auc_judd <= 1.0 and 0.0 <= self.sauc <= 1.0):
            raise ValidationError("range", "AUC values must lie in [0, 1]")
        if not 0.0 <= self.sim <= 1.0:
            raise ValidationError("range", "SIM must lie in [0, 1]")
        if self.kl < 0.0:
            raise ValidationError("range", "KL must be >= 0")
        if self.n_images < 1:
            raise ValidationError("range", "report needs at least one image")

    def as_dict(self) -> dict:
        return {"auc": self.auc_judd, "kl": self.kl, "nss": self.nss,
                "cc": self.cc, "sauc": self.sauc, "sim": self.sim,
                "n_images": self.n_images}


# Table 1-style column ordering used by the CLI table.
_TABLE_COLUMNS = ("AUC", "KL", "NSS", "CC", "SAUC", "SIM")


def format_report_table(report: MetricReport, label: str = "model") -> str:
    """Aligned text table with the benchmark column order."""
    values = (report.auc_judd, report.kl, report.nss, report.cc, report.sauc, report.sim)
    name_w = max(len(label), len("Model"))
    header = "Model".ljust(name_w) + "".join(f"{c:>9}" for c in _TABLE_COLUMNS)
    row = label.ljust(name_w) + "".join(f"{v:>9.4f}" for v in values)
    return header + "\n" + row


def shuffle_fixations_for(dataset_fixations: Sequence[FixationSet], index: int,
                          n_other: int, seed: int) -> Optional[FixationSet]:
    """Union of fixations from ``n_other`` seeded-random other images.

    Returns None when the dataset has no other images to draw from.
    """
    others = [i for i in range(len(dataset_fixations)) if i != index]
    if not others:
        return None
    rng = np.random.default_rng(seed)
    chosen = rng.choice(others, size=min(n_other, len(others)), replace=False)
    ref = dataset_fixations[index]
    pts = []
    for j in sorted(int(c) for c in chosen):
        f = dataset_fixations[j]
        p = f.points.astype(np.float64)
        if (f.height, f.width) != (ref.height, ref.width):
            p = p * np.array([ref.width / f.width, ref.height / f.height])
        pts.append(np.floor(p).astype(np.int64))
    allpts = np.clip(np.concatenate(pts, axis=0),
                     [0, 0], [ref.width - 1, ref.height - 1])
    return FixationSet(allpts, height=ref.height, width=ref.width)


def evaluate(model: Callable, dataset, n_shuffle_images: int = 10,
             shuffle_seed: int = 0, eps: float = 1e-7) -> MetricReport:
    """Average the six metrics over a dataset of (image, saliency, fixations)
    records. ``model`` maps a dataset record (image + caption) to a
    SaliencyMap. Deterministic given ``shuffle_seed``.

    Records need ``image``, ``saliency`` and ``fixations`` attributes; see
    data.LoadedExample.
    """
    records = list(dataset)
    if not records:
        raise DataError("evaluate needs a nonempty dataset")
    for r in records:
        if r.fixations is None or r.saliency is None:
            raise DataError("evaluate needs fixations and saliency for every image")

    fixsets = [r.fixations for r in records]
    sums = np.zeros(6, dtype=np.float64)
    for i, rec in enumerate(records):
        pred = model(rec)
        shuffle = shuffle_fixations_for(fixsets, i, n_shuffle_images,
                                        seed=shuffle_seed + i)
        sauc_val = 0.5 if shuffle is None else sauc(pred, rec.fixations, shuffle)
        sums += np.array([
            auc_judd(pred, rec.fixations),
            sauc_val,
            nss(pred, rec.fixations),
            float(_cc_torch(rec.saliency.data, pred.data)),
            sim(pred, rec.saliency),
            kl_metric(pred, rec.saliency, eps),
        ])
    avg = sums / len(records)
    return MetricReport(auc_judd=avg[0], sauc=avg[1], nss=avg[2],
                        cc=avg[3], sim=avg[4], kl=avg[5], n_images=len(records))
