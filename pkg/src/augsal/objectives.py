"""Training losses: readout regression + classification, saliency distribution
matching (correlation + KL), and the masked edit-consistency loss.

All functions are pure and operate on torch tensors (numpy arrays are
converted to float64 tensors), returning 0-dim tensors so they can be used
both as training objectives and, via ``float()``, as plain numbers. The
correlation term enters the saliency loss as ``1 - CC`` so that a perfect
prediction minimizes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class LossWeights:
    """Weights for the loss terms plus the KL stabilizer epsilon.

    The local-contrast regression term carries no weight of its own (it is
    summed unweighted); defaults are all 1.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    eps: float = 1e-7

    def __post_init__(self):
        vals = [self.lambda1, self.lambda2, self.lambda3,
                self.lambda4, self.lambda5, self.lambda6]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValidationError("weights", "loss weights must be finite and >= 0")
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise ValidationError("eps", f"eps must be > 0, got {self.eps}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValidationError("shape", f"maps must share dims, got {tuple(a.shape)} "
                                       f"vs {tuple(b.shape)}")


def _normalize_to_sum(m: torch.Tensor) -> torch.Tensor:
    total = m.sum()
    if float(total.detach()) <= 0.0:
        raise NumericalError("cannot normalize an all-zero map to a distribution")
    return m / total


def kld(s_true, s_pred, eps: float = 1e-7) -> torch.Tensor:
    """Epsilon-stabilized KL divergence between maps normalized to sum 1.

    sum_i S_i * log(eps + S_i / (eps + S'_i)), with S the (normalized) first
    argument. Can dip a few eps*N below zero for near-identical maps.
    """
    s = _normalize_to_sum(_as_tensor(s_true))
    sp = _normalize_to_sum(_as_tensor(s_pred))
    _check_same_shape(s, sp)
    return (s * torch.log(eps + s / (eps + sp))).sum()


def cc(s_a, s_b) -> torch.Tensor:
    """Pearson correlation between two maps, over pixels."""
    a = _as_tensor(s_a).reshape(-1)
    b = _as_tensor(s_b).reshape(-1)
    _check_same_shape(a, b)
    a = a - a.mean()
    b = b - b.mean()
    denom = torch.sqrt((a * a).sum() * (b * b).sum())
    if float(denom.detach()) == 0.0:
        raise NumericalError("correlation undefined for a zero-variance map")
    return (a * b).sum() / denom


def saliency_loss(s_true, s_pred, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """lambda5 * (1 - CC) + lambda6 * KLD; zero (up to eps) at a perfect match."""
    return (weights.lambda5 * (1.0 - cc(s_true, s_pred))
            + weights.lambda6 * kld(s_true, s_pred, weights.eps))


def _bce(target: torch.Tensor, pred: torch.Tensor, eps: float) -> torch.Tensor:
    pred = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(pred) + (1.0 - target) * torch.log(1.0 - pred))


def edit_loss(s_pred_orig, s_pred_edit, mask, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy between the masked original prediction (detached
    target) and the masked edited prediction, averaged over mask support.

    Keeps the edited prediction from losing the saliency the original already
    had inside the edit region; the augmentation target supplies the boost.
    """
    sp = _as_tensor(s_pred_orig)
    se = _as_tensor(s_pred_edit)
    m = _as_tensor(mask)
    _check_same_shape(sp, se)
    _check_same_shape(sp, m)
    support = m > 0
    if not bool(support.any()):
        raise ValidationError("mask", "edit loss needs a mask with nonempty support")
    target = (m * sp).detach()
    pred = m * se
    return _bce(target, pred, eps)[support].mean()


def readout_loss(pred_props, target_props, pred_logits, target_class,
                 weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of squared-L2 property errors plus classification CE.

    Property order is (mu_r, mu_g, mu_b, mu_br, c_local, c_global); the RGB
    means form one squared-distance term. Leading batch dims are averaged.
    """
    p = _as_tensor(pred_props)
    t = _as_tensor(target_props)
    if p.shape != t.shape or p.shape[-1] != 6:
        raise ValidationError("shape", f"property tensors must  match with last dim 6, "
                                       f"got {tuple(p.shape)} vs {tuple(t.shape)}")
    logits = _as_tensor(pred_logits)
    cls = torch.as_tensor(target_class, dtype=torch.long)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
        cls = cls.reshape(1)
    ce = F.cross_entropy(logits, cls, reduction="mean")

    d = p - t
    sq = d * d
    l2_rgb = sq[..., 0:3].sum(dim=-1)
    l2_br = sq[..., 3]
    l2_cl = sq[..., 4]
    l2_cg = sq[..., 5]
    props_term = (weights.lambda1 * l2_rgb + weights.lambda2 * l2_br
                  + l2_cl + weights.lambda3 * l2_cg).mean()
    return props_term + weights.lambda4 * ce
