"""Trainable readout heads over backbone features.

Three heads probe the frozen backbone: the low-level head regresses the six
photometric properties of a patch from region-pooled low-level features, the
high-level head classifies the object inside a region from high-level
features, and the saliency head decodes the concatenated bundle into a
full-resolution saliency map through 7 SiLU conv stages with skip
connections.

Training touches only the backbone's feature-aggregation layer (at the
feature learning rate) and the heads themselves (at the readout learning
rate); the denoiser, encoder and decoder stay frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TinyBackbone
from .core import (FeatureBundle, ImageTensor, PatchRegion, PropertyVector,
                   SaliencyMap)
from .errors import DataError, NumericalError, ValidationError
from .objectives import LossWeights, cc as _cc, edit_loss, kld as _kld, \
    readout_loss, saliency_loss
from .photometrics import property_vector, sample_patch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReadoutConfig:
    llfr_hidden_dims: Tuple[int, ...] = (64, 64)
    hlfr_conv_channels: Tuple[int, ...] = (32, 32)
    num_classes: int = 3
    sr_channels: Tuple[int, ...] = (64, 64, 48, 48, 32, 32, 1)
    activation: str = "silu"  # fixed for the saliency head

    def __post_init__(self):
        object.__setattr__(self, "llfr_hidden_dims", tuple(self.llfr_hidden_dims))
        object.__setattr__(self, "hlfr_conv_channels", tuple(self.hlfr_conv_channels))
        object.__setattr__(self, "sr_channels", tuple(self.sr_channels))
        if len(self.sr_channels) != 7:
            raise ValidationError("sr_channels",
                                  f"saliency head needs exactly 7 stages, got {len(self.sr_channels)}")
        if self.num_classes < 2:
            raise ValidationError("num_classes", "need at least 2 classes")
        if self.activation != "silu":
            raise ValidationError("activation", "saliency head activation is fixed to SiLU")


@dataclass(frozen=True)
class ClassLabel:
    id: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        if not 0 <= self.id < self.num_classes:
            raise ValidationError("range",
                                  f"class id {self.id} outside [0, {self.num_classes})")


def map_region_to_latent(region: PatchRegion, downsample_factor: int,
                         latent_h: int, latent_w: int) -> PatchRegion:
    """Image-space region to latent-grid region, rounded outward."""
    f = downsample_factor
    x0 = region.x0 // f
    y0 = region.y0 // f
    x1 = -(-region.x1 // f)
    y1 = -(-region.y1 // f)
    mapped = PatchRegion(x0, y0, min(x1, latent_w), min(y1, latent_h))
    mapped.check_within(latent_h, latent_w)
    return mapped


def _masked_pool(features: torch.Tensor, region: PatchRegion) -> torch.Tensor:
    """Average (B, C, H, W) features over the region cells -> (B, C)."""
    sl = features[:, :, region.y0:region.y1, region.x0:region.x1]
    return sl.mean(dim=(2, 3))


class LLFRHead(nn.Module):
    """Shared MLP trunk with one scalar head per photometric property.

    Means (R, G, B, brightness) pass through a sigmoid, contrasts through a
    softplus, so every output is valid by construction.
    """

    def __init__(self, in_channels: int, hidden_dims: Sequence[int]):
        super().__init__()
        dims = [in_channels] + list(hidden_dims)
        self.trunk = nn.Sequential(*[
            layer for a, b in zip(dims[:-1], dims[1:])
            for layer in (nn.Linear(a, b), nn.SiLU())
        ])
        self.heads = nn.ModuleList([nn.Linear(dims[-1], 1) for _ in range(6)])

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        h = self.trunk(pooled)
        outs = [head(h)[:, 0] for head in self.heads]
        means = torch.sigmoid(torch.stack(outs[:4], dim=-1))
        contrasts = F.softplus(torch.stack(outs[4:], dim=-1))
        return torch.cat([means, contrasts], dim=-1)


class HLFRHead(nn.Module):
    """Conv stack over high-level features, region-pooled into class logits.

    The convs are bias-free so all-zero features yield logits equal to the
    classifier bias.
    """

    def __init__(self, in_channels: int, conv_channels: Sequence[int], num_classes: int):
        super().__init__()
        layers: List[nn.Module] = []
        c = in_channels
        for ch in conv_channels:
            layers += [nn.Conv2d(c, ch, 3, padding=1, bias=False), nn.SiLU()]
            c = ch
        self.convs = nn.Sequential(*layers)
        self.classifier = nn.Linear(c, num_classes)

    def forward(self, high: torch.Tensor, region: PatchRegion) -> torch.Tensor:
        return self.classifier(_masked_pool(self.convs(high), region))


class SRHead(nn.Module):
    """7 conv stages with SiLU and skips from stage i into stage i+2.

    Skips project through a 1x1 conv when channel counts differ. The last
    stage emits the 1-channel logit map, which is upsampled to image
    resolution and squashed into [0, 1].
    """

    def __init__(self, in_channels: int, channels: Sequence[int]):
        super().__init__()
        chans = list(channels)
        self.convs = nn.ModuleList()
        self.skips = nn.ModuleList()
        prev = in_channels
        sources = [in_channels]  # channel count of each stage input history
        for i, ch in enumerate(chans):
            self.convs.append(nn.Conv2d(prev, ch, 3, padding=1))
            if i >= 2:
                src = sources[i - 1]
                self.skips.append(nn.Identity() if src == ch else nn.Conv2d(src, ch, 1))
            prev = ch
            sources.append(ch)

    def forward(self, feats: torch.Tensor, out_hw: Tuple[int, int]) -> torch.Tensor:
        xs = [feats]
        for i, conv in enumerate(self.convs):
            y = conv(xs[-1])
            if i >= 2:
                y = y + self.skips[i - 2](xs[i - 1])
            xs.append(F.silu(y) if i < len(self.convs) - 1 else y)
        logits = F.interpolate(xs[-1], size=out_hw, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)


def build_heads(backbone_cfg, readout_cfg: ReadoutConfig):
    llfr = LLFRHead(backbone_cfg.feature_channels_low, readout_cfg.llfr_hidden_dims)
    hlfr = HLFRHead(backbone_cfg.feature_channels_high, readout_cfg.hlfr_conv_channels,
                    readout_cfg.num_classes)
    sr = SRHead(backbone_cfg.feature_channels_low + backbone_cfg.feature_channels_high,
                readout_cfg.sr_channels)
    return llfr, hlfr, sr


def _bundle_to_torch(bundle: FeatureBundle):
    low = torch.from_numpy(np.ascontiguousarray(bundle.low_level.transpose(2, 0, 1))).float()[None]
    high = torch.from_numpy(np.ascontiguousarray(bundle.high_level.transpose(2, 0, 1))).float()[None]
    return low, high


def llfr_forward(head: LLFRHead, bundle: FeatureBundle, region: PatchRegion,
                 downsample_factor: int) -> PropertyVector:
    mapped = map_region_to_latent(region, downsample_factor, bundle.height, bundle.width)
    low, _ = _bundle_to_torch(bundle)
    with torch.no_grad():
        pred = head(_masked_pool(low, mapped))[0]
    return PropertyVector.from_array(pred.numpy().astype(np.float64))


def hlfr_forward(head: HLFRHead, bundle: FeatureBundle, region: PatchRegion,
                 downsample_factor: int) -> np.ndarray:
    mapped = map_region_to_latent(region, downsample_factor, bundle.height, bundle.width)
    _, high = _bundle_to_torch(bundle)
    with torch.no_grad():
        logits = head(high, mapped)[0]
    return logits.numpy().astype(np.float64)


def sr_forward(head: SRHead, bundle: FeatureBundle,
               image_dims: Tuple[int, int]) -> SaliencyMap:
    low, high = _bundle_to_torch(bundle)
    with torch.no_grad():
        out = head(torch.cat([low, high], dim=1), tuple(int(d) for d in image_dims))
    return SaliencyMap(out[0, 0].numpy().astype(np.float64))


class FeatureCache:
    """Pre-aggregation feature maps per dataset image.

    The denoiser is frozen during readout training, so the concatenated
    multi-scale activations of each (image, caption) pair are constants and
    can be computed once.
    """

    def __init__(self, backbone: TinyBackbone, examples):
        self.backbone = backbone
        self.raws: List[torch.Tensor] = []
        self.examples = list(examples)
        with torch.no_grad():
            for ex in self.examples:
                tokens = backbone.tokenize(ex.caption)
                z_t = backbone.invert(backbone.encode(ex.image))
                raw = backbone._raw_features(backbone._lat_to_torch(z_t),
                                             backbone._token_ids(tokens))
                self.raws.append(raw)

    def __len__(self) -> int:
        return len(self.raws)

    def bundle_tensors(self, i: int):
        """(low, high) torch maps with gradient through the aggregation conv."""
        return self.backbone.aggregate(self.raws[i])


@dataclass
class TrainResult:
    log: List[tuple]
    header: Tuple[str, ...]


def train_readouts(examples, backbone: TinyBackbone, llfr: LLFRHead, hlfr: HLFRHead,
                   readout_cfg: ReadoutConfig, steps: int = 20000,
                   lr_features: float = 5e-5, lr_readouts: float = 1e-4,
                   batch_size: int = 8, seed: int = 0,
                   weights: LossWeights = LossWeights(),
                   patch_frac: Tuple[float, float] = (0.2, 0.5),
                   cache: Optional[FeatureCache] = None) -> TrainResult:
    """Minimize the readout loss with AdamW over aggregation + head weights.

    Each step draws a batch of images; per image one random patch supplies
    the photometric targets (computed by the exact oracles) and one random
    labeled box supplies the classification target.
    """
    if not examples and cache is None:
        raise DataError("readout training needs a nonempty dataset")
    cache = cache or FeatureCache(backbone, examples)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.AdamW([
        {"params": backbone.aggregation.parameters(), "lr": lr_features},
        {"params": list(llfr.parameters()) + list(hlfr.parameters()), "lr": lr_readouts},
    ])
    f = backbone.config.downsample_factor
    log = []
    for step in range(steps):
        idx = rng.integers(0, len(cache), size=batch_size)
        preds, targets, logits, labels = [], [], [], []
        for i in idx:
            ex = cache.examples[int(i)]
            low, high = cache.bundle_tensors(int(i))
            lh, lw = low.shape[2], low.shape[3]

            patch = sample_patch(ex.image.height, ex.image.width,
                                 patch_frac[0], patch_frac[1], rng)
            targets.append(torch.from_numpy(property_vector(ex.image, patch).as_array()))
            mapped = map_region_to_latent(patch, f, lh, lw)
            preds.append(llfr(_masked_pool(low.double(), mapped).float())[0])

            box_idx = int(rng.integers(0, len(ex.boxes)))
            label, box = ex.boxes[box_idx]
            labels.append(label.id)
            mapped_box = map_region_to_latent(box, f, lh, lw)
            logits.append(hlfr(high, mapped_box)[0])

        loss = readout_loss(torch.stack(preds), torch.stack(targets).float(),
                            torch.stack(logits), labels, weights)
        opt.zero_grad()
        loss.backward()
        if not np.isfinite(loss.detach().item()):
            raise NumericalError(f"readout training diverged at step {step}")
        opt.step()
        log.append((step, loss.detach().item()))
    return TrainResult(log=log, header=("step", "loss"))


def _edited_bundle_tensors(backbone: TinyBackbone, sample):
    """Feature tensors for an edited sample, read directly from the edited
    trajectory (latent + edited prompt + injection); gradient only through
    the aggregation conv."""
    tokens = backbone.tokenize(sample.edited_tokens)
    with torch.no_grad():
        raw = backbone._raw_features(backbone._lat_to_torch(sample.edit.edited_latent),
                                     backbone._token_ids(tokens),
                                     sample.injection)
    return backbone.aggregate(raw)


def _sr_prediction(sr: SRHead, low: torch.Tensor, high: torch.Tensor,
                   out_hw: Tuple[int, int]) -> torch.Tensor:
    return sr(torch.cat([low, high], dim=1), out_hw)[0, 0]


def _masked_region_loss(s_gt: torch.Tensor, pred: torch.Tensor,
                        region_mask: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Saliency loss restricted to a pixel subset (used on the unedited region)."""
    t = s_gt[region_mask]
    p = pred[region_mask]
    return saliency_loss(t, p, weights)


def train_saliency(examples, backbone: TinyBackbone, sr: SRHead, steps: int = 22000,
                   lr_features: float = 5e-5, lr_readouts: float = 1e-4,
                   batch_size: int = 8, seed: int = 0,
                   weights: LossWeights = LossWeights(),
                   augment_engine=None,
                   cache: Optional[FeatureCache] = None) -> TrainResult:
    """Minimize the saliency loss over aggregation + saliency-head weights.

    With an augmentation engine, each sample follows the engine's sampling
    rule: train on the original pair, or generate an edit and train on the
    edited pair per the engine's target mode. Edit pipeline failures skip the
    sample with a warning; training never aborts on them.
    """
    if not examples and cache is None:
        raise DataError("saliency training needs a nonempty dataset")
    cache = cache or FeatureCache(backbone, examples)
    rng = np.random.default_rng(seed)
    rng_aug = (np.random.default_rng(augment_engine.config.seed)
               if augment_engine is not None else None)
    torch.manual_seed(seed)
    opt = torch.optim.AdamW([
        {"params": backbone.aggregation.parameters(), "lr": lr_features},
        {"params": sr.parameters(), "lr": lr_readouts},
    ])
    log = []
    for step in range(steps):
        idx = rng.integers(0, len(cache), size=batch_size)
        losses = []
        cc_terms, kld_terms, n_edited = [], [], 0
        for i in idx:
            ex = cache.examples[int(i)]
            out_hw = (ex.image.height, ex.image.width)
            decision = (augment_engine.sample_step(rng_aug)
                        if augment_engine is not None else None)
            if decision is None or decision.is_original:
                low, high = cache.bundle_tensors(int(i))
                pred = _sr_prediction(sr, low, high, out_hw)
                target = torch.from_numpy(np.array(ex.saliency.data))
                cc_v = 1.0 - _cc(target, pred)
                kld_v = _kld(target, pred, weights.eps)
                losses.append(weights.lambda5 * cc_v + weights.lambda6 * kld_v)
                cc_terms.append(float(cc_v.detach()))
                kld_terms.append(float(kld_v.detach()))
                continue
            try:
                sample = augment_engine.augmented_batch(ex.image, ex.saliency,
                                                        ex.caption, decision)
            except Exception as exc:  # noqa: BLE001 - never abort training
                logger.warning("augmentation failed at step %d (%s); sample skipped",
                               step, exc)
                continue
            n_edited += 1
            if sample.injection is None:  # exhaustion fell back to the original
                low_e, high_e = cache.bundle_tensors(int(i))
            else:
                low_e, high_e = _edited_bundle_tensors(backbone, sample)
            pred_e = _sr_prediction(sr, low_e, high_e, out_hw)
            mode = augment_engine.config.target_mode
            if mode == "consistency":
                low, high = cache.bundle_tensors(int(i))
                pred_o = _sr_prediction(sr, low, high, out_hw).detach()
                m_img = torch.from_numpy(np.array(sample.mask_image))
                loss_i = edit_loss(pred_o, pred_e, m_img, weights.eps)
                outside = m_img < 0.5
                if bool(outside.any()):
                    loss_i = loss_i + _masked_region_loss(
                        torch.from_numpy(np.array(ex.saliency.data)), pred_e, outside, weights)
                losses.append(loss_i)
            else:
                target_map = ex.saliency if mode == "original_gt" else sample.target
                target = torch.from_numpy(np.array(target_map.data))
                cc_v = 1.0 - _cc(target, pred_e)
                kld_v = _kld(target, pred_e, weights.eps)
                losses.append(weights.lambda5 * cc_v + weights.lambda6 * kld_v)
                cc_terms.append(float(cc_v.detach()))
                kld_terms.append(float(kld_v.detach()))
        if not losses:
            log.append((step, float("nan"), float("nan"), float("nan"), n_edited))
            continue
        loss = torch.stack([l if isinstance(l, torch.Tensor) else torch.tensor(l)
                            for l in losses]).mean()
        opt.zero_grad()
        loss.backward()
        if not np.isfinite(loss.detach().item()):
            raise NumericalError(f"saliency training diverged at step {step}")
        opt.step()
        log.append((step, loss.detach().item(),
                    float(np.mean(cc_terms)) if cc_terms else float("nan"),
                    float(np.mean(kld_terms)) if kld_terms else float("nan"),
                    n_edited))
    return TrainResult(log=log, header=("step", "loss", "cc_term", "kld_term", "n_edited"))


@dataclass
class SaliencyPredictor:
    """Callable bundling a trained backbone and saliency head for evaluation."""

    backbone: TinyBackbone
    sr: SRHead

    def predict(self, image: ImageTensor, prompt) -> SaliencyMap:
        _, bundle, _ = self.backbone.invert_and_extract(image, prompt)
        return sr_forward(self.sr, bundle, (image.height, image.width))

    def predict_from_latent(self, z_t, tokens, out_hw,
                            injection=None) -> SaliencyMap:
        """Prediction for an (edited) latent trajectory rather than an image."""
        bundle = self.backbone.features_from_latent(z_t, tokens, injection)
        return sr_forward(self.sr, bundle, out_hw)

    def __call__(self, record) -> SaliencyMap:
        return self.predict(record.image, record.caption)


def llfr_mean_abs_error(examples, backbone: TinyBackbone, llfr: LLFRHead,
                        patches_per_image: int = 4, seed: int = 0,
                        patch_frac: Tuple[float, float] = (0.2, 0.5)) -> dict:
    """Held-out MAE per photometric property, predictions vs exact oracles."""
    from .core import PROPERTY_NAMES

    rng = np.random.default_rng(seed)
    f = backbone.config.downsample_factor
    errors = []
    for ex in examples:
        _, bundle, _ = backbone.invert_and_extract(ex.image, ex.caption)
        for _ in range(patches_per_image):
            patch = sample_patch(ex.image.height, ex.image.width,
                                 patch_frac[0], patch_frac[1], rng)
            pred = llfr_forward(llfr, bundle, patch, f).as_array()
            target = property_vector(ex.image, patch).as_array()
            errors.append(np.abs(pred - target))
    mae = np.mean(np.stack(errors), axis=0)
    return dict(zip(PROPERTY_NAMES, mae.tolist()))


def hlfr_accuracy(examples, backbone: TinyBackbone, hlfr: HLFRHead) -> float:
    """Classification accuracy over every labeled box in the dataset."""
    f = backbone.config.downsample_factor
    correct, total = 0, 0
    for ex in examples:
        _, bundle, _ = backbone.invert_and_extract(ex.image, ex.caption)
        for label, box in ex.boxes:
            logits = hlfr_forward(hlfr, bundle, box, f)
            correct += int(np.argmax(logits) == label.id)
            total += 1
    return correct / max(total, 1)
