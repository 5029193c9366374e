"""Saliency-guided cross-attention edit engine.

The pipeline: extract per-token attention for the prompt, pick the token
whose map has the largest inner product with the saliency map, use their
elementwise product (rescaled to max 1) as the edit mask, apply a latent
contrast/brightness edit or a color token insertion, shrink the strength
until the low-level readout stays within two population standard deviations
of the original, then denoise with the mask injected at the edited token's
attention slot and decode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .backbone import Backbone
from .core import (AttentionStack, EditSpec, ImageTensor, LatentTensor,
                   PatchRegion, PropertyVector, SaliencyMap, resize_bilinear)
from .errors import DataError, NumericalError, ValidationError
from .photometrics import PopulationStats
from .readouts import LLFRHead, llfr_forward
from .vocab import EMPTY_TOKEN

logger = logging.getLogger(__name__)

# Identity strength per edit kind: applying the edit at this value is a no-op.
IDENTITY_ALPHA = {"contrast_increase": 1.0, "brightness_increase": 0.0,
                  "color_change": 0.0}


@dataclass(frozen=True)
class GammaScale:
    """Per-latent-channel scale mapping a unit RGB change into latent space."""

    gamma: np.ndarray

    def __post_init__(self):
        arr = np.array(self.gamma, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "gamma", arr)
        if arr.ndim != 1:
            raise ValidationError("shape", f"gamma must be a vector, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("finite", "gamma contains NaN/Inf")
        if float(np.linalg.norm(arr)) == 0.0:
            raise ValidationError("norm", "gamma must be nonzero")


@dataclass(frozen=True)
class EditResult:
    """Outcome of one edit.

    ``edited_latent`` is the edited latent entering the injected denoise (the
    direct result of the contrast/brightness arithmetic; the unedited
    inverted latent for color edits, whose change rides on the injection);
    ``edited_image`` is the decode of the denoised trajectory.
    """

    edited_latent: LatentTensor
    edited_image: ImageTensor
    applied_alpha: float
    selected_token_index: int
    mask: np.ndarray
    constraint_triggered: bool

    def __post_init__(self):
        m = np.array(self.mask, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        if not (np.isfinite(m).all() and (m >= 0).all() and (m <= 1).all()):
            raise ValidationError("mask", "mask values must lie in [0, 1]")


def select_region(attention: AttentionStack, s: SaliencyMap) -> Tuple[np.ndarray, int]:
    """Pick the token map with the largest inner product against the saliency
    map (ties to the lowest index) and return its saliency-weighted mask.

    The saliency map is resampled to the attention grid when dims differ; the
    product mask is rescaled to max 1 so soft attention does not shrink edits.
    """
    s_arr = s.data
    if s_arr.shape != attention.maps.shape[1:]:
        s_arr = np.clip(resize_bilinear(s_arr, attention.maps.shape[1:]), 0.0, 1.0)
    if not (s_arr > 0).any():
        raise DataError("saliency map is all zeros; no region to select")
    scores = (attention.maps.reshape(len(attention), -1) @ s_arr.reshape(-1))
    i_star = int(np.argmax(scores))
    mask = attention.maps[i_star] * s_arr
    peak = mask.max()
    if peak > 0:
        mask = mask / peak
    return mask, i_star


def compute_gamma(a: np.ndarray) -> GammaScale:
    """gamma = (1, 1, 1) times the Moore-Penrose pseudo-inverse of the
    decoder matrix, so adding gamma to a latent pixel raises the decoded RGB
    by approximately (1, 1, 1)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValidationError("shape", f"decoder matrix must be (C, 3), got {a.shape}")
    if np.linalg.matrix_rank(a) < 3:
        raise NumericalError("decoder matrix is rank deficient; gamma undefined")
    gamma = np.ones(3) @ np.linalg.pinv(a)
    return GammaScale(gamma=gamma)


def _check_mask(z: LatentTensor, mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (z.height, z.width):
        raise ValidationError("mask", f"mask {m.shape} does not match latent "
                                      f"{(z.height, z.width)}")
    if not (np.isfinite(m).all() and (m >= 0).all() and (m <= 1).all()):
        raise ValidationError("mask", "mask values must lie in [0, 1]")
    return m


def _masked_channel_means(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    w = m.sum()
    return (z * m[:, :, None]).sum(axis=(0, 1)) / w


def contrast_edit(z: LatentTensor, mask: np.ndarray, alpha: float,
                  gamma: GammaScale, pivot: str = "gamma_projected") -> LatentTensor:
    """Scale masked deviations from the region mean by ``alpha``.

    Z_E = M * (alpha * (Z - mu) + mu) + (1 - M) * Z, evaluated as
    Z + M * (alpha - 1) * (Z - mu) so identity cases stay bitwise exact.

    mu is the mask-weighted per-channel mean. With the default
    ``gamma_projected`` pivot, mu is first projected onto the gamma
    direction: pivot = (<mu, gamma> / <gamma, gamma>) * gamma. Since
    gamma decodes to an equal (1,1,1) RGB shift, the projected pivot is the
    latent whose decoded color is the neutral gray nearest the region mean,
    so amplifying deviations from it raises contrast without rotating hue.
    ``pivot="per_channel"`` uses mu itself.
    """
    if not np.isfinite(alpha) or alpha < 1.0:
        raise ValidationError("alpha", f"contrast alpha must be >= 1, got {alpha}")
    if pivot not in ("gamma_projected", "per_channel"):
        raise ValidationError("pivot", f"unknown pivot mode {pivot!r}")
    m = _check_mask(z, mask)
    if not (m > 0).any():
        logger.warning("contrast_edit: mask has empty support, returning input unchanged")
        return z
    mu = _masked_channel_means(z.data, m)
    if pivot == "gamma_projected":
        g = gamma.gamma
        mu = (float(mu @ g) / float(g @ g)) * g
    out = z.data + m[:, :, None] * ((alpha - 1.0) * (z.data - mu))
    return LatentTensor(out)


def brightness_edit(z: LatentTensor, mask: np.ndarray, alpha: float,
                    gamma: GammaScale) -> LatentTensor:
    """Add ``alpha * gamma`` inside the mask: Z_E = M * (Z + alpha * gamma)
    + (1 - M) * Z. The gamma scaling makes a unit alpha a unit RGB
    brightness step rather than a unit latent step."""
    if not np.isfinite(alpha) or alpha < 0.0:
        raise ValidationError("alpha", f"brightness alpha must be >= 0, got {alpha}")
    m = _check_mask(z, mask)
    out = z.data + m[:, :, None] * (alpha * gamma.gamma)
    return LatentTensor(out)


def token_insert_for_photometric(tokens: Sequence[str], i_star: int) -> Tuple[str, ...]:
    """Insert the reserved empty token before position ``i_star``; the
    injected attention rides on that slot, leaving the region's semantic
    tokens untouched."""
    tokens = tuple(tokens)
    if not 0 <= i_star < len(tokens):
        raise ValidationError("index", f"token index {i_star} out of range "
                                       f"for prompt of {len(tokens)} tokens")
    return tokens[:i_star] + (EMPTY_TOKEN,) + tokens[i_star:]


def token_insert_color(tokens: Sequence[str], i_star: int, color: str) -> Tuple[str, ...]:
    tokens = tuple(tokens)
    if not 0 <= i_star < len(tokens):
        raise ValidationError("index", f"token index {i_star} out of range "
                                       f"for prompt of {len(tokens)} tokens")
    return tokens[:i_star] + (color,) + tokens[i_star:]


def color_edit(img: ImageTensor, prompt, target_color: str, mask: np.ndarray,
               i_star: int, intensity: float, backbone: Backbone) -> EditResult:
    """Insert the color word before the selected token and denoise with the
    mask (scaled by ``intensity``) injected at the color token's slot."""
    if target_color not in backbone.vocabulary:
        raise DataError(f"color word {target_color!r} not in backbone vocabulary")
    tokens = backbone.tokenize(prompt)
    edited_tokens = token_insert_color(tokens, i_star, target_color)
    z_t = backbone.invert(backbone.encode(img))
    m = _check_mask(z_t, mask)
    z_out = backbone.denoise(z_t, edited_tokens,
                             injected_attention=(m * float(intensity), i_star))
    return EditResult(edited_latent=z_t,
                      edited_image=backbone.decode(z_out),
                      applied_alpha=float(intensity),
                      selected_token_index=i_star,
                      mask=m,
                      constraint_triggered=False)


@dataclass
class ConstrainOutcome:
    candidate: object
    applied_alpha: float
    constraint_triggered: bool
    exhausted: bool


def constrain(edit_closure: Callable[[float], object],
              measure: Callable[[object], PropertyVector],
              baseline: PropertyVector,
              stats: PopulationStats,
              requested_alpha: float,
              identity_alpha: float,
              max_halvings: int = 6) -> ConstrainOutcome:
    """Halve the edit strength until the measured low-level readout deviates
    from the original's readout by at most two population standard deviations
    in every component.

    After ``max_halvings`` unsuccessful halvings the identity edit is
    returned, flagged as both triggered and exhausted.
    """
    std2 = 2.0 * stats.std.as_array()
    base = baseline.as_array()
    alpha = float(requested_alpha)
    for attempt in range(max_halvings + 1):
        candidate = edit_closure(alpha)
        dev = np.abs(measure(candidate).as_array() - base)
        if bool((dev <= std2).all()):
            return ConstrainOutcome(candidate=candidate, applied_alpha=alpha,
                                    constraint_triggered=attempt > 0, exhausted=False)
        alpha = identity_alpha + 0.5 * (alpha - identity_alpha)
    logger.warning("constrain: edit still violates the 2-sigma bound after "
                   "%d halvings; returning the identity edit", max_halvings)
    return ConstrainOutcome(candidate=edit_closure(identity_alpha),
                            applied_alpha=identity_alpha,
                            constraint_triggered=True, exhausted=True)


def _mask_bbox_image_region(mask: np.ndarray, f: int,
                            img_h: int, img_w: int) -> PatchRegion:
    """Bounding box of the mask's upper support, mapped to image pixels."""
    thresh = 0.5 * mask.max()
    ys, xs = np.nonzero(mask >= thresh)
    x0, x1 = int(xs.min()) * f, (int(xs.max()) + 1) * f
    y0, y1 = int(ys.min()) * f, (int(ys.max()) + 1) * f
    return PatchRegion(x0, y0, min(x1, img_w), min(y1, img_h))


@dataclass(frozen=True)
class EditState:
    """The edited trajectory before the final denoise: edited latent, edited
    prompt, and the attention injection to apply. The feature extractor and
    the final denoise consume exactly these three."""

    latent: LatentTensor
    tokens: Tuple[str, ...]
    injection: Optional[Tuple[np.ndarray, int]]


def run_edit_pipeline(img: ImageTensor, prompt, s: SaliencyMap, spec: EditSpec,
                      backbone: Backbone, llfr: LLFRHead, stats: PopulationStats,
                      gamma: GammaScale, max_halvings: int = 6,
                      pivot: str = "gamma_projected") -> EditResult:
    """Full automated edit: invert/extract, select the region, apply the
    requested edit under the 2-sigma constraint, denoise with injection,
    decode.

    The constraint loop probes the low-level readout on the edited features
    (edited latent + edited prompt + injection); the accepted state is then
    denoised and decoded once. Deterministic given the backbone seed. An
    identity-strength request (or constraint exhaustion) short-circuits to
    the plain reconstruction of the input: no prompt edit, no injection.
    """
    tokens = backbone.tokenize(prompt)
    z_t, bundle, attn = backbone.invert_and_extract(img, tokens)
    sel_mask, i_star = select_region(attn, s)
    mask = np.asarray(spec.mask, dtype=np.float64) if spec.mask is not None else sel_mask
    _check_mask(z_t, mask)
    f = backbone.config.downsample_factor
    identity_alpha = IDENTITY_ALPHA[spec.kind]

    def reconstruct() -> EditResult:
        z_out = backbone.denoise(z_t, tokens)
        return EditResult(edited_latent=z_t, edited_image=backbone.decode(z_out),
                          applied_alpha=identity_alpha,
                          selected_token_index=i_star, mask=mask,
                          constraint_triggered=False)

    if spec.alpha == identity_alpha or not (mask > 0).any():
        if not (mask > 0).any():
            logger.warning("run_edit_pipeline: resolved mask is all zeros; "
                           "returning reconstruction")
        return reconstruct()

    region = _mask_bbox_image_region(mask, f, img.height, img.width)
    baseline = llfr_forward(llfr, bundle, region, f)

    if spec.kind == "color_change":
        if spec.target_color not in backbone.vocabulary:
            raise DataError(f"color word {spec.target_color!r} not in backbone vocabulary")
        edited_tokens = token_insert_color(tokens, i_star, spec.target_color)

        def closure(alpha: float) -> EditState:
            return EditState(latent=z_t, tokens=edited_tokens,
                             injection=(mask * alpha, i_star))
    else:
        edited_tokens = token_insert_for_photometric(tokens, i_star)

        def closure(alpha: float) -> EditState:
            if spec.kind == "contrast_increase":
                z_e = contrast_edit(z_t, mask, alpha, gamma, pivot=pivot)
            else:
                z_e = brightness_edit(z_t, mask, alpha, gamma)
            return EditState(latent=z_e, tokens=edited_tokens,
                             injection=(mask, i_star))

    def measure(state: EditState) -> PropertyVector:
        bundle_e = backbone.features_from_latent(state.latent, state.tokens,
                                                 state.injection)
        return llfr_forward(llfr, bundle_e, region, f)

    outcome = constrain(closure, measure, baseline, stats, spec.alpha,
                        identity_alpha, max_halvings=max_halvings)
    if outcome.exhausted:
        result = reconstruct()
        return EditResult(edited_latent=result.edited_latent,
                          edited_image=result.edited_image,
                          applied_alpha=identity_alpha,
                          selected_token_index=i_star, mask=mask,
                          constraint_triggered=True)
    state: EditState = outcome.candidate
    z_out = backbone.denoise(state.latent, state.tokens,
                             injected_attention=state.injection)
    return EditResult(edited_latent=state.latent,
                      edited_image=backbone.decode(z_out),
                      applied_alpha=outcome.applied_alpha,
                      selected_token_index=i_star, mask=mask,
                      constraint_triggered=outcome.constraint_triggered)


def save_edit_result(result: EditResult, directory, extra_meta: Optional[dict] = None) -> None:
    """Serialize an EditResult as a directory: edited image PNG, latent and
    mask tensors, and a JSON manifest with the applied strength, selected
    token index and flags."""
    import json
    from pathlib import Path

    from .data import save_image_png
    from .tensorfile import write_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image_png(result.edited_image, directory / "edited.png")
    write_tensor(result.edited_latent, directory / "edited_latent.aug")
    write_tensor(result.mask, directory / "mask.aug")
    manifest = {
        "applied_alpha": result.applied_alpha,
        "selected_token_index": result.selected_token_index,
        "constraint_triggered": result.constraint_triggered,
    }
    manifest.update(extra_meta or {})
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_edit_result(directory) -> EditResult:
    """Rehydrate an EditResult directory written by :func:`save_edit_result`."""
    import json
    from pathlib import Path

    from .data import load_image_png
    from .tensorfile import read_tensor

    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    return EditResult(
        edited_latent=LatentTensor(read_tensor(directory / "edited_latent.aug")),
        edited_image=load_image_png(directory / "edited.png"),
        applied_alpha=float(manifest["applied_alpha"]),
        selected_token_index=int(manifest["selected_token_index"]),
        mask=read_tensor(directory / "mask.aug"),
        constraint_triggered=bool(manifest["constraint_triggered"]))
