"""Training-time augmentation sampling.

Each training step either uses the original (image, ground truth) pair, with
probability ``p``, or draws a random edit kind and strength, runs the edit
pipeline, and trains on the edited image. The edited pair's target is the
ground truth boosted (and clamped) inside the edit mask's image footprint:
the edits are saliency-increasing by construction, so the target never
decreases inside the edited region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple

import numpy as np

from .backbone import Backbone
from .core import (EDIT_KINDS, EditSpec, ImageTensor, SaliencyMap,
                   resize_bilinear)
from .editor import (IDENTITY_ALPHA, EditResult, GammaScale, run_edit_pipeline,
                     token_insert_color, token_insert_for_photometric)
from .errors import ValidationError
from .photometrics import PopulationStats
from .readouts import LLFRHead
from .vocab import COLOR_NAMES

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_RANGES: Mapping[str, Tuple[float, float]] = {
    "contrast_increase": (1.25, 2.0),
    "brightness_increase": (0.15, 0.5),
    "color_change": (0.5, 1.5),
}

TARGET_MODES = ("boosted_gt", "original_gt", "consistency")


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 0.5
    edit_kinds: Tuple[str, ...] = EDIT_KINDS
    alpha_ranges: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_ALPHA_RANGES))
    color_palette: Tuple[str, ...] = COLOR_NAMES
    boost: float = 0.15
    seed: int = 0
    target_mode: str = "boosted_gt"

    def __post_init__(self):
        object.__setattr__(self, "edit_kinds", tuple(self.edit_kinds))
        object.__setattr__(self, "color_palette", tuple(self.color_palette))
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError("p", f"p must lie in [0, 1], got {self.p}")
        if not self.edit_kinds or any(k not in EDIT_KINDS for k in self.edit_kinds):
            raise ValidationError("edit_kinds",
                                  f"edit kinds must be a nonempty subset of {EDIT_KINDS}")
        if self.boost < 0:
            raise ValidationError("boost", "boost must be >= 0")
        if self.target_mode not in TARGET_MODES:
            raise ValidationError("target_mode", f"unknown target mode {self.target_mode!r}")
        for kind in self.edit_kinds:
            lo, hi = self.alpha_ranges[kind]
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValidationError("alpha_ranges", f"bad range for {kind}: [{lo}, {hi}]")
            floor = 1.0 if kind == "contrast_increase" else 0.0
            if lo < floor:
                raise ValidationError("alpha_ranges",
                                      f"{kind} strengths must be >= {floor}, got {lo}")
        if "color_change" in self.edit_kinds and not self.color_palette:
            raise ValidationError("color_palette", "color edits need a nonempty palette")


@dataclass(frozen=True)
class StepDecision:
    """Outcome of one augmentation draw: train on the original, or on an
    edit of the given kind/strength."""

    kind: str  # "original" or one of EDIT_KINDS
    alpha: float = 0.0
    color: Optional[str] = None

    @property
    def is_original(self) -> bool:
        return self.kind == "original"


def sample_step(rng: np.random.Generator, config: AugmentConfig) -> StepDecision:
    """Original with probability p; otherwise a uniform kind with a uniform
    strength from its range (and a uniform palette color for color edits)."""
    if rng.random() < config.p:
        return StepDecision(kind="original")
    kind = config.edit_kinds[int(rng.integers(0, len(config.edit_kinds)))]
    lo, hi = config.alpha_ranges[kind]
    alpha = float(rng.uniform(lo, hi))
    color = None
    if kind == "color_change":
        color = config.color_palette[int(rng.integers(0, len(config.color_palette)))]
    return StepDecision(kind=kind, alpha=alpha, color=color)


@dataclass(frozen=True)
class AugmentedSample:
    """One resolved training pair plus the edit context the loss needs.

    ``image`` is the decoded edited image (the pair a downstream consumer
    trains on); the in-framework saliency head reads its features straight
    from the edited trajectory (``edit.edited_latent`` + ``edited_tokens`` +
    ``injection``), which avoids a decode/re-encode round trip.
    """

    image: ImageTensor
    target: SaliencyMap
    loss_kind: str                      # "original" | "edited"
    mask_image: Optional[np.ndarray]    # edit mask at image resolution
    edit: Optional[EditResult]
    decision: StepDecision
    edited_tokens: Optional[tuple] = None
    injection: Optional[tuple] = None   # (map, token index) for features


def boosted_target(s_gt: SaliencyMap, mask_image: np.ndarray, boost: float) -> SaliencyMap:
    """clamp(S + boost * M, 0, 1): never below the original inside the mask."""
    return SaliencyMap(np.clip(s_gt.data + boost * mask_image, 0.0, 1.0))


class AugmentationEngine:
    """Bundles the trained components the edit pipeline needs and turns
    step decisions into training samples."""

    def __init__(self, config: AugmentConfig, backbone: Backbone, llfr: LLFRHead,
                 stats: PopulationStats, gamma: GammaScale,
                 pivot: str = "gamma_projected", max_halvings: int = 6):
        self.config = config
        self.backbone = backbone
        self.llfr = llfr
        self.stats = stats
        self.gamma = gamma
        self.pivot = pivot
        self.max_halvings = max_halvings

    def sample_step(self, rng: np.random.Generator) -> StepDecision:
        return sample_step(rng, self.config)

    def augmented_batch(self, image: ImageTensor, s_gt: SaliencyMap, prompt,
                        decision: StepDecision) -> AugmentedSample:
        """Resolve a decision into (training input, target, loss selector)."""
        if decision.is_original:
            return AugmentedSample(image=image, target=s_gt, loss_kind="original",
                                   mask_image=None, edit=None, decision=decision)
        spec = EditSpec(kind=decision.kind, alpha=decision.alpha,
                        target_color=decision.color)
        result = run_edit_pipeline(image, prompt, s_gt, spec, self.backbone,
                                   self.llfr, self.stats, self.gamma,
                                   max_halvings=self.max_halvings, pivot=self.pivot)
        mask_img = np.clip(resize_bilinear(result.mask,
                                           (image.height, image.width)), 0.0, 1.0)
        target = boosted_target(s_gt, mask_img, self.config.boost)
        tokens = self.backbone.tokenize(prompt)
        i_star = result.selected_token_index
        if result.applied_alpha == IDENTITY_ALPHA[decision.kind]:
            # Constraint exhaustion fell back to the plain reconstruction.
            edited_tokens, injection = tokens, None
        elif decision.kind == "color_change":
            edited_tokens = token_insert_color(tokens, i_star, decision.color)
            injection = (result.mask * result.applied_alpha, i_star)
        else:
            edited_tokens = token_insert_for_photometric(tokens, i_star)
            injection = (np.asarray(result.mask), i_star)
        return AugmentedSample(image=result.edited_image, target=target,
                               loss_kind="edited", mask_image=mask_img,
                               edit=result, decision=decision,
                               edited_tokens=edited_tokens, injection=injection)
