"""Shared domain types and their invariants.

Every type freezes its array payload at construction (the arrays are copied
and marked read-only), re-validates on demand via :func:`validate`, and can
therefore be shared freely across threads. Arrays are float64, channels-last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

EDIT_KINDS = ("contrast_increase", "brightness_increase", "color_change")

# ITU-R BT.601 luma weights used for every grayscale conversion in the package.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _frozen_array(data, dtype=np.float64) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True, order="C")
    arr.setflags(write=False)
    return arr


def _require(cond: bool, invariant: str, message: str) -> None:
    if not cond:
        raise ValidationError(invariant, message)


@dataclass(frozen=True)
class ImageTensor:
    """H x W x 3 image, values in [0, 1], channel order R, G, B."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_array(self.data))
        self.check()

    def check(self) -> None:
        _require(self.data.ndim == 3 and self.data.shape[2] == 3,
                 "shape", f"expected (H, W, 3), got {self.data.shape}")
        _require(self.data.shape[0] > 0 and self.data.shape[1] > 0,
                 "shape", "spatial dims must be positive")
        _require(bool(np.isfinite(self.data).all()), "finite", "image contains NaN/Inf")
        _require(bool((self.data >= 0.0).all() and (self.data <= 1.0).all()),
                 "range", "image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def grayscale(self) -> np.ndarray:
        """BT.601 luma, same spatial shape, float64."""
        r, g, b = GRAY_WEIGHTS
        return r * self.data[:, :, 0] + g * self.data[:, :, 1] + b * self.data[:, :, 2]


@dataclass(frozen=True)
class PatchRegion:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        self.check()

    def check(self) -> None:
        _require(0 <= self.x0 < self.x1, "bounds", f"need 0 <= x0 < x1, got [{self.x0}, {self.x1})")
        _require(0 <= self.y0 < self.y1, "bounds", f"need 0 <= y0 < y1, got [{self.y0}, {self.y1})")

    def check_within(self, height: int, width: int) -> None:
        _require(self.x1 <= width and self.y1 <= height, "bounds",
                 f"region {self} exceeds image dims {height}x{width}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @classmethod
    def full(cls, height: int, width: int) -> "PatchRegion":
        return cls(0, 0, width, height)


@dataclass(frozen=True)
class LatentTensor:
    """H_l x W_l x C spatial latent of finite reals (C defaults to 4 upstream)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_array(self.data))
        self.check()

    def check(self) -> None:
        _require(self.data.ndim == 3, "shape", f"expected (H, W, C), got {self.data.shape}")
        _require(all(s > 0 for s in self.data.shape), "shape", "all dims must be positive")
        _require(bool(np.isfinite(self.data).all()), "finite", "latent contains NaN/Inf")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SaliencyMap:
    """H x W map of nonnegative values with max <= 1."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_array(self.data))
        self.check()

    def check(self) -> None:
        _require(self.data.ndim == 2, "shape", f"expected (H, W), got {self.data.shape}")
        _require(all(s > 0 for s in self.data.shape), "shape", "spatial dims must be positive")
        _require(bool(np.isfinite(self.data).all()), "finite", "saliency contains NaN/Inf")
        _require(bool((self.data >= 0.0).all()), "range", "saliency values must be >= 0")
        _require(bool((self.data <= 1.0).all()), "range", "saliency values must be <= 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FixationSet:
    """Integer (x, y) gaze points inside an image of known dims.

    ``observer_ids`` is optional; when given it carries one id per point.
    """

    points: np.ndarray
    height: int
    width: int
    observer_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points, dtype=np.int64))
        if self.observer_ids is not None:
            object.__setattr__(self, "observer_ids",
                               _frozen_array(self.observer_ids, dtype=np.int64))
        self.check()

    def check(self) -> None:
        _require(self.points.ndim == 2 and self.points.shape[1] == 2,
                 "shape", f"expected (N, 2) points, got {self.points.shape}")
        _require(self.height > 0 and self.width > 0, "bounds", "image dims must be positive")
        if self.points.shape[0]:
            xs, ys = self.points[:, 0], self.points[:, 1]
            _require(bool((xs >= 0).all() and (xs < self.width).all()
                          and (ys >= 0).all() and (ys < self.height).all()),
                     "bounds", "fixation point outside image bounds")
        if self.observer_ids is not None:
            _require(self.observer_ids.shape == (self.points.shape[0],),
                     "shape", "observer_ids length must match points")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class FeatureBundle:
    """Paired low-level and high-level feature maps on a shared spatial grid."""

    low_level: np.ndarray
    high_level: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low_level", _frozen_array(self.low_level))
        object.__setattr__(self, "high_level", _frozen_array(self.high_level))
        self.check()

    def check(self) -> None:
        _require(self.low_level.ndim == 3 and self.high_level.ndim == 3,
                 "shape", "feature maps must be (H, W, C)")
        _require(self.low_level.shape[:2] == self.high_level.shape[:2],
                 "shape", "low/high feature maps must share spatial dims")
        _require(bool(np.isfinite(self.low_level).all() and np.isfinite(self.high_level).all()),
                 "finite", "feature bundle contains NaN/Inf")

    @property
    def height(self) -> int:
        return self.low_level.shape[0]

    @property
    def width(self) -> int:
        return self.low_level.shape[1]


PROPERTY_NAMES = ("mu_r", "mu_g", "mu_b", "mu_br", "c_local", "c_global")


@dataclass(frozen=True)
class PropertyVector:
    """Photometric summary of an image patch: channel means, brightness, contrasts."""

    mu_r: float
    mu_g: float
    mu_b: float
    mu_br: float
    c_local: float
    c_global: float

    def __post_init__(self):
        for name in PROPERTY_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
        self.check()

    def check(self) -> None:
        vals = self.as_array()
        _require(bool(np.isfinite(vals).all()), "finite", "property vector contains NaN/Inf")
        for name in ("mu_r", "mu_g", "mu_b", "mu_br"):
            v = getattr(self, name)
            _require(0.0 <= v <= 1.0, "range", f"{name}={v} outside [0, 1]")
        _require(self.c_local >= 0.0 and self.c_global >= 0.0,
                 "range", "contrasts must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PROPERTY_NAMES], dtype=np.float64)

    @staticmethod
    def from_array(vals) -> "PropertyVector":
        vals = np.asarray(vals, dtype=np.float64)
        _require(vals.shape == (6,), "shape", f"expected 6 entries, got {vals.shape}")
        return PropertyVector(*vals)


@dataclass(frozen=True)
class AttentionStack:
    """One nonnegative spatial map per prompt token."""

    maps: np.ndarray
    token_strings: tuple

    def __post_init__(self):
        object.__setattr__(self, "maps", _frozen_array(self.maps))
        object.__setattr__(self, "token_strings", tuple(self.token_strings))
        self.check()

    def check(self) -> None:
        _require(self.maps.ndim == 3, "shape", f"expected (T, H, W), got {self.maps.shape}")
        _require(self.maps.shape[0] >= 1, "length", "need at least one token map")
        _require(len(self.token_strings) == self.maps.shape[0], "length",
                 f"{self.maps.shape[0]} maps but {len(self.token_strings)} tokens")
        _require(bool(np.isfinite(self.maps).all()), "finite", "attention contains NaN/Inf")
        _require(bool((self.maps >= 0.0).all()), "range", "attention values must be >= 0")

    def __len__(self) -> int:
        return self.maps.shape[0]

    @property
    def height(self) -> int:
        return self.maps.shape[1]

    @property
    def width(self) -> int:
        return self.maps.shape[2]


@dataclass(frozen=True)
class EditSpec:
    """A requested edit: kind, strength, optional color word, optional resolved mask.

    The mask is resolved by the edit pipeline when absent. Contrast strengths
    below 1 are rejected: this package only generates saliency-increasing
    edits, and a contrast alpha in (0, 1) would attenuate the region.
    """

    kind: str
    alpha: float
    target_color: Optional[str] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.mask is not None:
            object.__setattr__(self, "mask", _frozen_array(self.mask))
        self.check()

    def check(self) -> None:
        _require(self.kind in EDIT_KINDS, "kind",
                 f"unknown edit kind {self.kind!r}; expected one of {EDIT_KINDS}")
        _require(np.isfinite(self.alpha) and self.alpha > 0.0,
                 "alpha", f"alpha must be finite and > 0, got {self.alpha}")
        if self.kind == "contrast_increase":
            _require(self.alpha >= 1.0, "alpha",
                     f"contrast alpha must be >= 1 (saliency-increasing), got {self.alpha}")
        if self.kind == "color_change":
            _require(self.target_color is not None, "target_color",
                     "color_change requires a target color word")
        else:
            _require(self.target_color is None, "target_color",
                     f"target_color is only valid for color_change, got {self.target_color!r}")
        if self.mask is not None:
            _require(self.mask.ndim == 2, "mask", f"mask must be 2D, got {self.mask.shape}")
            _require(bool(np.isfinite(self.mask).all()
                          and (self.mask >= 0.0).all() and (self.mask <= 1.0).all()),
                     "mask", "mask values must lie in [0, 1]")

    def check_mask_dims(self, latent: LatentTensor) -> None:
        _require(self.mask is not None, "mask", "mask has not been resolved")
        _require(self.mask.shape == (latent.height, latent.width), "mask",
                 f"mask {self.mask.shape} does not match latent "
                 f"{(latent.height, latent.width)}")


_CHECKED_TYPES = (ImageTensor, PatchRegion, LatentTensor, SaliencyMap, FixationSet,
                  FeatureBundle, PropertyVector, AttentionStack, EditSpec)


def validate(t) -> None:
    """Re-run the invariant checks of any domain type; raises ValidationError
    naming the first violated invariant."""
    if not isinstance(t, _CHECKED_TYPES):
        raise ValidationError("type", f"cannot validate object of type {type(t).__name__}")
    t.check()


def resize_bilinear(arr: np.ndarray, out_hw: Sequence[int]) -> np.ndarray:
    """Bilinear resample of an (H, W) or (H, W, C) float array, float64 out."""
    import torch
    import torch.nn.functional as F

    a = np.asarray(arr, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    t = torch.from_numpy(np.array(a.transpose(2, 0, 1), dtype=np.float64))[None]
    out = F.interpolate(t, size=(int(out_hw[0]), int(out_hw[1])),
                        mode="bilinear", align_corners=False)
    res = out[0].numpy().transpose(1, 2, 0)
    return res[:, :, 0] if squeeze else res
