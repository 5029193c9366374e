"""Exact photometric property oracles, patch sampling, and population statistics.

These functions are the ground truth the low-level readout heads are trained
against, and the reference the edit constrainer compares deviations to.
Grayscale is BT.601 luma throughout; contrasts are population standard
deviations (divide by N).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from .core import GRAY_WEIGHTS, ImageTensor, PatchRegion, PropertyVector
from .errors import DataError, ValidationError

RngLike = Union[int, np.random.Generator]


def _as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(int(rng))


def _patch(img: ImageTensor, region: PatchRegion) -> np.ndarray:
    region.check_within(img.height, img.width)
    return img.data[region.y0:region.y1, region.x0:region.x1, :]


def _gray(pixels: np.ndarray) -> np.ndarray:
    r, g, b = GRAY_WEIGHTS
    return r * pixels[..., 0] + g * pixels[..., 1] + b * pixels[..., 2]


def mean_rgb(img: ImageTensor, region: PatchRegion) -> Tuple[float, float, float]:
    """Arithmetic mean of each color channel over the patch."""
    patch = _patch(img, region)
    means = patch.reshape(-1, 3).mean(axis=0)
    return float(means[0]), float(means[1]), float(means[2])


def brightness(img: ImageTensor, region: PatchRegion) -> float:
    """Mean grayscale intensity over the patch."""
    return float(_gray(_patch(img, region)).mean())


def local_contrast(img: ImageTensor, region: PatchRegion) -> float:
    """Population standard deviation of grayscale intensity within the patch."""
    gray = _gray(_patch(img, region)).ravel()
    return float(np.sqrt(np.mean((gray - gray.mean()) ** 2)))


def global_contrast(img: ImageTensor) -> float:
    """Population standard deviation of grayscale over the whole image."""
    return local_contrast(img, PatchRegion.full(img.height, img.width))


def property_vector(img: ImageTensor, region: PatchRegion) -> PropertyVector:
    """Bundle of all six photometric properties for one image/patch pair."""
    mu_r, mu_g, mu_b = mean_rgb(img, region)
    return PropertyVector(
        mu_r=mu_r,
        mu_g=mu_g,
        mu_b=mu_b,
        mu_br=brightness(img, region),
        c_local=local_contrast(img, region),
        c_global=global_contrast(img),
    )


def sample_patch(height: int, width: int, min_frac: float, max_frac: float,
                 rng: RngLike) -> PatchRegion:
    """Uniformly random box with side lengths in [min_frac, max_frac] x image side.

    Integer side lengths are drawn uniformly from the admissible range per
    axis, then the box position uniformly among valid offsets. Deterministic
    given the rng/seed.
    """
    if not (0.0 < min_frac <= max_frac <= 1.0):
        raise ValidationError("bounds", f"need 0 < min_frac <= max_frac <= 1, "
                                        f"got [{min_frac}, {max_frac}]")
    gen = _as_rng(rng)

    def side(n: int) -> int:
        lo = max(1, int(np.ceil(min_frac * n)))
        hi = max(lo, int(np.floor(max_frac * n)))
        return int(gen.integers(lo, hi + 1))

    w = side(width)
    h = side(height)
    x0 = int(gen.integers(0, width - w + 1))
    y0 = int(gen.integers(0, height - h + 1))
    return PatchRegion(x0, y0, x0 + w, y0 + h)


@dataclass(frozen=True)
class PopulationStats:
    """Componentwise mean and population std of property vectors over a dataset."""

    mean: PropertyVector
    std: PropertyVector

    def __post_init__(self):
        if any(getattr(self.std, n) < 0 for n in
               ("mu_r", "mu_g", "mu_b", "mu_br", "c_local", "c_global")):
            raise ValidationError("range", "std components must be >= 0")


def population_stats(images: Iterable[ImageTensor], patches_per_image: int,
                     seed: RngLike, min_frac: float = 0.2,
                     max_frac: float = 0.5) -> PopulationStats:
    """Mean/std of PropertyVectors over seeded random patches of a dataset."""
    gen = _as_rng(seed)
    rows = []
    for img in images:
        for _ in range(patches_per_image):
            region = sample_patch(img.height, img.width, min_frac, max_frac, gen)
            rows.append(property_vector(img, region).as_array())
    if not rows:
        raise DataError("population_stats needs a nonempty dataset")
    mat = np.stack(rows, axis=0)
    mean = mat.mean(axis=0)
    std = np.sqrt(np.mean((mat - mean) ** 2, axis=0))
    return PopulationStats(mean=PropertyVector.from_array(mean),
                           std=PropertyVector.from_array(std))
