"""Dataset ingestion and the synthetic desk-scale dataset generator.

Dataset directory layout (one directory per split):

    root/<split>/manifest.json
    root/<split>/images/im_00000.png        8-bit RGB
    root/<split>/saliency/im_00000.png      16-bit grayscale (or .aug tensors)
    root/<split>/fixations/im_00000.json    JSON list of [x, y] pixel pairs

``manifest.json`` holds ``{"split": ..., "entries": [...]}`` where each entry
carries relative paths, a caption, and COCO-style boxes
``{"category_id": int, "bbox": [x, y, w, h]}``.

Synthetic scenes are colored shapes on a gray background. Ground-truth
saliency is a Gaussian mixture centered on the objects with weights
proportional to intrinsic salience times grayscale contrast against the
background, so photometric edits have a known effect direction. Pixel values
are quantized exactly as stored on disk, making generate-then-load a strict
round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import (GRAY_WEIGHTS, FixationSet, ImageTensor, PatchRegion,
                   SaliencyMap)
from .errors import DataError, ValidationError
from .readouts import ClassLabel
from .tensorfile import read_tensor, write_tensor
from .vocab import COLOR_NAMES, COLOR_RGB, SHAPE_NAMES

SHAPE_CLASS_IDS = {name: i for i, name in enumerate(SHAPE_NAMES)}
NUM_SYNTHETIC_CLASSES = len(SHAPE_NAMES)


# -- image / saliency file I/O ------------------------------------------------

def save_image_png(img: ImageTensor, path) -> None:
    arr = np.round(img.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path) -> ImageTensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImageTensor(arr / 255.0)


def save_saliency_png16(s: SaliencyMap, path) -> None:
    arr = np.round(s.data * 65535.0).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def load_saliency(path) -> SaliencyMap:
    path = Path(path)
    if path.suffix == ".aug":
        return SaliencyMap(read_tensor(path))
    with Image.open(path) as im:
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            raise DataError(f"unsupported saliency image mode {im.mode!r} in {path}")
    return SaliencyMap(np.clip(arr, 0.0, 1.0))


def load_fixations(path, height: int, width: int) -> FixationSet:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise DataError(f"fixation file {path} must hold a JSON list of [x, y] pairs")
    points = []
    for i, item in enumerate(raw):
        if (not isinstance(item, (list, tuple)) or len(item) != 2
                or not all(isinstance(v, (int, float)) for v in item)):
            raise DataError(f"bad coordinate pair at {path}[{i}]: {item!r}")
        x, y = int(item[0]), int(item[1])
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(f"fixation out of bounds at {path}[{i}]: ({x}, {y}) "
                            f"for {height}x{width} image")
        points.append((x, y))
    return FixationSet(np.array(points, dtype=np.int64).reshape(-1, 2),
                       height=height, width=width)


# -- synthetic scenes ---------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: int          # half-extent in pixels
    cx: int
    cy: int
    salience: float    # intrinsic salience weight

    def __post_init__(self):
        if self.shape not in SHAPE_NAMES:
            raise ValidationError("shape", f"unknown shape {self.shape!r}")
        if self.color not in COLOR_RGB:
            raise ValidationError("color", f"unknown color {self.color!r}")
        if self.salience < 0:
            raise ValidationError("salience", "salience weight must be >= 0")
        if self.size < 1:
            raise ValidationError("size", "object size must be >= 1")

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        return (self.cx - self.size, self.cy - self.size,
                self.cx + self.size + 1, self.cy + self.size + 1)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int
    width: int
    background: float
    objects: Tuple[SceneObject, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not 0.0 <= self.background <= 1.0:
            raise ValidationError("background", "background gray must lie in [0, 1]")
        for obj in self.objects:
            x0, y0, x1, y1 = obj.bbox
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise ValidationError("bounds", f"object {obj} exceeds the canvas")


def _shape_mask(obj: SceneObject, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx, dy, r = xs - obj.cx, ys - obj.cy, obj.size
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # Upward triangle: apex at (cx, cy - r), base at cy + r.
    halfwidth = (ys - (obj.cy - r)) / 2.0
    return (np.abs(dx) <= halfwidth) & (dy >= -r) & (dy <= r)


def scene_mixture_weights(spec: SyntheticSceneSpec) -> np.ndarray:
    """Unnormalized mixture weight per object: intrinsic salience times
    grayscale contrast against the background (plus a small floor)."""
    r, g, b = GRAY_WEIGHTS
    weights = []
    for obj in spec.objects:
        cr, cg, cb = COLOR_RGB[obj.color]
        gray = r * cr + g * cg + b * cb
        weights.append(obj.salience * (abs(gray - spec.background) + 0.05))
    return np.array(weights, dtype=np.float64)


def render_scene(spec: SyntheticSceneSpec):
    """Rasterize a scene spec into quantized (image, saliency, caption, boxes).

    Values are quantized to the 8-bit (image) and 16-bit (saliency) grids so
    in-memory arrays equal what a PNG round trip yields.
    """
    canvas = np.full((spec.height, spec.width, 3), spec.background, dtype=np.float64)
    for obj in spec.objects:
        canvas[_shape_mask(obj, spec.height, spec.width)] = COLOR_RGB[obj.color]
    img = ImageTensor(np.round(canvas * 255.0) / 255.0)

    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    mix = np.zeros((spec.height, spec.width), dtype=np.float64)
    for obj, w in zip(spec.objects, scene_mixture_weights(spec)):
        sigma = max(1.0, 0.6 * obj.size)
        d2 = (xs - obj.cx) ** 2 + (ys - obj.cy) ** 2
        mix += w * np.exp(-d2 / (2.0 * sigma * sigma))
    mix = mix / mix.max()
    saliency = SaliencyMap(np.round(mix * 65535.0) / 65535.0)

    caption = " and ".join(f"a {o.color} {o.shape}" for o in spec.objects)
    boxes = []
    for obj in spec.objects:
        x0, y0, x1, y1 = obj.bbox
        boxes.append((ClassLabel(SHAPE_CLASS_IDS[obj.shape], NUM_SYNTHETIC_CLASSES),
                      PatchRegion(max(x0, 0), max(y0, 0),
                                  min(x1, spec.width), min(y1, spec.height))))
    return img, saliency, caption, tuple(boxes)


def sample_scene(rng: np.random.Generator, height: int = 32, width: int = 32,
                 max_objects: int = 3) -> SyntheticSceneSpec:
    background = float(rng.uniform(0.25, 0.75))
    n = int(rng.integers(1, max_objects + 1))
    colors = rng.choice(len(COLOR_NAMES), size=n, replace=False)
    objects = []
    for k in range(n):
        size = int(rng.integers(4, max(5, min(height, width) // 4) + 1))
        placed = None
        for _ in range(20):
            cx = int(rng.integers(size, width - size))
            cy = int(rng.integers(size, height - size))
            if all((cx - o.cx) ** 2 + (cy - o.cy) ** 2 >= (0.8 * (size + o.size)) ** 2
                   for o in objects):
                placed = (cx, cy)
                break
        if placed is None:
            placed = (cx, cy)
        objects.append(SceneObject(
            shape=SHAPE_NAMES[int(rng.integers(0, len(SHAPE_NAMES)))],
            color=COLOR_NAMES[int(colors[k])],
            size=size, cx=placed[0], cy=placed[1],
            salience=float(rng.uniform(0.5, 1.5))))
    return SyntheticSceneSpec(height=height, width=width,
                              background=background, objects=objects)


def sample_fixations_from(saliency: SaliencyMap, n_points: int,
                          rng: np.random.Generator) -> FixationSet:
    probs = saliency.data.reshape(-1)
    probs = probs / probs.sum()
    flat = rng.choice(probs.size, size=n_points, replace=True, p=probs)
    ys, xs = np.divmod(flat, saliency.width)
    return FixationSet(np.stack([xs, ys], axis=1).astype(np.int64),
                       height=saliency.height, width=saliency.width)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    caption: str
    saliency: Optional[str] = None
    fixations: Optional[str] = None
    boxes: Tuple[Tuple[int, Tuple[int, int, int, int]], ...] = ()  # (category, xywh)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    entries: Tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class LoadedExample:
    image: ImageTensor
    caption: str
    saliency: Optional[SaliencyMap] = None
    fixations: Optional[FixationSet] = None
    boxes: Tuple[Tuple[ClassLabel, PatchRegion], ...] = ()


def generate_synthetic(root, n_images: int, seed: int, split: str = "train",
                       dims: Tuple[int, int] = (32, 32), n_fixations: int = 20,
                       max_objects: int = 3) -> DatasetManifest:
    """Render a synthetic split to disk; bit-identical for identical seeds."""
    if n_images < 1:
        raise ValidationError("n_images", "need at least one image")
    rng = np.random.default_rng(seed)
    base = Path(root) / split
    for sub in ("images", "saliency", "fixations"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_images):
        spec = sample_scene(rng, height=dims[0], width=dims[1], max_objects=max_objects)
        img, sal, caption, boxes = render_scene(spec)
        fix = sample_fixations_from(sal, n_fixations, rng)
        name = f"im_{i:05d}"
        save_image_png(img, base / "images" / f"{name}.png")
        save_saliency_png16(sal, base / "saliency" / f"{name}.png")
        with open(base / "fixations" / f"{name}.json", "w") as fh:
            json.dump([[int(x), int(y)] for x, y in fix.points], fh)
        entries.append({
            "image": f"images/{name}.png",
            "saliency": f"saliency/{name}.png",
            "fixations": f"fixations/{name}.json",
            "caption": caption,
            "boxes": [{"category_id": lbl.id,
                       "bbox": [box.x0, box.y0, box.width, box.height]}
                      for lbl, box in boxes],
        })
    with open(base / "manifest.json", "w") as fh:
        json.dump({"split": split, "entries": entries}, fh, indent=1, sort_keys=True)
    return load_dataset(root, split)


def load_dataset(root, split: str) -> DatasetManifest:
    """Parse and validate a split manifest; every referenced path must exist."""
    base = Path(root) / split
    manifest_path = base / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"empty dataset: no manifest at {manifest_path}")
    with open(manifest_path) as fh:
        raw = json.load(fh)
    raw_entries = raw.get("entries", [])
    if not raw_entries:
        raise DataError(f"empty dataset: manifest {manifest_path} lists no entries")
    entries = []
    for i, e in enumerate(raw_entries):
        if "image" not in e:
            raise DataError(f"manifest entry {i} has no image path")
        caption = e.get("caption", "").strip()
        if not caption:
            raise DataError(f"manifest entry {i} ({e['image']}) has no caption")
        for key in ("image", "saliency", "fixations"):
            rel = e.get(key)
            if rel is not None and not (base / rel).exists():
                raise DataError(f"manifest entry {i}: missing file {base / rel}")
        boxes = tuple((int(b["category_id"]), tuple(int(v) for v in b["bbox"]))
                      for b in e.get("boxes", []))
        entries.append(ManifestEntry(image=e["image"], caption=caption,
                                     saliency=e.get("saliency"),
                                     fixations=e.get("fixations"), boxes=boxes))
    return DatasetManifest(root=base, split=raw.get("split", split),
                           entries=tuple(entries))


def load_examples(manifest: DatasetManifest,
                  num_classes: int = NUM_SYNTHETIC_CLASSES) -> List[LoadedExample]:
    """Materialize every entry of a manifest into validated domain types."""
    out = []
    for entry in manifest.entries:
        img = load_image_png(manifest.root / entry.image)
        sal = (load_saliency(manifest.root / entry.saliency)
               if entry.saliency else None)
        fix = (load_fixations(manifest.root / entry.fixations, img.height, img.width)
               if entry.fixations else None)
        boxes = []
        for cat, (x, y, w, h) in entry.boxes:
            region = PatchRegion(x, y, x + w, y + h)
            region.check_within(img.height, img.width)
            boxes.append((ClassLabel(cat, num_classes), region))
        out.append(LoadedExample(image=img, caption=entry.caption, saliency=sal,
                                 fixations=fix, boxes=tuple(boxes)))
    return out
