"""Shared value types, mask algebra and raster I/O.

Images are ``uint8`` arrays of shape ``(H, W, 3)`` and masks are ``bool``
arrays of shape ``(H, W)``. Coordinates are ``(x, y)`` with the origin at the
top-left pixel and ``y`` growing downwards.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

SIDES = ("left", "right", "top", "bottom")
BACKGROUNDS = ("gray", "white", "black", "forest", "sky", "original")

COCO_CATEGORIES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat",
    "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack",
    "umbrella", "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball",
    "kite", "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket",
    "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair",
    "couch", "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear", "hair drier",
    "toothbrush",
)


class DimensionError(ValueError):
    """Two rasters that must be co-dimensioned are not."""


class UndefinedRatioError(ValueError):
    """A ratio was requested over an empty mask."""


# ---------------------------------------------------------------------------
# raster validation
# ---------------------------------------------------------------------------

def as_image(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError("image must be at least 1x1")
    if a.dtype != np.uint8:
        a = np.clip(a, 0, 255).astype(np.uint8)
    return a


def as_mask(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise DimensionError(f"expected an (H, W) mask, got shape {a.shape}")
    return a.astype(bool, copy=False)


def mask_from_confidence(conf, threshold: float = 0.5) -> np.ndarray:
    """Binarize a soft segmenter output at the backend boundary."""
    return as_mask(np.asarray(conf, dtype=float) >= threshold)


def check_same_shape(*arrays) -> None:
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) > 1:
        raise DimensionError(f"raster dimensions differ: {sorted(shapes)}")


def empty_mask(height: int, width: int) -> np.ndarray:
    return np.zeros((height, width), dtype=bool)


def solid_image(height: int, width: int, color) -> np.ndarray:
    out = np.empty((height, width, 3), dtype=np.uint8)
    out[:] = np.asarray(color, dtype=np.uint8)
    return out


# ---------------------------------------------------------------------------
# mask algebra
# ---------------------------------------------------------------------------

def mask_union(a, b) -> np.ndarray:
    a, b = as_mask(a), as_mask(b)
    check_same_shape(a, b)
    return a | b


def mask_intersect(a, b) -> np.ndarray:
    a, b = as_mask(a), as_mask(b)
    check_same_shape(a, b)
    return a & b


def mask_complement(m) -> np.ndarray:
    return ~as_mask(m)


def mask_area(m) -> int:
    return int(np.count_nonzero(m))


def union_all(masks: Iterable[np.ndarray], shape: Tuple[int, int]) -> np.ndarray:
    out = empty_mask(*shape)
    for m in masks:
        out = mask_union(out, m)
    return out


_KERNEL_5X5 = np.ones((5, 5), dtype=bool)


def mask_dilate(m, iterations: int = 1, kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """Binary dilation with a square all-ones kernel (5x5 unless given).

    ``iterations=0`` returns the mask unchanged.
    """
    m = as_mask(m)
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0 or not m.any():
        return m.copy()
    kernel = _KERNEL_5X5 if kernel is None else np.asarray(kernel, dtype=bool)
    # scipy treats iterations=0 as "until stable", hence the early return above
    return ndimage.binary_dilation(m, structure=kernel, iterations=iterations)


def dilate_radius(m, radius: int) -> np.ndarray:
    """Dilate by ``radius`` pixels in Chebyshev distance (square neighbourhood)."""
    if radius <= 0:
        return as_mask(m).copy()
    return mask_dilate(m, 1, np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool))


def overlap_ratio(cluster, reference) -> float:
    """Fraction of ``cluster`` pixels that also lie in ``reference``."""
    cluster, reference = as_mask(cluster), as_mask(reference)
    check_same_shape(cluster, reference)
    n = mask_area(cluster)
    if n == 0:
        raise UndefinedRatioError("overlap ratio of an empty cluster")
    return mask_area(cluster & reference) / n


def iou(a, b) -> float:
    a, b = as_mask(a), as_mask(b)
    check_same_shape(a, b)
    union = mask_area(a | b)
    if union == 0:
        return 1.0
    return mask_area(a & b) / union


def touches_boundary(m, eps: int) -> frozenset:
    """Sides of the raster that have a true pixel within ``eps`` pixels.

    A pixel in column ``x`` is at distance ``x`` from the left side and
    ``W - 1 - x`` from the right side; it is within ``eps`` when that distance
    is strictly less than ``eps``.
    """
    m = as_mask(m)
    if eps <= 0 or not m.any():
        return frozenset()
    h, w = m.shape
    e = min(eps, max(h, w))
    sides = set()
    if m[:, :e].any():
        sides.add("left")
    if m[:, max(w - e, 0):].any():
        sides.add("right")
    if m[:e, :].any():
        sides.add("top")
    if m[max(h - e, 0):, :].any():
        sides.add("bottom")
    return frozenset(sides)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate bbox {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def expand(self, left: int, top: int, right: int, bottom: int) -> "BBox":
        return BBox(self.x0 - left, self.y0 - top, self.x1 + right, self.y1 + bottom)

    def clamp(self, width: int, height: int) -> "BBox":
        return BBox(max(self.x0, 0), max(self.y0, 0), min(self.x1, width), min(self.y1, height))

    def shift(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def union(self, other: "BBox") -> "BBox":
        return BBox(min(self.x0, other.x0), min(self.y0, other.y0),
                    max(self.x1, other.x1), max(self.y1, other.y1))

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def to_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


def bbox_of_mask(m) -> BBox:
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    if len(xs) == 0:
        raise ValueError("bbox of an empty mask")
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# ---------------------------------------------------------------------------
# query + configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuerySpec:
    category: str
    seed_point: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if not self.category or not self.category.strip():
            raise ValueError("query category must be non-empty")


@dataclass
class PipelineConfig:
    total_steps: int = 50
    composite_step: int = 20
    decoder_layer: int = 3
    overlap_threshold: float = 0.20
    pad_alpha: int = 60
    pad_beta: int = 60
    boundary_eps: int = 10
    curation_gamma: int = 2
    curation_delta: int = 4
    curation_epsilon: float = 1.2
    clean_background: str = "gray"
    cluster_count: int = 6
    max_iterations: int = 5
    rng_seed: int = 0
    neighbor_radius: int = 5
    occluder_dilation: int = 2
    corner_frac: float = 0.15
    vocabulary: Tuple[str, ...] = COCO_CATEGORIES

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        if not 0 < self.composite_step < self.total_steps:
            raise ValueError("composite_step must satisfy 0 < k < total_steps")
        if not 1 <= self.decoder_layer <= 4:
            raise ValueError("decoder_layer must be in 1..4")
        if self.curation_epsilon <= 1:
            raise ValueError("curation_epsilon must exceed 1")
        if self.clean_background not in BACKGROUNDS:
            raise ValueError(f"unknown clean background {self.clean_background!r}")
        positive = ("overlap_threshold", "pad_alpha", "pad_beta", "boundary_eps",
                    "curation_gamma", "curation_delta", "cluster_count", "max_iterations")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.corner_frac < 0.5:
            raise ValueError("corner_frac must lie in (0, 0.5)")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vocabulary"] = list(self.vocabulary)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def save_image(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_image(image), mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L")) >= 128


def save_mask(path, mask) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_mask(mask).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
