"""Conditional padding, square zoom-crop and the inverse mapping back onto the source.

All crops are axis-aligned and unresampled, so every mapping here is an
integer translation and round trips are pixel exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import BBox, as_image, as_mask, bbox_of_mask, check_same_shape

PAD_VALUE = 255


@dataclass(frozen=True)
class FrameTransform:
    original_size: Tuple[int, int]  # (width, height) of the unpadded input
    pad_left: int = 0
    pad_top: int = 0
    pad_right: int = 0
    pad_bottom: int = 0
    crop: Optional[BBox] = None     # in padded coordinates

    @property
    def padded_size(self) -> Tuple[int, int]:
        w, h = self.original_size
        return w + self.pad_left + self.pad_right, h + self.pad_top + self.pad_bottom

    @property
    def framed_size(self) -> Tuple[int, int]:
        if self.crop is None:
            return self.padded_size
        return self.crop.width, self.crop.height

    @property
    def padded_sides(self) -> frozenset:
        pads = {"left": self.pad_left, "top": self.pad_top,
                "right": self.pad_right, "bottom": self.pad_bottom}
        return frozenset(k for k, v in pads.items() if v > 0)

    @property
    def origin(self) -> Tuple[int, int]:
        """Framed raster's top-left pixel in original coordinates."""
        cx, cy = (self.crop.x0, self.crop.y0) if self.crop else (0, 0)
        return cx - self.pad_left, cy - self.pad_top

    def to_framed(self, x: int, y: int) -> Tuple[int, int]:
        ox, oy = self.origin
        return x - ox, y - oy

    def to_original(self, x: int, y: int) -> Tuple[int, int]:
        ox, oy = self.origin
        return x + ox, y + oy

    def to_dict(self) -> dict:
        return {"original_size": list(self.original_size),
                "pad": {"left": self.pad_left, "top": self.pad_top,
                        "right": self.pad_right, "bottom": self.pad_bottom},
                "crop": self.crop.to_list() if self.crop else None,
                "framed_size": list(self.framed_size),
                "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameTransform":
        pad = d["pad"]
        crop = BBox(*d["crop"]) if d.get("crop") else None
        return cls(tuple(d["original_size"]), pad["left"], pad["top"], pad["right"],
                   pad["bottom"], crop)


def conditional_pad(image, occ_mask, modal, sides, amount: int):
    """Pad with white on each side in ``sides`` and schedule the pad for inpainting.

    Returns ``(image, occ_mask, modal, transform)``; ``modal`` is padded with
    False, ``occ_mask`` with True.
    """
    image, occ_mask, modal = as_image(image), as_mask(occ_mask), as_mask(modal)
    check_same_shape(image, occ_mask, modal)
    h, w = modal.shape
    pl, pt, pr, pb = (amount if s in sides else 0 for s in ("left", "top", "right", "bottom"))
    tf = FrameTransform((w, h), pl, pt, pr, pb)
    if not (pl or pt or pr or pb):
        return image.copy(), occ_mask.copy(), modal.copy(), tf
    widths = ((pt, pb), (pl, pr))
    image = np.pad(image, widths + ((0, 0),), constant_values=PAD_VALUE)
    occ_mask = np.pad(occ_mask, widths, constant_values=True)
    modal = np.pad(modal, widths, constant_values=False)
    return image, occ_mask, modal, tf


def square_window(modal, alpha: int, beta: int, touching: bool) -> BBox:
    """Square window around ``modal`` before clamping (may exceed the raster)."""
    box = bbox_of_mask(modal)
    m = alpha + (beta if touching else 0)
    box = box.expand(m, m, m, m)
    d = box.width - box.height
    if d > 0:
        box = box.expand(0, d // 2, 0, d - d // 2)
    elif d < 0:
        box = box.expand(-d // 2, 0, -d - (-d // 2), 0)
    return box


def square_crop(image, occ_mask, modal, alpha: int, beta: int, transform: FrameTransform):
    """Cut a square window around the query object out of the padded raster.

    The object's tight box grows by ``alpha`` per side, by ``beta`` more when
    the object touched the boundary, then along its shorter axis until square.
    The window is clamped to the raster, which may leave it non-square.
    """
    image, occ_mask, modal = as_image(image), as_mask(occ_mask), as_mask(modal)
    check_same_shape(image, occ_mask, modal)
    if not modal.any():
        raise ValueError("cannot frame an empty modal mask")
    h, w = modal.shape
    box = square_window(modal, alpha, beta, bool(transform.padded_sides)).clamp(w, h)
    ys, xs = box.slices
    tf = FrameTransform(transform.original_size, transform.pad_left, transform.pad_top,
                        transform.pad_right, transform.pad_bottom, box)
    return image[ys, xs].copy(), occ_mask[ys, xs].copy(), modal[ys, xs].copy(), tf


def paste_object(base, obj_image, obj_mask, obj_origin, fill=None):
    """Write ``obj_image[obj_mask]`` onto ``base`` at ``obj_origin``.

    The canvas grows to cover any object pixel outside ``base``. Grown area
    takes ``fill`` (an image aligned with ``obj_image``) where it covers,
    white elsewhere. Returns ``(canvas, canvas_origin)`` in base coordinates.
    """
    base, obj_image, obj_mask = as_image(base), as_image(obj_image), as_mask(obj_mask)
    check_same_shape(obj_image, obj_mask)
    H, W = base.shape[:2]
    ox, oy = obj_origin
    extent = BBox(0, 0, W, H)
    if obj_mask.any():
        extent = extent.union(bbox_of_mask(obj_mask).shift(ox, oy))
    cw, ch = extent.width, extent.height
    canvas = np.full((ch, cw, 3), PAD_VALUE, dtype=np.uint8)
    if fill is not None:
        _blit(canvas, as_image(fill), ox - extent.x0, oy - extent.y0)
    canvas[-extent.y0:-extent.y0 + H, -extent.x0:-extent.x0 + W] = base
    _blit(canvas, obj_image, ox - extent.x0, oy - extent.y0, obj_mask)
    return canvas, (extent.x0, extent.y0)


def _blit(dst, src, x, y, mask=None):
    """Copy ``src`` into ``dst`` at ``(x, y)``, clipped, optionally masked."""
    h, w = src.shape[:2]
    H, W = dst.shape[:2]
    x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
    if x0 >= x1 or y0 >= y1:
        return
    s = src[y0 - y:y1 - y, x0 - x:x1 - x]
    if mask is None:
        dst[y0:y1, x0:x1] = s
    else:
        m = mask[y0 - y:y1 - y, x0 - x:x1 - x]
        dst[y0:y1, x0:x1][m] = s[m]


def uncrop_overlay(completed, amodal, transform: FrameTransform, original):
    """Overlay the completed object (pixels under ``amodal``) on ``original``.

    Non-object pixels of ``original`` are kept. If the object grew into the
    padding, the result is larger than ``original``; the grown margin shows
    the completed crop's pixels.
    """
    canvas, _ = paste_object(original, completed, amodal, transform.origin, fill=completed)
    return canvas


def overlay_origin(amodal, transform: FrameTransform) -> Tuple[int, int]:
    """Top-left of :func:`uncrop_overlay`'s output in original coordinates."""
    amodal = as_mask(amodal)
    if not amodal.any():
        return 0, 0
    b = bbox_of_mask(amodal).shift(*transform.origin)
    return min(b.x0, 0), min(b.y0, 0)


def merge_into_canvas(canvas, canvas_modal, completed, completed_mask, transform: FrameTransform):
    """Paste a completed crop back into the working canvas for the next iteration.

    The new canvas spans the old one plus the crop window (which may reach
    into padding). Returns ``(image, modal, shift)`` where ``shift`` is the new
    canvas's top-left in old-canvas coordinates.
    """
    canvas, canvas_modal = as_image(canvas), as_mask(canvas_modal)
    completed, completed_mask = as_image(completed), as_mask(completed_mask)
    H, W = canvas_modal.shape
    ox, oy = transform.origin
    ch, cw = completed_mask.shape
    extent = BBox(0, 0, W, H).union(BBox(ox, oy, ox + cw, oy + ch))
    img = np.full((extent.height, extent.width, 3), PAD_VALUE, dtype=np.uint8)
    modal = np.zeros((extent.height, extent.width), dtype=bool)
    _blit(img, canvas, -extent.x0, -extent.y0)
    _blit(modal, canvas_modal, -extent.x0, -extent.y0)
    _blit(img, completed, ox - extent.x0, oy - extent.y0)
    region = np.zeros_like(modal)
    _blit(region, completed_mask, ox - extent.x0, oy - extent.y0)
    modal |= region
    return img, modal, (extent.x0, extent.y0)
