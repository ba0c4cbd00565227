"""Deterministic scripted backends.

A :class:`ScriptedScene` is a stack of opaque layers over a background, laid
out on a world canvas that is larger than the photo (the *viewport*), so
objects may continue past the photo's edge. :class:`MockBackend` implements
every model interface against such a scene:

* diffusion is noise-free bookkeeping: a state stores the clean raster and
  its timestep. Content is decided when a chain starts (``s == 0``): masked
  pixels are replaced by a render of the revealed layers; later segments of
  the chain keep the state's pixels.
* segmentation, depth ordering and decoder features all work from per-pixel
  provenance, found by matching each pixel against the layer appearances at
  its world position.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core import (BBox, as_image, as_mask, check_same_shape, load_image, load_mask,
                    save_image, save_mask)
from .base import (BackendContractError, Backends, DepthOrderer, DepthVerdict,
                   DiffusionBackend, Instance, NoisyState, Remover, Segmenter)

MOCK_VERSION = "mock-1"

# colours the pipeline itself paints (pads, backdrops); layers must avoid them
RESERVED_COLORS = {(255, 255, 255), (128, 128, 128), (0, 0, 0)}


@dataclass
class Layer:
    name: str
    category: str
    mask: np.ndarray        # world coordinates
    appearance: np.ndarray  # world coordinates
    z: int
    score: float = 1.0


@dataclass
class ScriptedScene:
    background: np.ndarray
    layers: List[Layer]
    viewport: BBox
    reveal_script: List[Optional[List[str]]] = field(default_factory=list)
    depth_unknown: List[Tuple[str, str]] = field(default_factory=list)
    outside_color: Tuple[int, int, int] = (255, 255, 255)

    def __post_init__(self):
        self.background = as_image(self.background)
        h, w = self.background.shape[:2]
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for layer in self.layers:
            layer.mask = as_mask(layer.mask)
            layer.appearance = as_image(layer.appearance)
            check_same_shape(self.background, layer.mask, layer.appearance)
        if self.viewport.clamp(w, h) != self.viewport:
            raise ValueError("viewport must lie inside the world canvas")
        for entry in self.reveal_script:
            for n in entry or ():
                if n not in names:
                    raise ValueError(f"reveal script names unknown layer {n!r}")

    # -- geometry ----------------------------------------------------------

    @property
    def world_shape(self) -> Tuple[int, int]:
        return self.background.shape[:2]

    @property
    def photo_shape(self) -> Tuple[int, int]:
        return self.viewport.height, self.viewport.width

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def _window(self, arr: np.ndarray, origin, shape, fill) -> np.ndarray:
        """Cut an ``shape`` window whose top-left sits at photo coords ``origin``."""
        h, w = shape
        wx = origin[0] + self.viewport.x0
        wy = origin[1] + self.viewport.y0
        H, W = arr.shape[:2]
        out = np.empty((h, w) + arr.shape[2:], dtype=arr.dtype)
        out[...] = fill
        sx0, sy0 = max(wx, 0), max(wy, 0)
        sx1, sy1 = min(wx + w, W), min(wy + h, H)
        if sx0 < sx1 and sy0 < sy1:
            out[sy0 - wy:sy1 - wy, sx0 - wx:sx1 - wx] = arr[sy0:sy1, sx0:sx1]
        return out

    def _sorted(self, names=None) -> List[Tuple[int, Layer]]:
        items = [(i, l) for i, l in enumerate(self.layers) if names is None or l.name in names]
        return sorted(items, key=lambda t: (t[1].z, t[0]))

    def render_world(self, names=None) -> Tuple[np.ndarray, np.ndarray]:
        """Composite ``names`` (default all) back-to-front; returns (image, labels)."""
        img = self.background.copy()
        labels = np.full(self.world_shape, len(self.layers), dtype=np.int32)
        for i, layer in self._sorted(names):
            img[layer.mask] = layer.appearance[layer.mask]
            labels[layer.mask] = i
        return img, labels

    def render(self, names=None, origin=(0, 0), shape=None) -> np.ndarray:
        shape = shape or self.photo_shape
        img, _ = self.render_world(names)
        return self._window(img, origin, shape, self.outside_color)

    def photo(self) -> np.ndarray:
        return self.render()

    def layer_mask(self, name: str, origin=(0, 0), shape=None) -> np.ndarray:
        """Full (unoccluded) mask of a layer in photo coordinates."""
        return self._window(self.layer(name).mask, origin, shape or self.photo_shape, False)

    def visible_mask(self, name: str, origin=(0, 0), shape=None) -> np.ndarray:
        _, labels = self.render_world()
        idx = [l.name for l in self.layers].index(name)
        return self._window(labels == idx, origin, shape or self.photo_shape, False)

    def background_window(self, origin, shape) -> np.ndarray:
        return self._window(self.background, origin, shape, self.outside_color)

    # -- provenance --------------------------------------------------------

    @property
    def background_label(self) -> int:
        return len(self.layers)

    @property
    def other_label(self) -> int:
        return len(self.layers) + 1

    def labels(self, image: np.ndarray, origin=(0, 0)) -> np.ndarray:
        """Per-pixel source: layer index, background, or other."""
        image = as_image(image)
        shape = image.shape[:2]
        out = np.full(shape, self.other_label, dtype=np.int32)
        free = np.ones(shape, dtype=bool)
        for i, layer in sorted(enumerate(self.layers), key=lambda t: (-t[1].z, -t[0])):
            m = self._window(layer.mask, origin, shape, False)
            app = self._window(layer.appearance, origin, shape, 0)
            hit = free & m & np.all(image == app, axis=-1)
            out[hit] = i
            free &= ~hit
        bg = self.background_window(origin, shape)
        hit = free & np.all(image == bg, axis=-1)
        hit &= self._window(np.ones(self.world_shape, bool), origin, shape, False)
        out[hit] = self.background_label
        return out

    def reveal_names(self, generation: int, prompt: str) -> List[str]:
        if generation < len(self.reveal_script) and self.reveal_script[generation] is not None:
            return list(self.reveal_script[generation])
        hits = [l for l in self.layers if l.category == prompt]
        if not hits:
            return []
        zmin = min(l.z for l in hits)
        return [l.name for l in self.layers if l.category == prompt or l.z < zmin]

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_image(d / "background.png", self.background)
        layers = []
        for i, l in enumerate(self.layers):
            save_mask(d / f"layer_{i}_mask.png", l.mask)
            save_image(d / f"layer_{i}_appearance.png", l.appearance)
            layers.append({"name": l.name, "category": l.category, "z": l.z, "score": l.score,
                           "mask": f"layer_{i}_mask.png",
                           "appearance": f"layer_{i}_appearance.png"})
        doc = {"background": "background.png", "viewport": self.viewport.to_list(),
               "layers": layers, "reveal_script": self.reveal_script,
               "depth_unknown": [list(p) for p in self.depth_unknown],
               "outside_color": list(self.outside_color)}
        (d / "scene.json").write_text(json.dumps(doc, indent=2))
        return d

    @classmethod
    def load(cls, directory) -> "ScriptedScene":
        d = Path(directory)
        doc = json.loads((d / "scene.json").read_text())
        layers = [Layer(l["name"], l["category"], load_mask(d / l["mask"]),
                        load_image(d / l["appearance"]), int(l["z"]), float(l.get("score", 1.0)))
                  for l in doc["layers"]]
        return cls(background=load_image(d / doc["background"]), layers=layers,
                   viewport=BBox(*doc["viewport"]),
                   reveal_script=doc.get("reveal_script", []),
                   depth_unknown=[tuple(p) for p in doc.get("depth_unknown", [])],
                   outside_color=tuple(doc.get("outside_color", (255, 255, 255))))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.background.tobytes())
        for l in self.layers:
            h.update(f"{l.name}|{l.category}|{l.z}|{l.score}".encode())
            h.update(np.packbits(l.mask).tobytes())
            h.update(l.appearance.tobytes())
        h.update(json.dumps([self.viewport.to_list(), self.reveal_script,
                             [list(p) for p in self.depth_unknown]]).encode())
        return h.hexdigest()[:16]


def default_background(height: int, width: int) -> np.ndarray:
    """Smooth two-axis ramp with a constant blue channel of 40."""
    ys, xs = np.mgrid[0:height, 0:width]
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[..., 0] = 40 + (xs // 2) % 64
    img[..., 1] = 40 + (ys // 2) % 64
    img[..., 2] = 40
    return img


class SceneBuilder:
    """Convenience constructor for scripted scenes in photo coordinates.

    Shapes may extend outside the photo by up to ``margin`` pixels.
    """

    def __init__(self, width: int, height: int, margin: int = 160, background=None):
        self.width, self.height, self.margin = width, height, margin
        H, W = height + 2 * margin, width + 2 * margin
        self.background = default_background(H, W) if background is None else as_image(background)
        if self.background.shape[:2] != (H, W):
            raise ValueError("background must cover the world canvas")
        self.layers: List[Layer] = []

    @property
    def world_shape(self):
        return self.background.shape[:2]

    def _appearance(self, color) -> np.ndarray:
        color = tuple(int(c) for c in color)
        if color in RESERVED_COLORS:
            raise ValueError(f"layer colour {color} is reserved for backdrops")
        if color[2] == 40:
            raise ValueError("layer colours must not use blue=40 (background ramp)")
        app = np.empty(self.world_shape + (3,), dtype=np.uint8)
        app[:] = color
        return app

    def add_mask(self, name, category, mask, color, z, score=1.0, appearance=None):
        """``mask`` is photo-sized (or world-sized when it matches the world canvas)."""
        mask = as_mask(mask)
        if mask.shape == (self.height, self.width):
            world = np.zeros(self.world_shape, dtype=bool)
            world[self.margin:self.margin + self.height, self.margin:self.margin + self.width] = mask
            mask = world
        elif mask.shape != self.world_shape:
            raise ValueError("mask must be photo- or world-sized")
        app = self._appearance(color) if appearance is None else as_image(appearance)
        self.layers.append(Layer(name, category, mask, app, z, score))
        return self

    def add_rect(self, name, category, x0, y0, x1, y1, color, z, score=1.0):
        m = np.zeros(self.world_shape, dtype=bool)
        ox = oy = self.margin
        m[max(y0 + oy, 0):max(y1 + oy, 0), max(x0 + ox, 0):max(x1 + ox, 0)] = True
        return self.add_mask(name, category, m, color, z, score)

    def add_ellipse(self, name, category, cx, cy, rx, ry, color, z, score=1.0):
        ys, xs = np.mgrid[0:self.world_shape[0], 0:self.world_shape[1]]
        m = ((xs - cx - self.margin) / rx) ** 2 + ((ys - cy - self.margin) / ry) ** 2 <= 1.0
        return self.add_mask(name, category, m, color, z, score)

    def build(self, reveal_script=(), depth_unknown=()) -> ScriptedScene:
        vp = BBox(self.margin, self.margin, self.margin + self.width, self.margin + self.height)
        return ScriptedScene(self.background, list(self.layers), vp,
                             reveal_script=[None if r is None else list(r) for r in reveal_script],
                             depth_unknown=[tuple(p) for p in depth_unknown])


class MockBackend(DiffusionBackend, Segmenter, DepthOrderer, Remover):
    """All model roles answered from one :class:`ScriptedScene`.

    ``feature_cell`` is the side of one decoder-feature cell in pixels.
    """

    def __init__(self, scene: ScriptedScene, total_steps: int = 50, feature_cell: int = 1,
                 respect_vocabulary: bool = True):
        self.scene = scene
        self.total_steps = total_steps
        self.feature_cell = feature_cell
        self.respect_vocabulary = respect_vocabulary
        self._generation = 0
        self._lock = threading.Lock()

    def identity(self):
        return {"name": "mock", "version": MOCK_VERSION, "scene": self.scene.fingerprint()}

    def ping(self):
        return self.identity()

    def _next_generation(self) -> int:
        with self._lock:
            g = self._generation
            self._generation += 1
            return g

    # -- diffusion ---------------------------------------------------------

    def diffuse_range(self, image_or_state, inpaint_mask, prompt, s, e, *, seed=0,
                      origin=(0, 0)):
        self.check_range(image_or_state, s, e)
        mask = as_mask(inpaint_mask)
        if isinstance(image_or_state, NoisyState):
            pixels = image_or_state.pixels
            if image_or_state.handle:
                origin = image_or_state.handle.get("origin", origin)
        else:
            pixels = as_image(image_or_state)
        check_same_shape(pixels, mask)
        origin = tuple(int(v) for v in origin)
        if s == 0:
            names = self.scene.reveal_names(self._next_generation(), prompt)
            fill = self.scene.render(names, origin, pixels.shape[:2])
            out = np.where(mask[..., None], fill, pixels)
        else:
            out = pixels.copy()
        return NoisyState(out, e, {"origin": origin})

    def add_noise(self, image, k, *, seed=0, origin=(0, 0)):
        if not 0 <= k <= self.total_steps:
            raise BackendContractError(f"timestep {k} out of range")
        return NoisyState(as_image(image).copy(), k, {"origin": tuple(int(v) for v in origin)})

    def extract_decoder_features(self, state, layer):
        if not 1 <= layer <= 4:
            raise BackendContractError(f"invalid decoder layer {layer}")
        if not 0 < state.timestep < self.total_steps:
            raise BackendContractError("features are only available mid-denoise")
        origin = (state.handle or {}).get("origin", (0, 0))
        labels = self.scene.labels(state.pixels, origin)
        c = self.feature_cell
        h, w = labels.shape
        hf, wf = -(-h // c), -(-w // c)
        ys = np.minimum(np.arange(hf) * c + c // 2, h - 1)
        xs = np.minimum(np.arange(wf) * c + c // 2, w - 1)
        grid = labels[np.ix_(ys, xs)]
        return np.eye(self.scene.other_label + 1, dtype=np.float32)[grid]

    # -- segmentation / depth / removal -----------------------------------

    def segment_instances(self, image, vocabulary, *, origin=(0, 0)):
        labels = self.scene.labels(image, origin)
        vocab = set(vocabulary)
        out = []
        for i, layer in enumerate(self.scene.layers):
            if self.respect_vocabulary and vocab and layer.category not in vocab:
                continue
            m = labels == i
            if m.any():
                out.append(Instance(m, layer.category, layer.score))
        return out

    def _majority_layer(self, labels, mask) -> Optional[int]:
        vals = labels[as_mask(mask)]
        vals = vals[vals < self.scene.background_label]
        if vals.size == 0:
            return None
        return int(np.bincount(vals).argmax())

    def order_depth(self, image, mask_a, mask_b, *, origin=(0, 0)):
        labels = self.scene.labels(image, origin)
        a = self._majority_layer(labels, mask_a)
        b = self._majority_layer(labels, mask_b)
        if a is None or b is None or a == b:
            return DepthVerdict.UNKNOWN
        la, lb = self.scene.layers[a], self.scene.layers[b]
        pairs = {frozenset(p) for p in self.scene.depth_unknown}
        if frozenset((la.name, lb.name)) in pairs or la.z == lb.z:
            return DepthVerdict.UNKNOWN
        return DepthVerdict.FIRST_CLOSER if la.z > lb.z else DepthVerdict.SECOND_CLOSER

    def remove_objects(self, image, mask, *, origin=(0, 0)):
        image, mask = as_image(image), as_mask(mask)
        check_same_shape(image, mask)
        bg = self.scene.background_window(origin, image.shape[:2])
        return np.where(mask[..., None], bg, image)

    def backends(self) -> Backends:
        return Backends(self, self, self, self)


class RecordingBackend(DiffusionBackend):
    """Wraps a diffusion backend and records every ``diffuse_range`` call."""

    def __init__(self, inner: DiffusionBackend):
        self.inner = inner
        self.total_steps = inner.total_steps
        self.calls: List[Dict] = []

    def diffuse_range(self, image_or_state, inpaint_mask, prompt, s, e, *, seed=0, origin=(0, 0)):
        self.calls.append({"op": "diffuse_range", "mask": as_mask(inpaint_mask).copy(),
                           "prompt": prompt, "s": s, "e": e, "seed": seed, "origin": origin})
        return self.inner.diffuse_range(image_or_state, inpaint_mask, prompt, s, e,
                                        seed=seed, origin=origin)

    def add_noise(self, image, k, *, seed=0, origin=(0, 0)):
        self.calls.append({"op": "add_noise", "k": k, "origin": origin})
        return self.inner.add_noise(image, k, seed=seed, origin=origin)

    def extract_decoder_features(self, state, layer):
        self.calls.append({"op": "extract_decoder_features", "layer": layer, "t": state.timestep})
        return self.inner.extract_decoder_features(state, layer)

    def identity(self):
        return self.inner.identity()


def mock_backends(scene: ScriptedScene, **kwargs) -> Backends:
    return MockBackend(scene, **kwargs).backends()
