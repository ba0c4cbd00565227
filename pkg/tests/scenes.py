"""Scripted scenes and bundle builders shared by the tests."""

import json
from pathlib import Path

import numpy as np

from amodal.backends.mock import SceneBuilder
from amodal.core import save_image, save_mask


def one_occluder_scene():
    """A surfboard partly hidden behind one person."""
    b = SceneBuilder(200, 160)
    b.add_rect("board", "surfboard", 30, 70, 170, 95, (200, 60, 20), z=1)
    b.add_rect("kid", "person", 80, 40, 110, 140, (20, 180, 90), z=2)
    return b.build()


def two_occluder_scene():
    """A surfboard whose far end hides behind a second person.

    That person is too far from the visible part of the board to count as a
    neighbour until the first completion extends the board up to them.
    """
    b = SceneBuilder(200, 160)
    b.add_rect("board", "surfboard", 20, 70, 140, 95, (200, 60, 20), z=1)
    b.add_rect("kid", "person", 70, 40, 100, 140, (20, 180, 90), z=2)
    b.add_rect("man", "person", 100, 30, 150, 150, (90, 90, 220), z=3)
    return b.build()


def edge_scene():
    """A bus cut off by the right edge of the photo (no object occluders)."""
    b = SceneBuilder(160, 120)
    b.add_rect("bus", "bus", 90, 40, 200, 90, (230, 180, 30), z=1)
    return b.build()


def random_scene(rng, width=64, height=64):
    """Random rectangles: one query object under one or two occluders."""
    b = SceneBuilder(width, height, margin=0)

    def rect():
        w, h = rng.integers(12, width // 2, size=2)
        x, y = rng.integers(4, width - w - 4), rng.integers(4, height - h - 4)
        return int(x), int(y), int(x + w), int(y + h)

    obj = rect()
    b.add_rect("object", "cup", *obj, (200, 30, 30), z=1)
    colors = [(30, 200, 30), (30, 30, 200)]
    for i in range(int(rng.integers(1, 3))):
        x0, y0, x1, y1 = obj
        ox = int(rng.integers(x0 - 8, x1 - 4))
        oy = int(rng.integers(y0 - 8, y1 - 4))
        w, h = rng.integers(6, 20, size=2)
        b.add_rect(f"occ{i}", "person", max(ox, 0), max(oy, 0), min(ox + int(w), width),
                   min(oy + int(h), height), colors[i], z=2 + i)
    return b.build()


def write_bundle(directory, image, mask, category, origin=(0, 0)) -> Path:
    """Minimal bundle directory that curation can read."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_image(d / "amodal.png", image)
    save_mask(d / "amodal_mask.png", mask)
    manifest = {"format": "amodal-bundle/1", "query": {"category": category, "seed_point": None},
                "final": {"origin": list(origin), "size": [mask.shape[1], mask.shape[0]],
                          "mask_area": int(mask.sum())}}
    (d / "manifest.json").write_text(json.dumps(manifest))
    return d


def curation_scene():
    """A single cup well inside a 96x96 photo."""
    b = SceneBuilder(96, 96)
    b.add_rect("cup", "cup", 28, 28, 68, 68, (200, 30, 30), z=1)
    return b.build()


def constructed_curation_set(root, scene, n_tp=35, n_tn=35, n_fp=15, n_fn=15):
    """Bundles plus labels with a known confusion matrix.

    Bundles holding the whole cup are judged complete by the rule; bundles
    holding only its left half are judged incomplete. Labels are then
    assigned to hit the requested counts.
    """
    root = Path(root)
    photo = scene.photo()
    full = scene.layer_mask("cup")
    half = full.copy()
    half[:, 48:] = False
    half_img = np.where(half[..., None], photo, scene.render([]))
    labels = {}
    plan = ([("full", "complete")] * n_tp + [("full", "incomplete")] * n_fp
            + [("half", "incomplete")] * n_tn + [("half", "complete")] * n_fn)
    for i, (kind, truth) in enumerate(plan):
        sid = f"item_{i:03d}"
        if kind == "full":
            write_bundle(root / sid, photo, full, "cup")
        else:
            write_bundle(root / sid, half_img, half, "cup")
        labels[sid] = truth
    return labels
