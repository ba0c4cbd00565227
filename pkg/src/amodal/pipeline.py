"""Progressive occlusion-aware completion: the outer analyse / frame / sample loop."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .backends.base import Backends, BackendError
from .core import (PipelineConfig, QuerySpec, as_image, as_mask, load_image, load_mask,
                   mask_area, save_image, save_mask, sha256_file)
from .framing import FrameTransform, conditional_pad, merge_into_canvas, paste_object, square_crop
from .occlusion import (OcclusionReport, QueryResolutionError, build_occlusion_report,
                        query_instance_index, resolve_query, vocabulary_for)
from .sampler import SAMPLERS, McTrace, mixed_context_complete, naive_outpaint, plain_complete

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "amodal-bundle/1"


@dataclass
class IterationRecord:
    index: int
    origin: Tuple[int, int]          # input canvas top-left in original coordinates
    input_image: np.ndarray
    input_modal: np.ndarray
    report: OcclusionReport
    transform: Optional[FrameTransform] = None
    sampler: Optional[str] = None
    trace: Optional[McTrace] = None
    crop_image: Optional[np.ndarray] = None
    crop_occ: Optional[np.ndarray] = None
    crop_modal: Optional[np.ndarray] = None
    completed: Optional[np.ndarray] = None
    crop_amodal: Optional[np.ndarray] = None
    amodal: Optional[np.ndarray] = None       # in the next canvas' coordinates
    warnings: List[str] = field(default_factory=list)

    def summary(self) -> dict:
        d = {"index": self.index, "origin": list(self.origin),
             "input_size": [int(self.input_modal.shape[1]), int(self.input_modal.shape[0])],
             "modal_area": mask_area(self.input_modal),
             "report": self.report.summary(),
             "sampler": self.sampler or "none",
             "transform": self.transform.to_dict() if self.transform else None,
             "warnings": list(self.warnings)}
        if self.amodal is not None:
            d["amodal_area"] = mask_area(self.amodal)
        if self.trace is not None:
            d["mc"] = self.trace.diagnostics()
        return d


@dataclass
class CompletionBundle:
    query: QuerySpec
    sampler: str
    config: PipelineConfig
    seed: int
    original: np.ndarray
    final_image: np.ndarray
    final_mask: np.ndarray
    final_origin: Tuple[int, int]
    overlay: np.ndarray
    overlay_origin: Tuple[int, int]
    iterations: List[IterationRecord]
    termination_reason: str
    backends: dict = field(default_factory=dict)
    error: Optional[str] = None

    def final_mask_in_original(self) -> np.ndarray:
        """Final amodal mask cropped/shifted onto the original raster."""
        h, w = self.original.shape[:2]
        out = np.zeros((h, w), dtype=bool)
        ox, oy = self.final_origin
        fh, fw = self.final_mask.shape
        x0, y0 = max(ox, 0), max(oy, 0)
        x1, y1 = min(ox + fw, w), min(oy + fh, h)
        if x0 < x1 and y0 < y1:
            out[y0:y1, x0:x1] = self.final_mask[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
        return out


def new_amodal_mask(completed, prev_modal, occ, prompt: str, backends: Backends,
                    vocabulary, origin=(0, 0)) -> Tuple[np.ndarray, bool]:
    """Re-segment the completed crop; returns ``(mask, found)``.

    The instance overlapping ``prev_modal`` the most is joined with it. When
    nothing overlaps, ``prev_modal`` is returned and ``found`` is False.
    """
    prev_modal = as_mask(prev_modal)
    instances = backends.segmenter.segment_instances(completed, vocabulary, origin=origin)
    idx = query_instance_index(instances, prev_modal, prompt)
    if idx is None:
        return prev_modal.copy(), False
    return instances[idx].mask | prev_modal, True


def _sample(kind, crop, occ, modal, query, config, backends, seed, origin):
    if kind == "mc":
        return mixed_context_complete(crop, occ, modal, query.category, config, backends,
                                      seed=seed, origin=origin)
    if kind == "plain":
        return plain_complete(crop, occ, query.category, config, backends.diffusion,
                              seed=seed, origin=origin), None
    return naive_outpaint(crop, modal, query.category, config, backends.diffusion,
                          seed=seed, origin=origin), None


def run_pipeline(image, query: QuerySpec, config: PipelineConfig, backends: Backends,
                 sampler: str = "mc", *, modal=None, seed: Optional[int] = None
                 ) -> CompletionBundle:
    """Complete the query object, iterating until it is no longer occluded.

    ``modal`` skips query resolution when the visible mask is already known.
    On a backend failure the raised exception carries the partial bundle as
    ``exc.bundle``.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}")
    original = as_image(image)
    seed = config.rng_seed if seed is None else seed
    vocab = vocabulary_for(query, config)

    canvas = original.copy()
    origin = (0, 0)
    instances = None
    if modal is None:
        instances = backends.segmenter.segment_instances(canvas, vocab, origin=origin)
        modal = resolve_query(instances, query)
    modal = as_mask(modal)
    if not modal.any():
        raise QueryResolutionError("query modal mask is empty")

    records: List[IterationRecord] = []
    reason = "max_iterations"

    def bundle(error=None):
        final_img, final_mask = canvas, modal
        overlay, ov_origin = paste_object(original, final_img, final_mask, origin)
        return CompletionBundle(query, sampler, config, seed, original, final_img, final_mask,
                                origin, overlay, ov_origin, records, reason,
                                backends.identities(), error)

    try:
        for it in range(config.max_iterations + 1):
            report = build_occlusion_report(canvas, modal, query, config, backends,
                                            origin=origin, instances=instances)
            instances = None
            if not report.is_occluded:
                reason = "unoccluded"
                if not records:
                    records.append(IterationRecord(0, origin, canvas, modal, report))
                break
            if it == config.max_iterations:
                break
            rec = IterationRecord(len(records), origin, canvas, modal, report, sampler=sampler)
            records.append(rec)

            padded, occ_p, modal_p, tf = conditional_pad(
                canvas, report.occluder_union, modal, report.boundary_sides,
                config.pad_alpha + config.pad_beta)
            crop, occ_c, modal_c, tf = square_crop(padded, occ_p, modal_p, config.pad_alpha,
                                                   config.pad_beta, tf)
            crop_origin = (origin[0] + tf.origin[0], origin[1] + tf.origin[1])
            completed, trace = _sample(sampler, crop, occ_c, modal_c, query, config, backends,
                                       seed, crop_origin)
            crop_amodal, found = new_amodal_mask(completed, modal_c, occ_c, query.category,
                                                 backends, vocab, crop_origin)
            if not found:
                rec.warnings.append("segmenter found no instance on the completed object")
            canvas, modal, shift = merge_into_canvas(canvas, modal, completed, crop_amodal, tf)
            origin = (origin[0] + shift[0], origin[1] + shift[1])

            rec.transform, rec.trace = tf, trace
            rec.crop_image, rec.crop_occ, rec.crop_modal = crop, occ_c, modal_c
            rec.completed, rec.crop_amodal, rec.amodal = completed, crop_amodal, modal
            log.info("iteration %d: occluder area %d, amodal area %d", rec.index,
                     mask_area(report.occluder_union), mask_area(modal))
    except (BackendError, QueryResolutionError) as exc:
        if not records:
            raise
        reason = "error"
        exc.bundle = bundle(error=str(exc))
        raise
    return bundle()


# ---------------------------------------------------------------------------
# bundle persistence
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def save_label_grid(path, grid: np.ndarray) -> None:
    """Cluster assignments as an indexed (palette) PNG."""
    g = np.asarray(grid).astype(np.uint8)
    im = Image.fromarray(g, mode="P")
    rng = np.random.default_rng(7)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    im.putpalette(palette.reshape(-1).tolist())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")


def save_bundle(bundle: CompletionBundle, out_dir, debug_trace: bool = False) -> dict:
    """Write the bundle directory; returns the manifest that was written.

    The manifest holds no timings or absolute paths, so identical runs write
    byte-identical manifests.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    def img(rel, arr):
        save_image(out / rel, arr)
        files[rel] = None

    def msk(rel, arr):
        save_mask(out / rel, arr)
        files[rel] = None

    img("original.png", bundle.original)
    img("amodal.png", bundle.final_image)
    msk("amodal_mask.png", bundle.final_mask)
    img("overlay.png", bundle.overlay)
    for rec in bundle.iterations:
        d = f"iter_{rec.index}"
        img(f"{d}/input.png", rec.input_image)
        msk(f"{d}/modal_mask.png", rec.input_modal)
        msk(f"{d}/occluder_mask.png", rec.report.occluder_union)
        if rec.completed is not None:
            img(f"{d}/crop.png", rec.crop_image)
            msk(f"{d}/crop_occluder_mask.png", rec.crop_occ)
            msk(f"{d}/crop_modal_mask.png", rec.crop_modal)
            img(f"{d}/completed.png", rec.completed)
            msk(f"{d}/crop_amodal_mask.png", rec.crop_amodal)
            msk(f"{d}/amodal_mask.png", rec.amodal)
        if debug_trace and rec.trace is not None:
            t = rec.trace
            img(f"{d}/trace/syn.png", t.syn)
            img(f"{d}/trace/syn_k.png", t.syn_k.pixels)
            img(f"{d}/trace/bg_k.png", t.bg_k.pixels)
            img(f"{d}/trace/composite_k.png", t.composite_k.pixels)
            msk(f"{d}/trace/amodal_k_mask.png", t.amodal_k)
            save_label_grid(out / d / "trace" / "clusters.png", t.cluster_grid)
            files[f"{d}/trace/clusters.png"] = None
            (out / d / "trace" / "diagnostics.json").write_text(
                json.dumps(t.diagnostics(), indent=2, sort_keys=True))
            files[f"{d}/trace/diagnostics.json"] = None

    artifacts = {rel: sha256_file(out / rel) for rel in sorted(files)}
    body = {
        "format": BUNDLE_FORMAT,
        "query": {"category": bundle.query.category,
                  "seed_point": list(bundle.query.seed_point) if bundle.query.seed_point else None},
        "sampler": bundle.sampler,
        "seed": bundle.seed,
        "config": bundle.config.to_dict(),
        "backends": bundle.backends,
        "termination_reason": bundle.termination_reason,
        "error": bundle.error,
        "final": {"origin": list(bundle.final_origin),
                  "size": [int(bundle.final_mask.shape[1]), int(bundle.final_mask.shape[0])],
                  "mask_area": mask_area(bundle.final_mask)},
        "overlay_origin": list(bundle.overlay_origin),
        "iterations": [r.summary() for r in bundle.iterations],
        "artifacts": artifacts,
    }
    manifest = dict(body, content_hash=content_hash(body))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_bundle_item(directory) -> dict:
    """The pieces of a saved bundle that curation needs."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return {"id": d.name,
            "image": load_image(d / "amodal.png"),
            "mask": load_mask(d / "amodal_mask.png"),
            "prompt": manifest["query"]["category"],
            "origin": tuple(manifest["final"]["origin"]),
            "manifest": manifest}
