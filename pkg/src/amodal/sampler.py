"""Mixed-context diffusion sampling and the two single-pass baselines.

Mixed-context sampling runs two paths over the framed crop:

1. the query object on a clean backdrop is inpainted over the occluder mask
   up to the composite timestep ``k``;
2. query object and occluders are removed from the real scene and the result
   is noised to ``k``.

The object is segmented in the noisy synthetic state by clustering decoder
features, pasted onto the noisy background, and denoising resumes to ``N``
with the same occluder mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .backends.base import Backends, BackendContractError, DiffusionBackend, NoisyState
from .core import (PipelineConfig, as_image, as_mask, check_same_shape, mask_area,
                   overlap_ratio)

log = logging.getLogger(__name__)

SAMPLERS = ("mc", "plain", "naive")


# ---------------------------------------------------------------------------
# backdrops
# ---------------------------------------------------------------------------

def backdrop(name: str, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.empty((height, width, 3), dtype=np.uint8)
    if name == "gray":
        out[:] = 128
    elif name == "white":
        out[:] = 255
    elif name == "black":
        out[:] = 0
    elif name == "forest":
        stripes = ((xs // 7) % 3) * 12
        out[..., 0] = 20 + stripes
        out[..., 1] = 70 + (ys * 60 // max(height, 1)) + stripes
        out[..., 2] = 30
    elif name == "sky":
        out[..., 0] = 110 + (ys * 80 // max(height, 1))
        out[..., 1] = 160 + (ys * 60 // max(height, 1))
        out[..., 2] = 235
    else:
        raise ValueError(f"no procedural backdrop named {name!r}")
    return out


def swap_background(image, modal, clean: str = "gray") -> np.ndarray:
    """Replace everything outside ``modal`` with a clean backdrop.

    ``clean="original"`` keeps the image as is.
    """
    image, modal = as_image(image), as_mask(modal)
    check_same_shape(image, modal)
    if clean == "original":
        return image.copy()
    h, w = modal.shape
    return np.where(modal[..., None], image, backdrop(clean, h, w))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns a label per point.

    Identical points are merged and weighted before clustering, so duplicates
    always share a label. When fewer than ``k`` distinct points exist, fewer
    clusters are produced. Labels are renumbered by first appearance.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans needs a non-empty (n, d) array")
    uniq, inverse, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    w = counts.astype(np.float64)
    rng = np.random.default_rng(seed)
    n = len(uniq)
    sq = np.einsum("ij,ij->i", uniq, uniq)

    def dist2(centers):
        d = sq[:, None] - 2.0 * uniq @ centers.T + np.einsum("ij,ij->i", centers, centers)[None]
        return np.maximum(d, 0.0)

    centers = [uniq[rng.choice(n, p=w / w.sum())]]
    while len(centers) < min(k, n):
        d = dist2(np.array(centers)).min(axis=1)
        p = w * d
        if p.sum() <= 0:
            break
        centers.append(uniq[rng.choice(n, p=p / p.sum())])
    centers = np.array(centers)

    assign = dist2(centers).argmin(axis=1)
    for _ in range(max_iter):
        for c in range(len(centers)):
            sel = assign == c
            if sel.any():
                centers[c] = np.average(uniq[sel], axis=0, weights=w[sel])
        new = dist2(centers).argmin(axis=1)
        if np.array_equal(new, assign):
            break
        assign = new

    labels = assign[inverse]
    _, first = np.unique(labels, return_index=True)
    order = labels[np.sort(first)]
    remap = np.empty(len(centers), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels]


def upsample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    hf, wf = grid.shape[:2]
    rows = (np.arange(height) * hf) // height
    cols = (np.arange(width) * wf) // width
    return grid[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# the four mixed-context steps
# ---------------------------------------------------------------------------

def denoise_synthetic(diffusion: DiffusionBackend, syn, occ, prompt: str, k: int, *,
                      seed: int = 0, origin=(0, 0)) -> NoisyState:
    return diffusion.diffuse_range(syn, occ, prompt, 0, k, seed=seed, origin=origin)


def object_removed_background(image, modal, occ, k: int, backends: Backends, *,
                              seed: int = 0, origin=(0, 0)) -> NoisyState:
    removal = as_mask(modal) | as_mask(occ)
    clean = backends.remover.remove_objects(image, removal, origin=origin)
    return backends.diffusion.add_noise(clean, k, seed=seed, origin=origin)


def segment_noisy_object(state: NoisyState, modal, occ, config: PipelineConfig,
                         diffusion: DiffusionBackend) -> Tuple[np.ndarray, Dict]:
    """Amodal mask of the query object in a noisy state via feature clustering.

    Clusters whose pixels fall inside ``modal`` for more than
    ``config.overlap_threshold`` of their area are kept; the union is then
    joined with ``modal`` and limited to ``modal | occ``.
    """
    modal, occ = as_mask(modal), as_mask(occ)
    check_same_shape(state.pixels, modal, occ)
    feats = np.asarray(diffusion.extract_decoder_features(state, config.decoder_layer))
    if feats.ndim != 3:
        raise BackendContractError(f"feature map must be (h, w, d), got {feats.shape}")
    hf, wf, d = feats.shape
    grid = kmeans(feats.reshape(-1, d), config.cluster_count, seed=config.rng_seed)
    grid = grid.reshape(hf, wf)
    h, w = modal.shape
    up = upsample_nearest(grid, h, w)

    overlaps: Dict[int, float] = {}
    chosen: List[int] = []
    selected = np.zeros_like(modal)
    for c in np.unique(up):
        cm = up == c
        ratio = overlap_ratio(cm, modal)
        overlaps[int(c)] = ratio
        if ratio > config.overlap_threshold:
            chosen.append(int(c))
            selected |= cm
    result = (selected | modal) & (modal | occ)
    diag = {"grid": grid, "upsampled": up, "overlaps": overlaps, "chosen": chosen,
            "feature_shape": [hf, wf, d]}
    return result, diag


def composite(syn_state: NoisyState, bg_state: NoisyState, mask) -> NoisyState:
    """``syn * M + bg * (1 - M)`` on the states' pixel rasters."""
    mask = as_mask(mask)
    if syn_state.timestep != bg_state.timestep:
        raise ValueError(
            f"cannot composite states at timesteps {syn_state.timestep} and {bg_state.timestep}")
    check_same_shape(syn_state.pixels, bg_state.pixels, mask)
    pixels = np.where(mask[..., None], syn_state.pixels, bg_state.pixels)
    handle = syn_state.handle if _same_handle(syn_state.handle, bg_state.handle) else None
    return NoisyState(pixels, syn_state.timestep, handle)


def _same_handle(a, b) -> bool:
    if a is b:
        return True
    try:
        return bool(a == b)
    except Exception:
        return False


def resume(diffusion: DiffusionBackend, state: NoisyState, occ, prompt: str, *,
           seed: int = 0, origin=(0, 0)) -> np.ndarray:
    out = diffusion.diffuse_range(state, occ, prompt, state.timestep, diffusion.total_steps,
                                  seed=seed, origin=origin)
    return diffusion.decode(out)


@dataclass
class McTrace:
    syn: np.ndarray
    syn_k: NoisyState
    bg_k: NoisyState
    amodal_k: np.ndarray
    composite_k: NoisyState
    cluster_grid: np.ndarray
    chosen_clusters: List[int]
    overlaps: Dict[int, float] = field(default_factory=dict)

    def diagnostics(self) -> dict:
        return {"chosen_clusters": self.chosen_clusters,
                "overlaps": {str(k): round(v, 6) for k, v in sorted(self.overlaps.items())},
                "cluster_grid_shape": list(self.cluster_grid.shape),
                "amodal_k_area": mask_area(self.amodal_k),
                "timestep": self.syn_k.timestep}


def mixed_context_complete(image, occ, modal, prompt: str, config: PipelineConfig,
                           backends: Backends, *, seed: Optional[int] = None,
                           origin=(0, 0)) -> Tuple[np.ndarray, McTrace]:
    image, occ, modal = as_image(image), as_mask(occ), as_mask(modal)
    check_same_shape(image, occ, modal)
    seed = config.rng_seed if seed is None else seed
    diffusion = backends.diffusion
    k = config.composite_step
    if diffusion.total_steps != config.total_steps:
        raise BackendContractError(
            f"backend runs {diffusion.total_steps} steps, config expects {config.total_steps}")

    syn = swap_background(image, modal, config.clean_background)
    syn_k = denoise_synthetic(diffusion, syn, occ, prompt, k, seed=seed, origin=origin)
    bg_k = object_removed_background(image, modal, occ, k, backends, seed=seed, origin=origin)
    amodal_k, diag = segment_noisy_object(syn_k, modal, occ, config, diffusion)
    mixed = composite(syn_k, bg_k, amodal_k)
    out = resume(diffusion, mixed, occ, prompt, seed=seed, origin=origin)
    trace = McTrace(syn, syn_k, bg_k, amodal_k, mixed, diag["grid"], diag["chosen"],
                    diag["overlaps"])
    return out, trace


def plain_complete(image, occ, prompt: str, config: PipelineConfig,
                   diffusion: DiffusionBackend, *, seed: Optional[int] = None,
                   origin=(0, 0)) -> np.ndarray:
    """Single inpainting pass over the occluder mask (no mixed context)."""
    seed = config.rng_seed if seed is None else seed
    out = diffusion.diffuse_range(image, occ, prompt, 0, diffusion.total_steps,
                                  seed=seed, origin=origin)
    return diffusion.decode(out)


def naive_outpaint(image, modal, prompt: str, config: PipelineConfig,
                   diffusion: DiffusionBackend, *, seed: Optional[int] = None,
                   origin=(0, 0)) -> np.ndarray:
    """Regenerate everything outside the query object (baseline)."""
    seed = config.rng_seed if seed is None else seed
    out = diffusion.diffuse_range(image, ~as_mask(modal), prompt, 0, diffusion.total_steps,
                                  seed=seed, origin=origin)
    return diffusion.decode(out)
