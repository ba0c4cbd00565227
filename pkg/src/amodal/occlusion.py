"""Occluder discovery around a query object and the per-iteration occlusion check."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .backends.base import Backends, DepthOrderer, DepthVerdict, Instance
from .core import (PipelineConfig, QuerySpec, as_mask, check_same_shape, dilate_radius,
                   mask_area, touches_boundary, union_all)

log = logging.getLogger(__name__)


class QueryResolutionError(LookupError):
    """The query object could not be located among the segmenter's instances."""


@dataclass
class OcclusionReport:
    neighbor_masks: List[np.ndarray]
    occluder_masks: List[np.ndarray]
    occluder_union: np.ndarray
    boundary_sides: frozenset
    is_occluded: bool
    neighbor_categories: List[str] = field(default_factory=list)
    occluder_categories: List[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "neighbors": [{"category": c, "area": mask_area(m)}
                          for c, m in zip(self.neighbor_categories, self.neighbor_masks)],
            "occluders": [{"category": c, "area": mask_area(m)}
                          for c, m in zip(self.occluder_categories, self.occluder_masks)],
            "occluder_area": mask_area(self.occluder_union),
            "boundary_sides": sorted(self.boundary_sides),
            "is_occluded": self.is_occluded,
        }


def vocabulary_for(query: QuerySpec, config: PipelineConfig) -> List[str]:
    vocab = [query.category]
    vocab += [v for v in config.vocabulary if v != query.category]
    return vocab


def query_instance_index(instances: List[Instance], modal: np.ndarray,
                         category: Optional[str] = None) -> Optional[int]:
    """Index of the instance that best overlaps ``modal`` (same category preferred)."""
    best, best_key = None, None
    for i, inst in enumerate(instances):
        inter = int(np.count_nonzero(inst.mask & modal))
        if inter == 0:
            continue
        key = (category is None or inst.category == category, inter, inst.score)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def neighbor_indices(instances: List[Instance], modal, radius: int,
                     exclude: Optional[int] = None) -> List[int]:
    """Indices of instances touching ``modal`` dilated by ``radius`` pixels."""
    modal = as_mask(modal)
    zone = dilate_radius(modal, radius)
    out = []
    for i, inst in enumerate(instances):
        if i == exclude:
            continue
        check_same_shape(inst.mask, modal)
        if np.any(inst.mask & zone):
            out.append(i)
    return out


def find_neighbors(instances: List[Instance], modal, radius: int,
                   exclude: Optional[int] = None) -> List[np.ndarray]:
    return [instances[i].mask for i in neighbor_indices(instances, modal, radius, exclude)]


def occluder_indices(image, modal, neighbors: List[np.ndarray], depth: DepthOrderer,
                     origin=(0, 0)) -> List[int]:
    """Indices of ``neighbors`` judged closer to the camera than ``modal``.

    ``unknown`` verdicts do not count as occluders.
    """
    out = []
    for i, m in enumerate(neighbors):
        verdict = depth.order_depth(image, m, modal, origin=origin)
        if verdict is DepthVerdict.FIRST_CLOSER:
            out.append(i)
    return out


def select_occluders(image, modal, neighbors: List[np.ndarray], depth: DepthOrderer,
                     origin=(0, 0)) -> List[np.ndarray]:
    return [neighbors[i] for i in occluder_indices(image, modal, neighbors, depth, origin)]


def build_occlusion_report(image, modal, query: QuerySpec, config: PipelineConfig,
                           backends: Backends, origin=(0, 0),
                           instances: Optional[List[Instance]] = None) -> OcclusionReport:
    modal = as_mask(modal)
    check_same_shape(image, modal)
    if instances is None:
        instances = backends.segmenter.segment_instances(
            image, vocabulary_for(query, config), origin=origin)
    own = query_instance_index(instances, modal, query.category)
    if own is None or instances[own].category != query.category:
        raise QueryResolutionError(
            f"segmenter found no {query.category!r} instance on the query mask")

    nbr_idx = neighbor_indices(instances, modal, config.neighbor_radius, exclude=own)
    neighbors = [instances[i].mask for i in nbr_idx]
    occ_idx = occluder_indices(image, modal, neighbors, backends.depth, origin=origin)
    occluders = [neighbors[i] for i in occ_idx]

    grown = [dilate_radius(m, config.occluder_dilation) for m in occluders]
    union = union_all(grown, modal.shape) & ~modal
    sides = touches_boundary(modal, config.boundary_eps)
    report = OcclusionReport(
        neighbor_masks=neighbors,
        occluder_masks=occluders,
        occluder_union=union,
        boundary_sides=sides,
        is_occluded=bool(union.any() or sides),
        neighbor_categories=[instances[i].category for i in nbr_idx],
        occluder_categories=[instances[nbr_idx[i]].category for i in occ_idx],
    )
    log.debug("occlusion report: %s", report.summary())
    return report


def resolve_query(instances: List[Instance], query: QuerySpec) -> np.ndarray:
    """Pick the query's modal mask: category, seed point, score, then area."""
    cands = [inst for inst in instances if inst.category == query.category]
    if not cands:
        raise QueryResolutionError(f"no {query.category!r} instance detected")
    if query.seed_point is not None:
        x, y = query.seed_point
        inside = [c for c in cands
                  if 0 <= y < c.mask.shape[0] and 0 <= x < c.mask.shape[1] and c.mask[y, x]]
        if not inside:
            raise QueryResolutionError(
                f"no {query.category!r} instance contains point {query.seed_point}")
        cands = inside
    best = max(cands, key=lambda c: (c.score, mask_area(c.mask)))
    return best.mask.copy()
