import numpy as np
import pytest

from amodal.backends.base import DepthVerdict, Instance
from amodal.backends.mock import MockBackend, SceneBuilder, ScriptedScene, mock_backends
from amodal.core import PipelineConfig, QuerySpec, dilate_radius
from amodal.occlusion import (QueryResolutionError, build_occlusion_report, find_neighbors,
                              resolve_query, select_occluders)


def rect(shape, x0, y0, x1, y1):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


def test_neighbor_radius_is_inclusive_at_five():
    shape = (40, 60)
    modal = rect(shape, 10, 10, 20, 30)          # right column is x = 19
    near = Instance(rect(shape, 24, 10, 30, 30), "a")   # 5 px away
    far = Instance(rect(shape, 25, 10, 30, 30), "b")    # 6 px away
    found = find_neighbors([near, far], modal, 5)
    assert len(found) == 1 and np.array_equal(found[0], near.mask)


class FixedDepth:
    def __init__(self, verdicts):
        self.verdicts = list(verdicts)

    def order_depth(self, image, a, b, *, origin=(0, 0)):
        return self.verdicts.pop(0)


def test_only_first_closer_counts_as_occluder():
    img = np.zeros((10, 10, 3), np.uint8)
    modal = rect((10, 10), 0, 0, 5, 5)
    ns = [rect((10, 10), 5, 0, 6, 5), rect((10, 10), 0, 5, 5, 6), rect((10, 10), 5, 5, 6, 6)]
    depth = FixedDepth([DepthVerdict.FIRST_CLOSER, DepthVerdict.UNKNOWN,
                        DepthVerdict.SECOND_CLOSER])
    occ = select_occluders(img, modal, ns, depth)
    assert len(occ) == 1 and np.array_equal(occ[0], ns[0])


def test_report_union_is_dilated_and_excludes_modal(one_occluder):
    b = mock_backends(one_occluder)
    img = one_occluder.photo()
    modal = one_occluder.visible_mask("board")
    rep = build_occlusion_report(img, modal, QuerySpec("surfboard"), PipelineConfig(), b)
    kid = one_occluder.visible_mask("kid")
    assert rep.is_occluded and rep.occluder_categories == ["person"]
    assert np.array_equal(rep.occluder_union, dilate_radius(kid, 2) & ~modal)
    assert not (rep.occluder_union & modal).any()
    assert rep.boundary_sides == frozenset()


def test_unknown_depth_is_not_an_occluder(one_occluder):
    scene = ScriptedScene(one_occluder.background, one_occluder.layers, one_occluder.viewport,
                          depth_unknown=[("kid", "board")])
    b = MockBackend(scene).backends()
    modal = scene.visible_mask("board")
    rep = build_occlusion_report(scene.photo(), modal, QuerySpec("surfboard"),
                                 PipelineConfig(), b)
    assert rep.neighbor_categories == ["person"] and rep.occluder_masks == []
    assert not rep.is_occluded


def test_boundary_counts_as_occlusion():
    b = SceneBuilder(100, 80)
    b.add_rect("bus", "bus", 50, 20, 130, 60, (230, 180, 30), z=1)
    scene = b.build()
    modal = scene.visible_mask("bus")
    rep = build_occlusion_report(scene.photo(), modal, QuerySpec("bus"), PipelineConfig(),
                                 mock_backends(scene))
    assert rep.boundary_sides == {"right"} and rep.is_occluded
    assert not rep.occluder_union.any()


def test_resolve_query_by_category_point_and_score():
    shape = (20, 20)
    a = Instance(rect(shape, 0, 0, 5, 5), "cup", 0.9)
    b = Instance(rect(shape, 10, 10, 20, 20), "cup", 0.5)
    c = Instance(rect(shape, 5, 5, 10, 10), "dog", 1.0)
    assert np.array_equal(resolve_query([a, b, c], QuerySpec("cup")), a.mask)
    assert np.array_equal(resolve_query([a, b, c], QuerySpec("cup", (12, 15))), b.mask)
    with pytest.raises(QueryResolutionError):
        resolve_query([a, b, c], QuerySpec("cup", (7, 7)))
    with pytest.raises(QueryResolutionError):
        resolve_query([c], QuerySpec("cup"))
