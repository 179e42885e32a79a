import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from pseudomap.assign import split_by_mask
from pseudomap.formats import dumps_vectormap
from pseudomap.geometry import BevSpec, MapClass, Pose2, VectorMap
from pseudomap.metrics import coverage_ratio
from pseudomap.raster import BevMask, RasterClass
from pseudomap.synth import (
    OcclusionParams,
    SceneParams,
    SplitMix64,
    disk_mask,
    frustum_region,
    gen_occlusion,
    gen_scene,
    gen_trips,
    multi_trip_union,
    rasterize_gt,
    splitmix64,
)

SPEC = BevSpec(-15, 15, -30, 30, 5)


def test_splitmix_reference_values():
    # published outputs of the splitmix64 generator seeded with 0
    x = 0
    outs = []
    for _ in range(3):
        x = (x + 0x9E3779B97F4A7C15) & (2 ** 64 - 1)
        outs.append(splitmix64(x))
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    a, b = SplitMix64(5), SplitMix64(5)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    assert all(0 <= a.random() < 1 for _ in range(100))


def test_params_validation():
    with pytest.raises(ValueError):
        SceneParams(n_lanes=0)
    with pytest.raises(ValueError):
        SceneParams(lane_width=0)
    with pytest.raises(ValueError):
        OcclusionParams(blob_radius=(0.0, 1.0))


def test_scene_composition_and_bounds():
    vm = gen_scene(SceneParams(seed=3, n_lanes=2, n_crossings=0))
    assert len(vm.of_class(MapClass.BOUNDARY)) == 2
    assert len(vm.of_class(MapClass.DIVIDER)) == 1
    assert not vm.of_class(MapClass.PED_CROSSING)
    vm = gen_scene(SceneParams(seed=3, n_lanes=3, n_crossings=1), SPEC)
    assert len(vm.of_class(MapClass.PED_CROSSING)) == 1
    for e in vm.elements:
        assert np.all(e.points[:, 0] >= SPEC.x_min) and np.all(e.points[:, 0] <= SPEC.x_max)
        assert np.all(e.points[:, 1] >= SPEC.y_min) and np.all(e.points[:, 1] <= SPEC.y_max)


@given(st.integers(0, 2 ** 40), st.integers(1, 4), st.floats(-0.03, 0.03))
def test_scene_determinism(seed, lanes, k):
    p = SceneParams(seed=seed, n_lanes=lanes, curvature=k)
    assert dumps_vectormap(gen_scene(p)) == dumps_vectormap(gen_scene(p))


def _circle_fit(p):
    """Algebraic least-squares circle: returns centre and radius."""
    A = np.column_stack([2 * p, np.ones(len(p))])
    b = (p ** 2).sum(1)
    (cx, cy, c), *_ = np.linalg.lstsq(A, b, rcond=None)
    return np.array([cx, cy]), math.sqrt(c + cx * cx + cy * cy)


def test_curved_divider_lies_on_arc():
    vm = gen_scene(SceneParams(seed=1, n_lanes=2, curvature=0.02, n_crossings=0))
    (div,) = vm.of_class(MapClass.DIVIDER)
    pts = div.points[1:-1]  # ends may be cut by the range border, on a chord
    c, r = _circle_fit(pts)
    assert r == pytest.approx(50.0, abs=1e-6)
    assert np.abs(np.hypot(*(pts - c).T) - 50.0).max() <= 1e-6


def test_empty_map_is_outside():
    r = rasterize_gt(VectorMap((), "", SPEC), SPEC)
    assert np.all(r.classes == RasterClass.OUTSIDE)


def test_solid_divider_single_component():
    spec = BevSpec(-15, 15, -30, 30, 20)
    vm = gen_scene(SceneParams(seed=2, n_lanes=2, n_crossings=0), spec)
    r = rasterize_gt(vm, spec, dash_pattern=(3.0, 0.0))
    _, n = ndimage.label(r.classes == RasterClass.LANE_MARKING, np.ones((3, 3)))
    assert n == 1
    dashed = rasterize_gt(vm, spec)
    _, n = ndimage.label(dashed.classes == RasterClass.LANE_MARKING, np.ones((3, 3)))
    assert n > 4


def test_road_between_boundaries():
    vm = gen_scene(SceneParams(seed=4, n_lanes=2, n_crossings=0), SPEC)
    r = rasterize_gt(vm, SPEC)
    xs = [e.points[:, 0].mean() for e in vm.of_class(MapClass.BOUNDARY)]
    X, _ = SPEC.pixel_centers()
    inner = (X > min(xs) + 0.5) & (X < max(xs) - 0.5)
    outer = (X < min(xs) - 0.5) | (X > max(xs) + 0.5)
    assert np.all(r.classes[inner] != RasterClass.OUTSIDE)
    assert np.all(r.classes[outer] == RasterClass.OUTSIDE)


def test_occlusion_examples():
    assert gen_occlusion(OcclusionParams(), Pose2(), SPEC).bits.all()
    assert not gen_occlusion(OcclusionParams(frustum_range=0.0), Pose2(), SPEC).bits.any()


@given(st.integers(0, 2 ** 40), st.integers(0, 6), st.floats(0.1, 2 * math.pi),
       st.floats(1, 60), st.floats(-3.1, 3.1))
def test_occlusion_within_frustum(seed, blobs, fov, rng_m, heading):
    pose = Pose2(0.0, 0.0, heading)
    p = OcclusionParams(seed=seed, n_blobs=blobs, frustum_fov=fov, frustum_range=rng_m)
    m = gen_occlusion(p, pose, SPEC)
    assert not np.any(m.bits & ~frustum_region(pose, SPEC, fov, rng_m))
    assert np.array_equal(m.bits, gen_occlusion(p, pose, SPEC).bits)


def test_blob_on_divider_splits_it():
    spec = BevSpec(-15, 15, -30, 30, 20)
    vm = gen_scene(SceneParams(seed=0, n_lanes=2, n_crossings=0), spec)
    (div,) = vm.of_class(MapClass.DIVIDER)
    mask = disk_mask(spec, div.points[len(div.points) // 2], 2.0)
    assert len(split_by_mask(div, mask)) == 2


def _rand_mask(rng):
    return BevMask(rng.random(SPEC.shape) < rng.random(), SPEC)


@given(st.integers(0, 2 ** 31))
def test_union_set_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = _rand_mask(rng), _rand_mask(rng), _rand_mask(rng)
    u = lambda *ms: multi_trip_union(ms).bits
    assert np.array_equal(u(a, b), u(b, a))
    assert np.array_equal(u(multi_trip_union([a, b]), c), u(a, multi_trip_union([b, c])))
    assert np.array_equal(u(a, a), a.bits)
    assert np.array_equal(u(a), a.bits)
    assert coverage_ratio(multi_trip_union([a, b, c])) >= max(map(coverage_ratio, (a, b, c)))


def test_union_halves_and_errors():
    X, _ = SPEC.pixel_centers()
    assert multi_trip_union([BevMask(X < 0, SPEC), BevMask(X >= 0, SPEC)]).bits.all()
    with pytest.raises(ValueError):
        multi_trip_union([])
    with pytest.raises(ValueError):
        multi_trip_union([BevMask(X < 0, SPEC), BevMask(np.ones((2, 2), bool), BevSpec(0, 1, 0, 1, 2))])


def test_gen_trips_deterministic():
    a, b = gen_trips(7, 4, SPEC), gen_trips(7, 4, SPEC)
    assert len(a) == 4 and all(np.array_equal(x.bits, y.bits) for x, y in zip(a, b))
    assert not all(np.array_equal(a[0].bits, x.bits) for x in a[1:])
