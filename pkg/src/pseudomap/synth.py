"""Deterministic synthetic scenes: GT vector maps, their rasterization, occlusion masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    BevSpec, MapClass, MapElement, Pose2, VectorMap, crop_to_range, fill_polygon,
)
from .raster import BevMask, RasterClass, SemanticRaster

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (the state increment is done by the caller)."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Counter-based generator: output k is splitmix64(seed + k * golden)."""

    GOLDEN = 0x9E3779B97F4A7C15

    def __init__(self, seed: int, stream: int = 0):
        self.state = splitmix64((seed & _MASK64) ^ splitmix64(stream * self.GOLDEN))

    def next_u64(self) -> int:
        self.state = (self.state + self.GOLDEN) & _MASK64
        return splitmix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return lo + self.next_u64() % (hi - lo)


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    n_lanes: int = 2
    lane_width: float = 3.5
    curvature: float = 0.0
    n_crossings: int = 1
    dash_pattern: tuple = (3.0, 6.0)   # (on, off) meters; off = 0 draws solid markings

    def __post_init__(self):
        if self.n_lanes < 1:
            raise ValueError("n_lanes must be >= 1")
        if not self.lane_width > 0:
            raise ValueError("lane_width must be positive")
        if self.n_crossings < 0:
            raise ValueError("n_crossings must be >= 0")
        on, off = self.dash_pattern
        if not on > 0 or off < 0:
            raise ValueError("invalid dash pattern")


@dataclass(frozen=True)
class OcclusionParams:
    seed: int = 0
    n_blobs: int = 0
    blob_radius: tuple = (1.0, 3.0)
    frustum_fov: float = 2 * math.pi
    frustum_range: float = math.inf

    def __post_init__(self):
        lo, hi = self.blob_radius
        if not (0 < lo <= hi):
            raise ValueError("blob radii must be positive")


# ---------------------------------------------------------------------------
# road corridor


class _Corridor:
    """Constant-curvature centerline through (x0, 0) heading +y; positive curvature turns right."""

    def __init__(self, x0: float, curvature: float):
        self.x0 = x0
        self.k = curvature

    def center(self, s):
        s = np.asarray(s, dtype=float)
        if self.k == 0:
            return np.column_stack([np.full_like(s, self.x0), s])
        k = self.k
        return np.column_stack([self.x0 + (1 - np.cos(k * s)) / k, np.sin(k * s) / k])

    def right(self, s):
        th = self.k * np.asarray(s, dtype=float)
        return np.column_stack([np.cos(th), -np.sin(th)])

    def offset(self, s, d):
        return self.center(s) + d * self.right(s)


def _s_range(spec: BevSpec, k: float, extra: float = 5.0):
    lo, hi = spec.y_min - extra, spec.y_max + extra
    if k != 0:
        lim = 0.45 * math.pi / abs(k)
        lo, hi = max(lo, -lim), min(hi, lim)
    return lo, hi


def _sample(lo, hi, step=0.5):
    n = max(int(math.ceil((hi - lo) / step)), 1)
    return np.linspace(lo, hi, n + 1)


def gen_scene(params: SceneParams, spec: BevSpec | None = None) -> VectorMap:
    """Road corridor with 2 boundaries, n_lanes-1 dividers and crossings, cropped to ``spec``."""
    spec = spec or BevSpec()
    rng = SplitMix64(params.seed, stream=1)
    width = params.n_lanes * params.lane_width
    half = width / 2
    lw = params.lane_width
    x0 = rng.uniform(-half + lw / 2, half - lw / 2) if params.n_lanes > 1 else 0.0
    road = _Corridor(x0, params.curvature)
    s_lo, s_hi = _s_range(spec, params.curvature)
    s = _sample(s_lo, s_hi)

    inset, clearance = 0.5, 0.5
    crossings = []  # (s_center, depth)
    attempts = 0
    while len(crossings) < params.n_crossings and attempts < 100:
        attempts += 1
        sc = rng.uniform(spec.y_min + 6.0, spec.y_max - 6.0)
        depth = rng.uniform(3.0, 4.0)
        if all(abs(sc - o) > 12.0 for o, _ in crossings):
            crossings.append((sc, depth))
    crossings.sort()

    elements = []
    for sc, depth in crossings:
        a, b = sc - depth / 2, sc + depth / 2
        d = half - inset
        ring = np.vstack([road.offset([a], -d), road.offset([a], d),
                          road.offset([b], d), road.offset([b], -d)])
        elements.append(MapElement(MapClass.PED_CROSSING, ring))

    blocked = [(sc - depth / 2 - clearance, sc + depth / 2 + clearance) for sc, depth in crossings]
    for k in range(1, params.n_lanes):
        d = -half + k * lw
        for lo, hi in _free_intervals(s_lo, s_hi, blocked):
            if hi - lo < 2.0:
                continue
            elements.append(MapElement(MapClass.DIVIDER, road.offset(_sample(lo, hi), d)))

    for d in (-half, half):
        elements.append(MapElement(MapClass.BOUNDARY, road.offset(s, d)))

    return crop_to_range(VectorMap(tuple(elements), f"scene-{params.seed}", spec), spec)


def _free_intervals(lo, hi, blocked):
    out = []
    cur = lo
    for a, b in sorted(blocked):
        if a > cur:
            out.append((cur, min(a, hi)))
        cur = max(cur, b)
    if cur < hi:
        out.append((cur, hi))
    return out


# ---------------------------------------------------------------------------
# rasterization


def _arc_position(pts: np.ndarray, line: np.ndarray):
    """Distance to polyline and arc length of the closest point, per pixel."""
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(line, axis=0).T))])
    best = np.full(len(pts), np.inf)
    pos = np.zeros(len(pts))
    for i, (a, b) in enumerate(zip(line[:-1], line[1:])):
        ab = b - a
        L2 = float(ab @ ab)
        if L2 == 0:
            continue
        t = np.clip(((pts - a) @ ab) / L2, 0, 1)
        d = np.hypot(*(pts - (a + t[:, None] * ab)).T)
        better = d < best
        best[better] = d[better]
        pos[better] = cum[i] + t[better] * math.sqrt(L2)
    return best, pos


def rasterize_gt(vmap: VectorMap, spec: BevSpec | None = None, dash_pattern=(3.0, 6.0),
                 marking_width: float = 0.15) -> SemanticRaster:
    """Paint a GT map into a semantic raster (Outside / Road / LaneMarking / PedCrossing).

    Road is the area enclosed by the first two boundaries. Dividers become
    dashed markings of ``marking_width``; crossings are filled polygons.
    """
    spec = spec or vmap.bev_range
    X, Y = spec.pixel_centers()
    P = np.stack([X, Y], axis=-1)
    out = np.full(spec.shape, int(RasterClass.OUTSIDE), dtype=np.uint8)

    bounds = vmap.of_class(MapClass.BOUNDARY)
    if len(bounds) >= 2:
        b1, b2 = bounds[0].points, bounds[1].points
        if np.linalg.norm(b1[-1] - b2[-1]) > np.linalg.norm(b1[-1] - b2[0]):
            b2 = b2[::-1]
        ring = np.vstack([b1, b2[::-1]])
        out[fill_polygon(ring, spec)] = int(RasterClass.ROAD)

    on, off = dash_pattern if dash_pattern is not None else (1.0, 0.0)
    half_w = marking_width / 2
    res = spec.resolution
    for e in vmap.of_class(MapClass.DIVIDER):
        line = e.points
        lo = np.floor((line.min(axis=0) - half_w - 1 / res - [spec.x_min, spec.y_min]) * res)
        hi = np.ceil((line.max(axis=0) + half_w + 1 / res - [spec.x_min, spec.y_min]) * res)
        c0, c1 = int(max(lo[0], 0)), int(min(hi[0], spec.width))
        r0 = int(max(spec.height - hi[1], 0))
        r1 = int(min(spec.height - lo[1], spec.height))
        if c1 <= c0 or r1 <= r0:
            continue
        sub = P[r0:r1, c0:c1].reshape(-1, 2)
        d, pos = _arc_position(sub, line)
        hit = d <= half_w
        if off > 0:
            hit &= np.mod(pos, on + off) < on
        block = out[r0:r1, c0:c1].reshape(-1)
        block[hit] = int(RasterClass.LANE_MARKING)
        out[r0:r1, c0:c1] = block.reshape(r1 - r0, c1 - c0)

    for e in vmap.of_class(MapClass.PED_CROSSING):
        out[fill_polygon(e.points, spec)] = int(RasterClass.PED_CROSSING)
    return SemanticRaster(out, spec)


# ---------------------------------------------------------------------------
# occlusion


def frustum_region(pose: Pose2, spec: BevSpec, fov: float, max_range: float) -> np.ndarray:
    X, Y = spec.pixel_centers()
    dx, dy = X - pose.x, Y - pose.y
    dist = np.hypot(dx, dy)
    inside = dist < max_range
    if fov < 2 * math.pi:
        fwd = (math.cos(pose.heading), math.sin(pose.heading))
        cosang = np.where(dist > 0, (dx * fwd[0] + dy * fwd[1]) / np.where(dist > 0, dist, 1), 1.0)
        inside &= cosang >= math.cos(fov / 2) - 1e-12
    return inside


def gen_occlusion(params: OcclusionParams, pose: Pose2, spec: BevSpec) -> BevMask:
    """Observed = camera fan from ``pose`` minus random disk occluders."""
    observed = frustum_region(pose, spec, params.frustum_fov, params.frustum_range)
    rng = SplitMix64(params.seed, stream=2)
    X, Y = spec.pixel_centers()
    for _ in range(params.n_blobs):
        cx = rng.uniform(spec.x_min, spec.x_max)
        cy = rng.uniform(spec.y_min, spec.y_max)
        r = rng.uniform(*params.blob_radius)
        observed &= (X - cx) ** 2 + (Y - cy) ** 2 > r * r
    return BevMask(observed, spec)


def disk_mask(spec: BevSpec, center, radius: float) -> BevMask:
    """Everything observed except one disk (a parked-car stand-in)."""
    X, Y = spec.pixel_centers()
    return BevMask((X - center[0]) ** 2 + (Y - center[1]) ** 2 > radius * radius, spec)


def multi_trip_union(masks) -> BevMask:
    masks = list(masks)
    if not masks:
        raise ValueError("no masks to merge")
    spec = masks[0].spec
    bits = np.zeros(spec.shape, dtype=bool)
    for m in masks:
        if m.spec != spec:
            raise ValueError("mask spec mismatch")
        bits |= m.bits
    return BevMask(bits, spec)


def gen_trips(seed: int, n_trips: int, spec: BevSpec, n_blobs: int | None = None
              ) -> list[BevMask]:
    """One occlusion mask per trip; trips differ in pose, field of view, range and occluders."""
    rng = SplitMix64(seed, stream=3)
    masks = []
    for k in range(n_trips):
        heading = math.pi / 2 if rng.random() < 0.7 else -math.pi / 2
        pose = Pose2(rng.uniform(-3, 3), rng.uniform(-10, 10), heading)
        params = OcclusionParams(
            seed=(seed * 1000003 + k) & _MASK64,
            n_blobs=rng.integers(2, 7) if n_blobs is None else n_blobs,
            blob_radius=(1.0, 3.5),
            frustum_fov=math.radians(rng.uniform(90.0, 240.0)),
            frustum_range=rng.uniform(15.0, 40.0),
        )
        masks.append(gen_occlusion(params, pose, spec))
    return masks


def trip_poses(seed: int, n_trips: int) -> list[Pose2]:
    """Trip 0 is the ego pose; later trips start from random poses along the corridor."""
    rng = SplitMix64(seed, stream=4)
    poses = [Pose2()]
    for _ in range(1, n_trips):
        heading = math.pi / 2 if rng.random() < 0.5 else -math.pi / 2
        poses.append(Pose2(rng.uniform(-3, 3), rng.uniform(-20, 20), heading))
    return poses


def trip_masks(seed: int, n_trips: int, spec: BevSpec, fov: float = 2 * math.pi,
               n_blobs: int = 0, frustum_range: float = math.inf) -> list[BevMask]:
    """Per-trip masks sharing one occlusion setting; trips differ in pose and occluders."""
    return [
        gen_occlusion(OcclusionParams(seed=(seed * 1000003 + k) & _MASK64, n_blobs=n_blobs,
                                      frustum_fov=fov, frustum_range=frustum_range), pose, spec)
        for k, pose in enumerate(trip_poses(seed, n_trips))
    ]
