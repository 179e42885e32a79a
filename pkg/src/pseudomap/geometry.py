"""Metric-frame vector primitives: map elements, poses, resampling, Chamfer distance.

Coordinate convention (ego frame): x is lateral (right positive), y is
longitudinal (forward positive). Raster row 0 holds the maximum y.
Polygons are stored as open rings; the closing edge is implicit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError


class MapClass(enum.IntEnum):
    PED_CROSSING = 0
    DIVIDER = 1
    BOUNDARY = 2

    @property
    def key(self) -> str:
        return _CLASS_KEYS[self]

    @classmethod
    def from_key(cls, key: str) -> "MapClass":
        for c, k in _CLASS_KEYS.items():
            if k == key:
                return c
        raise ValueError(f"unknown map class {key!r}")


_CLASS_KEYS = {
    MapClass.PED_CROSSING: "ped_crossing",
    MapClass.DIVIDER: "divider",
    MapClass.BOUNDARY: "boundary",
}


class Kind(enum.Enum):
    POLYLINE = "polyline"
    POLYGON = "polygon"


def default_kind(cls: MapClass) -> Kind:
    return Kind.POLYGON if cls == MapClass.PED_CROSSING else Kind.POLYLINE


@dataclass(frozen=True)
class BevSpec:
    """Metric BEV range plus raster resolution (pixels per meter)."""

    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0
    resolution: float = 20.0

    def __post_init__(self):
        for name in ("x_min", "x_max", "y_min", "y_max", "resolution"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("empty BEV range")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        for extent in (self.x_max - self.x_min, self.y_max - self.y_min):
            n = extent * self.resolution
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"range {extent} m x {self.resolution} px/m is not integral")

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) * self.resolution))

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) * self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_resolution(self, resolution: float) -> "BevSpec":
        return BevSpec(self.x_min, self.x_max, self.y_min, self.y_max, resolution)

    def expanded(self, margin: float) -> "BevSpec":
        return BevSpec(self.x_min - margin, self.x_max + margin,
                       self.y_min - margin, self.y_max + margin, self.resolution)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (X, Y) arrays of shape (height, width) with pixel-center coordinates."""
        cols = np.arange(self.width)
        rows = np.arange(self.height)
        xs = self.x_min + (cols + 0.5) / self.resolution
        ys = self.y_max - (rows + 0.5) / self.resolution
        return np.meshgrid(xs, ys)

    def pixel_to_xy(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        x = self.x_min + (cols + 0.5) / self.resolution
        y = self.y_max - (rows + 0.5) / self.resolution
        return np.stack([x, y], axis=-1)

    def xy_to_pixel(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Integer (row, col) of the cell containing each point (may be out of range)."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        cols = np.floor((p[:, 0] - self.x_min) * self.resolution).astype(int)
        rows = np.floor((self.y_max - p[:, 1]) * self.resolution).astype(int)
        return rows, cols

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return ((p[:, 0] >= self.x_min - tol) & (p[:, 0] <= self.x_max + tol)
                & (p[:, 1] >= self.y_min - tol) & (p[:, 1] <= self.y_max + tol))

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "resolution": self.resolution}


@dataclass(frozen=True)
class Pose2:
    """Planar pose. ``heading`` is the forward direction, CCW from the +x axis."""

    x: float = 0.0
    y: float = 0.0
    heading: float = math.pi / 2

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def rotation(self) -> np.ndarray:
        # maps ego-frame vectors (x right, y forward) to world vectors
        phi = self.heading - math.pi / 2
        c, s = math.cos(phi), math.sin(phi)
        return np.array([[c, -s], [s, c]])

    def ego_to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation().T + np.array([self.x, self.y])

    def world_to_ego(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - np.array([self.x, self.y])) @ self.rotation()

    def compose(self, other: "Pose2") -> "Pose2":
        """``self ∘ other``: ``other`` expressed in the frame of ``self``."""
        xy = self.ego_to_world(np.array([other.x, other.y]))
        return Pose2(float(xy[0]), float(xy[1]), self.heading + other.heading - math.pi / 2)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


def _as_points(points) -> np.ndarray:
    p = np.array(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point")
    p.setflags(write=False)
    return p


@dataclass(frozen=True, eq=False)
class MapElement:
    cls: MapClass
    points: np.ndarray
    kind: Kind = None
    confidence: float | None = None

    def __post_init__(self):
        cls = MapClass(self.cls)
        object.__setattr__(self, "cls", cls)
        kind = default_kind(cls) if self.kind is None else Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ValueError("map element needs at least 2 points")
        if kind != default_kind(cls):
            raise ValueError(f"{cls.key} must be a {default_kind(cls).value}")
        if kind == Kind.POLYGON:
            if len(pts) < 3:
                raise ValueError("polygon needs at least 3 points")
            if np.array_equal(pts[0], pts[-1]):
                raise ValueError("polygon rings are stored open (first != last)")
        if self.confidence is not None:
            c = float(self.confidence)
            if not 0.0 <= c <= 1.0:
                raise ValueError("confidence outside [0, 1]")
            object.__setattr__(self, "confidence", c)

    @property
    def closed(self) -> bool:
        return self.kind == Kind.POLYGON

    def with_points(self, points) -> "MapElement":
        return MapElement(self.cls, points, self.kind, self.confidence)

    def with_confidence(self, confidence) -> "MapElement":
        return MapElement(self.cls, self.points, self.kind, confidence)

    def __eq__(self, other):
        if not isinstance(other, MapElement):
            return NotImplemented
        return (self.cls == other.cls and self.kind == other.kind
                and self.confidence == other.confidence
                and np.array_equal(self.points, other.points))

    def __hash__(self):
        return hash((self.cls, self.kind, self.confidence, self.points.tobytes()))


@dataclass(frozen=True)
class VectorMap:
    elements: tuple = ()
    frame: str = ""
    bev_range: BevSpec = field(default_factory=BevSpec)

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    def of_class(self, cls: MapClass) -> list[MapElement]:
        return [e for e in self.elements if e.cls == cls]

    def replace(self, elements) -> "VectorMap":
        return VectorMap(tuple(elements), self.frame, self.bev_range)


# ---------------------------------------------------------------------------
# resampling


def arc_lengths(points, closed: bool = False) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if closed:
        p = np.vstack([p, p[:1]])
    seg = np.hypot(*np.diff(p, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points, closed: bool = False) -> float:
    return float(arc_lengths(points, closed)[-1])


def resample(points, n: int, closed: bool = False) -> np.ndarray:
    """Arc-length-uniform resampling to exactly ``n`` points.

    Open polylines keep both endpoints exactly. Closed rings start at the
    first vertex and space ``n`` samples over the full perimeter, closing
    edge included, without repeating the start point.
    """
    if n < 2:
        raise ValueError("need at least 2 output points")
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 2:
        raise DegenerateGeometryError()
    ring = np.vstack([p, p[:1]]) if closed else p
    s = arc_lengths(ring)
    total = s[-1]
    if not total > 0:
        raise DegenerateGeometryError()
    keep = np.concatenate([[True], np.diff(s) > 0])
    ring, s = ring[keep], s[keep]
    if closed:
        t = np.arange(n) * (total / n)
    else:
        t = np.linspace(0.0, total, n)
    out = np.column_stack([np.interp(t, s, ring[:, 0]), np.interp(t, s, ring[:, 1])])
    out[0] = ring[0]
    if not closed:
        out[-1] = ring[-1]
    return out


def resample_element(e: MapElement, n: int) -> MapElement:
    return e.with_points(resample(e.points, n, e.closed))


# ---------------------------------------------------------------------------
# orderings / canonical form


def equivalent_orderings(points, closed: bool) -> list[np.ndarray]:
    """All point orderings describing the same geometry.

    Polylines: forward and reversed. Polygons: every cyclic shift in both
    orientations (2L sequences).
    """
    p = np.asarray(points, dtype=float)
    if not closed:
        return [p.copy(), p[::-1].copy()]
    out = []
    for direction in (p, p[::-1]):
        for k in range(len(p)):
            out.append(np.roll(direction, -k, axis=0))
    return out


def signed_area(points) -> float:
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def canonical_points(points, closed: bool) -> np.ndarray:
    """Pick one representative among the equivalent orderings.

    Open polylines run from the lexicographically smaller endpoint; rings are
    counter-clockwise starting at the lexicographically smallest vertex.
    """
    p = np.asarray(points, dtype=float)
    if not closed:
        r = p[::-1]
        # endpoints first; coincident endpoints fall back to the whole sequence
        if (tuple(r[-1]), tuple(r.ravel())) > (tuple(p[-1]), tuple(p.ravel())):
            return p.copy()
        return r.copy()
    if signed_area(p) < 0:
        p = p[::-1]
    k = min(range(len(p)), key=lambda i: (p[i, 0], p[i, 1]))
    return np.roll(p, -k, axis=0)


# ---------------------------------------------------------------------------
# distances


def chamfer_distance(a: MapElement, b: MapElement, n_samples: int = 100) -> float:
    """Symmetric mean of the two directed mean nearest-sample distances."""
    if a.kind != b.kind:
        raise ValueError("chamfer distance needs elements of the same kind")
    pa = resample(canonical_points(a.points, a.closed), n_samples, a.closed)
    pb = resample(canonical_points(b.points, b.closed), n_samples, b.closed)
    return chamfer_points(pa, pb)


def chamfer_points(pa: np.ndarray, pb: np.ndarray) -> float:
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points ``p`` (..., 2) to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(p - a).T) if p.ndim == 2 else np.linalg.norm(p - a, axis=-1)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    c = a + t[..., None] * ab
    return np.linalg.norm(p - c, axis=-1)


def point_polyline_distance(p, points, closed: bool = False) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    pts = np.asarray(points, dtype=float)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    best = np.full(p.shape[:-1], np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        best = np.minimum(best, point_segment_distance(p, a, b))
    return best


def point_in_polygon(p, ring) -> np.ndarray:
    """Even-odd test for points ``p`` (..., 2) against an open ring."""
    p = np.asarray(p, dtype=float)
    ring = np.asarray(ring, dtype=float)
    x, y = p[..., 0], p[..., 1]
    inside = np.zeros(p.shape[:-1], dtype=bool)
    j = len(ring) - 1
    for i in range(len(ring)):
        xi, yi = ring[i]
        xj, yj = ring[j]
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < x_int)
        j = i
    return inside


def fill_polygon(ring, spec: BevSpec) -> np.ndarray:
    """Scanline even-odd fill: True where the pixel center lies inside ``ring``."""
    ring = np.asarray(ring, dtype=float)
    h, w = spec.shape
    out = np.zeros((h, w), dtype=bool)
    res = spec.resolution
    xs_per_row: dict[int, list[float]] = {}
    prev = np.roll(ring, 1, axis=0)
    for (xi, yi), (xj, yj) in zip(ring, prev):
        if yi == yj:
            continue
        lo, hi = min(yi, yj), max(yi, yj)
        # rows whose center y satisfies lo < y <= hi  (matches the (yi > y) != (yj > y) rule)
        r_first = int(math.ceil((spec.y_max - hi) * res - 0.5)) - 1
        r_last = int(math.floor((spec.y_max - lo) * res - 0.5)) + 1
        for r in range(max(r_first, 0), min(r_last, h - 1) + 1):
            y = spec.y_max - (r + 0.5) / res
            if not ((yi > y) != (yj > y)):
                continue
            xs_per_row.setdefault(r, []).append((xj - xi) * (y - yi) / (yj - yi) + xi)
    cx = spec.x_min + (np.arange(w) + 0.5) / res
    for r, xs in xs_per_row.items():
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            # odd crossing count to the right  <=>  a <= x < b
            c0, c1 = np.searchsorted(cx, [a, b], side="left")
            out[r, c0:c1] = True
    return out


# ---------------------------------------------------------------------------
# cropping


def _clip_segment(a, b, spec: BevSpec):
    """Liang-Barsky clip of segment ab; returns (t0, t1) or None."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, a[0] - spec.x_min), (dx, spec.x_max - a[0]),
                 (-dy, a[1] - spec.y_min), (dy, spec.y_max - a[1])):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return t0, t1


def _clamp(pt, spec):
    return np.array([min(max(pt[0], spec.x_min), spec.x_max),
                     min(max(pt[1], spec.y_min), spec.y_max)])


def clip_polyline(points, spec: BevSpec) -> list[np.ndarray]:
    pts = np.asarray(points, dtype=float)
    fragments: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    for a, b in zip(pts[:-1], pts[1:]):
        res = _clip_segment(a, b, spec)
        if res is None:
            if current:
                fragments.append(current)
                current = []
            continue
        t0, t1 = res
        pa = a.copy() if t0 == 0 else _clamp(a + t0 * (b - a), spec)
        pb = b.copy() if t1 == 1 else _clamp(a + t1 * (b - a), spec)
        if current and (t0 > 0 or not np.array_equal(current[-1], pa)):
            fragments.append(current)
            current = []
        if not current:
            current = [pa]
        if not np.array_equal(current[-1], pb):
            current.append(pb)
        if t1 < 1:
            fragments.append(current)
            current = []
    if current:
        fragments.append(current)
    return [np.array(f) for f in fragments if len(f) >= 2]


def clip_polygon(ring, spec: BevSpec) -> np.ndarray | None:
    """Sutherland-Hodgman clip of an open ring against the BEV rectangle."""
    poly = [np.asarray(p, dtype=float) for p in ring]
    edges = (
        (lambda p: p[0] >= spec.x_min, lambda a, b: _x_cross(a, b, spec.x_min)),
        (lambda p: p[0] <= spec.x_max, lambda a, b: _x_cross(a, b, spec.x_max)),
        (lambda p: p[1] >= spec.y_min, lambda a, b: _y_cross(a, b, spec.y_min)),
        (lambda p: p[1] <= spec.y_max, lambda a, b: _y_cross(a, b, spec.y_max)),
    )
    for inside, cross in edges:
        if not poly:
            break
        out = []
        prev = poly[-1]
        for cur in poly:
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
            prev = cur
        poly = out
    cleaned = []
    for p in poly:
        p = _clamp(p, spec)
        if not cleaned or not np.array_equal(cleaned[-1], p):
            cleaned.append(p)
    while len(cleaned) > 1 and np.array_equal(cleaned[0], cleaned[-1]):
        cleaned.pop()
    if len(cleaned) < 3 or abs(signed_area(np.array(cleaned))) < 1e-12:
        return None
    return np.array(cleaned)


def _x_cross(a, b, x):
    t = (x - a[0]) / (b[0] - a[0])
    return np.array([x, a[1] + t * (b[1] - a[1])])


def _y_cross(a, b, y):
    t = (y - a[1]) / (b[1] - a[1])
    return np.array([a[0] + t * (b[0] - a[0]), y])


def crop_element(e: MapElement, spec: BevSpec) -> list[MapElement]:
    if e.closed:
        ring = clip_polygon(e.points, spec)
        return [] if ring is None else [e.with_points(ring)]
    return [e.with_points(f) for f in clip_polyline(e.points, spec)]


def crop_to_range(vmap: VectorMap, spec: BevSpec | None = None) -> VectorMap:
    spec = vmap.bev_range if spec is None else spec
    out = []
    for e in vmap.elements:
        out.extend(crop_element(e, spec))
    return VectorMap(tuple(out), vmap.frame, spec)
