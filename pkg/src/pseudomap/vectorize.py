"""Raster-to-vector conversion of postprocessed BEV segmentations."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (
    BevSpec, MapClass, MapElement, VectorMap, crop_to_range, point_segment_distance, resample,
)
from .raster import (
    BevMask, RasterClass, SemanticRaster, StructuringElement, connect_lane_fragments,
    connected_components, extract_boundary, remove_artifacts, skeletonize,
)


@dataclass(frozen=True)
class PixelPath:
    pixels: tuple  # ((row, col), ...)
    closed: bool = False

    def __len__(self):
        return len(self.pixels)

    def to_xy(self, spec: BevSpec) -> np.ndarray:
        p = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        return spec.pixel_to_xy(p[:, 0], p[:, 1])


@dataclass(frozen=True)
class VectorizeParams:
    eps1: float = 0.05                   # RDP initial threshold / step, meters
    max_points: int = 20                 # L
    kernel: StructuringElement = field(default_factory=lambda: StructuringElement("disk", 15))
    boundary_kernel: StructuringElement = field(
        default_factory=lambda: StructuringElement("disk", 5))
    min_area: int = 50
    thick_max: float = 12.0
    divider_gate: tuple = (0.5, math.radians(10.0))
    min_branch: int = 4                  # L_m, pixels
    margin: float = 2.0                  # meters
    min_length: float = 1.0              # meters; shorter line elements are dropped

    def __post_init__(self):
        if not self.eps1 > 0:
            raise ValueError("eps1 must be positive")
        if self.max_points < 2:
            raise ValueError("max_points must be >= 2")
        if self.margin < 0 or self.min_area < 0 or self.min_branch < 1:
            raise ValueError("invalid vectorize parameters")


# ---------------------------------------------------------------------------
# line tracing

_N4 = ((-1, 0), (0, -1), (0, 1), (1, 0))
_DIAG = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def _adjacency(pixels: set) -> dict:
    """m-adjacency: diagonal links only where no shared 4-neighbour exists."""
    adj = {}
    for r, c in pixels:
        nb = [(r + dr, c + dc) for dr, dc in _N4 if (r + dr, c + dc) in pixels]
        for dr, dc in _DIAG:
            q = (r + dr, c + dc)
            if q in pixels and (r + dr, c) not in pixels and (r, c + dc) not in pixels:
                nb.append(q)
        adj[(r, c)] = sorted(nb)
    return adj


def _components(nodes: set, adj: dict) -> list[list]:
    seen = set()
    comps = []
    for start in sorted(nodes):
        if start in seen:
            continue
        seen.add(start)
        comp = [start]
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for q in adj[p]:
                if q in nodes and q not in seen:
                    seen.add(q)
                    comp.append(q)
                    queue.append(q)
        comps.append(comp)
    return comps


def _bfs(start, nodes: set, adj: dict):
    dist = {start: 0}
    parent = {start: None}
    queue = deque([start])
    while queue:
        p = queue.popleft()
        for q in adj[p]:
            if q in nodes and q not in dist:
                dist[q] = dist[p] + 1
                parent[q] = p
                queue.append(q)
    return dist, parent


def _farthest(dist: dict, candidates) -> tuple:
    return min(candidates, key=lambda p: (-dist.get(p, -1), p))


def _walk(parent: dict, end) -> list:
    path = []
    while end is not None:
        path.append(end)
        end = parent[end]
    return path


def _longest_path(nodes: set, adj: dict) -> list:
    degree = {p: sum(q in nodes for q in adj[p]) for p in nodes}
    ends = sorted(p for p in nodes if degree[p] <= 1)
    if not ends:
        # cycle: open at the smallest pixel, walk the rest from one of its neighbours
        start = min(nodes)
        rest = nodes - {start}
        if not rest:
            return [start]
        first = min(q for q in adj[start] if q in nodes)
        dist, parent = _bfs(first, rest, adj)
        far = _farthest(dist, dist.keys())
        return [start] + _walk(parent, far)[::-1]
    dist, _ = _bfs(ends[0], nodes, adj)
    a = _farthest(dist, [e for e in ends if e in dist])
    dist, parent = _bfs(a, nodes, adj)
    b = _farthest(dist, [e for e in ends if e in dist])
    path = _walk(parent, b)  # b -> a
    return path if path[0] <= path[-1] else path[::-1]


def trace_lines(skeleton: np.ndarray, min_branch: int = 4) -> list[PixelPath]:
    """Decompose a 1-pixel-wide skeleton into ordered pixel paths.

    Each component contributes its longest endpoint-to-endpoint path; the
    pixels left over form new components that are traced the same way when
    they hold at least ``min_branch`` pixels.
    """
    rows, cols = np.nonzero(np.asarray(skeleton, dtype=bool))
    pixels = set(zip(rows.tolist(), cols.tolist()))
    adj = _adjacency(pixels)
    out: list[PixelPath] = []
    pending = [set(c) for c in _components(pixels, adj)]
    first = True
    while pending:
        nxt = []
        for comp in pending:
            if not first and len(comp) < min_branch:
                continue
            path = _longest_path(comp, adj)
            out.append(PixelPath(tuple(path)))
            rest = comp - set(path)
            nxt.extend(set(c) for c in _components(rest, adj))
        pending = nxt
        first = False
    return out


# ---------------------------------------------------------------------------
# Ramer-Douglas-Peucker


def rdp(points, eps: float) -> np.ndarray:
    """Indices of the vertices kept by RDP at tolerance ``eps`` (endpoints always)."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    if n <= 2:
        return np.arange(n)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = point_segment_distance(p[i + 1:j], p[i], p[j])
        k = int(np.argmax(d))
        if d[k] > eps:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return np.flatnonzero(keep)


def _rdp_ring(p: np.ndarray, eps: float) -> np.ndarray:
    n = len(p)
    if n <= 3:
        return np.arange(n)
    k = int(np.argmax(np.hypot(*(p - p[0]).T)))
    if k == 0:
        return np.array([0])
    first = rdp(p[:k + 1], eps)
    second = rdp(np.vstack([p[k:], p[:1]]), eps) + k
    return np.concatenate([first, second[1:-1]])


def rdp_iterative(points, eps1: float, max_points: int, closed: bool = False,
                  return_eps: bool = False):
    """RDP at eps1, 2*eps1, 3*eps1, ... until at most ``max_points`` remain."""
    if not eps1 > 0:
        raise ValueError("eps1 must be positive")
    p = np.asarray(points, dtype=float)
    simplify = _rdp_ring if closed else rdp
    t = 1
    while True:
        idx = simplify(p, eps1 * t)
        if len(idx) <= max_points or (closed and len(idx) <= 3):
            break
        t += 1
    out = p[idx]
    return (out, eps1 * t) if return_eps else out


# ---------------------------------------------------------------------------
# border following

# counter-clockwise as drawn (row axis points down), starting east
_CCW = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def _follow_outer_border(img: np.ndarray, start: tuple) -> list:
    """Suzuki-Abe border following from an outer-border start pixel.

    ``img`` is a zero-padded binary array; ``start``'s west neighbour is 0.
    """
    h, w = img.shape

    def nz(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and img[p]

    def idx(center, p):
        return _CCW.index((p[0] - center[0], p[1] - center[1]))

    i, j = start
    prev = (i, j - 1)
    # 3.1: clockwise from prev around start
    k0 = idx(start, prev)
    first = None
    for s in range(8):
        d = _CCW[(k0 - s) % 8]
        q = (i + d[0], j + d[1])
        if nz(q):
            first = q
            break
    if first is None:
        return [start]
    p2, p3 = first, start
    border = []
    while True:
        k = idx(p3, p2)
        p4 = None
        for s in range(1, 9):
            d = _CCW[(k + s) % 8]
            q = (p3[0] + d[0], p3[1] + d[1])
            if nz(q):
                p4 = q
                break
        border.append(p3)
        if p4 == start and p3 == first:
            break
        p2, p3 = p3, p4
    return border


def trace_polygons(grid: np.ndarray) -> list[PixelPath]:
    """Closed outer borders of each 8-connected foreground component (holes ignored)."""
    g = np.asarray(grid, dtype=bool)
    labels, areas = connected_components(g)
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = np.pad(labels[sl] == k, 1)
        rows, cols = np.nonzero(comp)
        start = (int(rows[0]), int(cols[0]))
        border = _follow_outer_border(comp, start)
        r0, c0 = sl[0].start - 1, sl[1].start - 1
        out.append(PixelPath(tuple((r + r0, c + c0) for r, c in border), closed=True))
    return out


# ---------------------------------------------------------------------------
# divider filtering


def _tangents(p: np.ndarray) -> np.ndarray:
    t = np.gradient(p, axis=0)
    n = np.linalg.norm(t, axis=1, keepdims=True)
    return t / np.where(n > 0, n, 1.0)


def filter_dividers(dividers, boundaries, crossings, gate=(0.5, math.radians(10.0)),
                    n_samples: int = 50, fraction: float = 0.5) -> list[MapElement]:
    """Drop dividers lying mostly close to and parallel with boundaries or crossings."""
    dist_max, ang_max = gate
    segs = []
    for e in list(boundaries) + list(crossings):
        pts = np.asarray(e.points, dtype=float)
        if e.closed:
            pts = np.vstack([pts, pts[:1]])
        for a, b in zip(pts[:-1], pts[1:]):
            if not np.array_equal(a, b):
                segs.append((a, b))
    if not segs:
        return list(dividers)
    A = np.array([a for a, _ in segs])
    AB = np.array([b for _, b in segs]) - A
    L2 = np.einsum("ij,ij->i", AB, AB)
    dirs = AB / np.sqrt(L2)[:, None]
    kept = []
    cos_min = math.cos(ang_max)
    for d in dividers:
        try:
            s = resample(d.points, n_samples)
        except ValueError:
            kept.append(d)
            continue
        tan = _tangents(s)
        D = s[:, None, :] - A[None]
        t = np.clip(np.einsum("nsk,sk->ns", D, AB) / L2, 0.0, 1.0)
        E = D - t[..., None] * AB
        dist = np.sqrt(np.einsum("nsk,nsk->ns", E, E))
        near = np.argmin(dist, axis=1)
        cosang = np.abs(np.sum(tan * dirs[near], axis=1))
        gated = (dist[np.arange(len(s)), near] <= dist_max) & (cosang >= cos_min - 1e-12)
        if gated.sum() < fraction * len(s):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# full pipeline


def _lines(skel, spec, params, cls) -> list[MapElement]:
    out = []
    for path in trace_lines(skel, params.min_branch):
        if len(path) < 2:
            continue
        xy = path.to_xy(spec)
        simp = rdp_iterative(xy, params.eps1, params.max_points)
        if len(simp) < 2 or np.hypot(*np.diff(xy, axis=0).T).sum() < params.min_length:
            continue
        out.append(MapElement(cls, simp))
    return out


def _polygons(grid, spec, params) -> list[MapElement]:
    out = []
    for path in trace_polygons(grid):
        if len(path) < 3:
            continue
        ring = rdp_iterative(path.to_xy(spec), params.eps1, params.max_points, closed=True)
        if len(ring) < 3:
            continue
        try:
            out.append(MapElement(MapClass.PED_CROSSING, ring))
        except ValueError:
            continue
    return out


def _pad_raster(raster: SemanticRaster, margin: float) -> SemanticRaster:
    px = int(round(margin * raster.spec.resolution))
    if px == 0:
        return raster
    spec = raster.spec.expanded(px / raster.spec.resolution)
    return SemanticRaster(np.pad(raster.classes, px, mode="edge"), spec)


def _crop_raster(classes: np.ndarray, src: BevSpec, dst: BevSpec) -> np.ndarray:
    r0 = int(round((src.y_max - dst.y_max) * src.resolution))
    c0 = int(round((dst.x_min - src.x_min) * src.resolution))
    return classes[r0:r0 + dst.height, c0:c0 + dst.width]


def vectorize_bev(raster: SemanticRaster, params: VectorizeParams | None = None,
                  out_spec: BevSpec | None = None, frame: str = "") -> tuple[VectorMap, BevMask]:
    """Semantic BEV raster -> (vector map, observed mask).

    Without ``out_spec`` the raster is extended by ``params.margin`` with edge
    replication and results are cropped back to its own range. With
    ``out_spec`` the raster is taken to already include the margin.
    """
    params = params or VectorizeParams()
    if out_spec is None:
        out_spec = raster.spec
        work = _pad_raster(raster, params.margin)
    else:
        if out_spec.resolution != raster.spec.resolution:
            raise ValueError("output spec must share the raster resolution")
        work = raster
    spec = work.spec
    clean = remove_artifacts(work, params.min_area, params.thick_max)
    c = clean.classes

    boundary_skel = skeletonize(extract_boundary(clean, params.boundary_kernel))
    markings = c == RasterClass.LANE_MARKING
    road = (c == RasterClass.ROAD) | markings
    divider_skel = skeletonize(connect_lane_fragments(markings, params.kernel, road))

    boundaries = _lines(boundary_skel, spec, params, MapClass.BOUNDARY)
    dividers = _lines(divider_skel, spec, params, MapClass.DIVIDER)
    crossings = _polygons(c == RasterClass.PED_CROSSING, spec, params)
    dividers = filter_dividers(dividers, boundaries, crossings, params.divider_gate)

    vmap = crop_to_range(VectorMap(tuple(crossings + dividers + boundaries), frame, out_spec),
                         out_spec)
    mask = BevMask(_crop_raster(c, spec, out_spec) != RasterClass.UNOBSERVED, out_spec)
    return vmap, mask
