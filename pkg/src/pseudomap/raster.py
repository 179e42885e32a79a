"""Raster-domain cleanup of semantic BEV renderings.

All grids are numpy arrays indexed ``[row, col]``; row 0 is the far (max y)
edge of the BEV range. Connectivity is 8-neighbourhood throughout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import BevSpec


class RasterClass(enum.IntEnum):
    UNOBSERVED = 0
    ROAD = 1
    OUTSIDE = 2
    LANE_MARKING = 3
    PED_CROSSING = 4


PALETTE = {
    RasterClass.UNOBSERVED: (0, 0, 0),
    RasterClass.ROAD: (128, 128, 128),
    RasterClass.OUTSIDE: (135, 206, 250),
    RasterClass.LANE_MARKING: (0, 0, 139),
    RasterClass.PED_CROSSING: (255, 165, 0),
}

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class SemanticRaster:
    classes: np.ndarray
    spec: BevSpec

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.shape != self.spec.shape:
            raise ValueError(f"raster shape {c.shape} does not match spec {self.spec.shape}")
        if c.size and (c.min() < 0 or c.max() > max(RasterClass)):
            raise ValueError("unknown class id in raster")
        c = c.astype(np.uint8, copy=True)
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    def mask(self) -> "BevMask":
        return BevMask(self.classes != RasterClass.UNOBSERVED, self.spec)

    def __eq__(self, other):
        return (isinstance(other, SemanticRaster) and self.spec == other.spec
                and np.array_equal(self.classes, other.classes))


@dataclass(frozen=True, eq=False)
class BevMask:
    """Per-pixel observed flag (True = observed, i.e. not masked)."""

    bits: np.ndarray
    spec: BevSpec

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool, copy=True)
        if b.shape != self.spec.shape:
            raise ValueError(f"mask shape {b.shape} does not match spec {self.spec.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def full(cls, spec: BevSpec, observed: bool = True) -> "BevMask":
        return cls(np.full(spec.shape, observed), spec)

    def observed_at(self, points) -> np.ndarray:
        rows, cols = self.spec.xy_to_pixel(points)
        h, w = self.bits.shape
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        out = np.zeros(len(rows), dtype=bool)
        out[ok] = self.bits[rows[ok], cols[ok]]
        return out

    def __eq__(self, other):
        return (isinstance(other, BevMask) and self.spec == other.spec
                and np.array_equal(self.bits, other.bits))


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "square"   # "square" | "disk"
    size: int = 3

    def __post_init__(self):
        if self.shape not in ("square", "disk"):
            raise ValueError(f"unknown element shape {self.shape!r}")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError("element size must be odd and >= 1")

    def footprint(self) -> np.ndarray:
        r = self.size // 2
        if self.shape == "square":
            return np.ones((self.size, self.size), dtype=bool)
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        return (xx * xx + yy * yy) <= r * r + r  # r*r + r keeps the 4 axis tips full


# ---------------------------------------------------------------------------
# components and morphology


def connected_components(grid: np.ndarray, value=None) -> tuple[np.ndarray, list[int]]:
    """8-connected labelling.

    ``value`` selects pixels equal to a class id; otherwise ``grid`` is taken
    as a boolean foreground. Labels 1..n follow raster-scan order of each
    component's first pixel. Returns (labels, areas) with ``areas[k-1]`` the
    pixel count of label k.
    """
    fg = np.asarray(grid) == value if value is not None else np.asarray(grid, dtype=bool)
    labels, n = ndimage.label(fg, structure=EIGHT)
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:].tolist()
    return labels, areas


def morphology(grid: np.ndarray, element: StructuringElement, mode: str) -> np.ndarray:
    """Binary morphology with background padding at the border."""
    g = np.asarray(grid, dtype=bool)
    fp = element.footprint()
    if mode == "dilate":
        return ndimage.binary_dilation(g, structure=fp, border_value=0)
    if mode == "erode":
        return ndimage.binary_erosion(g, structure=fp, border_value=0)
    if mode == "open":
        return morphology(morphology(g, element, "erode"), element, "dilate")
    if mode == "close":
        return morphology(morphology(g, element, "dilate"), element, "erode")
    raise ValueError(f"unknown morphology mode {mode!r}")


def _neighbour_counts(classes: np.ndarray, component: np.ndarray) -> dict[int, int]:
    """Count the 8-neighbour pixels of ``component`` by class (outside the component)."""
    ring = ndimage.binary_dilation(component, structure=EIGHT) & ~component
    vals, counts = np.unique(classes[ring], return_counts=True)
    return dict(zip(vals.tolist(), counts.tolist()))


def inscribed_width(component: np.ndarray) -> float:
    """Width in pixels of the largest inscribed square-ish stroke (1 for a thin line)."""
    if not component.any():
        return 0.0
    edt = ndimage.distance_transform_edt(np.pad(component, 1))
    return float(2.0 * edt.max() - 1.0)


def remove_artifacts(raster: SemanticRaster, min_area: int = 50,
                     thick_max: float = 12.0) -> SemanticRaster:
    """Reassign small misclassified segments and drop over-thick lane markings.

    Small components enclosed by a single class take that class. Small
    components touching several classes go to the class with the most
    adjacent pixels; a tie for the maximum goes to Unobserved.
    """
    src = raster.classes
    out = src.copy()
    for cls in (RasterClass.ROAD, RasterClass.OUTSIDE, RasterClass.LANE_MARKING,
                RasterClass.PED_CROSSING):
        labels, areas = connected_components(src, int(cls))
        objects = ndimage.find_objects(labels)
        for k, area in enumerate(areas, start=1):
            sl = _padded_slice(objects[k - 1], src.shape)
            comp = labels[sl] == k
            if area < min_area:
                counts = _neighbour_counts(src[sl], comp)
                if not counts:
                    continue
                best = max(counts.values())
                winners = sorted(c for c, n in counts.items() if n == best)
                target = winners[0] if len(winners) == 1 else int(RasterClass.UNOBSERVED)
                out[sl][comp] = target
            elif cls == RasterClass.LANE_MARKING and inscribed_width(comp) > thick_max:
                out[sl][comp] = int(RasterClass.ROAD)
    return SemanticRaster(out, raster.spec)


def _padded_slice(sl, shape, pad=1):
    return tuple(slice(max(s.start - pad, 0), min(s.stop + pad, n)) for s, n in zip(sl, shape))


def _dilate8(g: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(g, structure=EIGHT, border_value=0)


def extract_boundary(raster: SemanticRaster,
                     element: StructuringElement = StructuringElement("disk", 5)) -> np.ndarray:
    """Road pixels 8-adjacent to the (smoothed) Outside region.

    The Outside mask is opened then closed with ``element`` before the border
    is taken. Road next to Unobserved only is never boundary.
    """
    c = raster.classes
    outside = c == RasterClass.OUTSIDE
    if not outside.any():
        return np.zeros(c.shape, dtype=bool)
    r = element.size // 2
    # edge replication so the image border does not erode the Outside region
    padded = np.pad(outside, r, mode="edge")
    smooth = morphology(morphology(padded, element, "open"), element, "close")
    smooth = smooth[r:r + c.shape[0], r:r + c.shape[1]]
    road = (c == RasterClass.ROAD) & ~smooth
    return road & _dilate8(smooth)


def connect_lane_fragments(markings: np.ndarray, element: StructuringElement,
                           allowed: np.ndarray | None = None) -> np.ndarray:
    """Dilate lane-marking pixels, keeping growth inside ``allowed`` (road surface)."""
    m = np.asarray(markings, dtype=bool)
    grown = morphology(m, element, "dilate")
    if allowed is not None:
        grown &= np.asarray(allowed, dtype=bool) | m
    return grown


# ---------------------------------------------------------------------------
# Zhang-Suen thinning


def _neighbours(img: np.ndarray):
    """P2..P9 (clockwise from north) as shifted views of a zero-padded image."""
    p = np.pad(img, 1)
    h, w = img.shape
    return [
        p[0:h, 1:w + 1],      # P2 north
        p[0:h, 2:w + 2],      # P3 north-east
        p[1:h + 1, 2:w + 2],  # P4 east
        p[2:h + 2, 2:w + 2],  # P5 south-east
        p[2:h + 2, 1:w + 1],  # P6 south
        p[2:h + 2, 0:w],      # P7 south-west
        p[1:h + 1, 0:w],      # P8 west
        p[0:h, 0:w],          # P9 north-west
    ]


def _zs_candidates(img: np.ndarray, step: int) -> np.ndarray:
    n = _neighbours(img.astype(np.uint8))
    b = sum(x.astype(np.int32) for x in n)
    seq = n + n[:1]
    a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32) for i in range(8))
    p2, p4, p6, p8 = n[0], n[2], n[4], n[6]
    if step == 0:
        c1 = (p2 * p4 * p6) == 0
        c2 = (p4 * p6 * p8) == 0
    else:
        c1 = (p2 * p4 * p8) == 0
        c2 = (p2 * p6 * p8) == 0
    return img & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2


_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _neighbour_groups(img, r, c) -> int:
    """Number of 8-connected groups among the set neighbours of (r, c), centre excluded."""
    h, w = img.shape
    on = [(dy, dx) for dy, dx in _RING
          if 0 <= r + dy < h and 0 <= c + dx < w and img[r + dy, c + dx]]
    groups, seen = 0, set()
    for start in on:
        if start in seen:
            continue
        groups += 1
        stack = [start]
        seen.add(start)
        while stack:
            y, x = stack.pop()
            for q in on:
                if q not in seen and max(abs(q[0] - y), abs(q[1] - x)) == 1:
                    seen.add(q)
                    stack.append(q)
    return groups


def _remove_staircases(img: np.ndarray) -> None:
    """Drop right-angle corner pixels that are redundant for 8-connectivity (in place)."""
    p = np.pad(img, 1)
    h, w = img.shape
    n, e = p[0:h, 1:w + 1], p[1:h + 1, 2:w + 2]
    s, wst = p[2:h + 2, 1:w + 1], p[1:h + 1, 0:w]
    cand = img & ((n & e) | (e & s) | (s & wst) | (wst & n))
    for r, c in zip(*np.nonzero(cand)):
        if not img[r, c]:
            continue
        nb = sum(bool(img[r + dy, c + dx]) for dy, dx in _RING
                 if 0 <= r + dy < h and 0 <= c + dx < w)
        if nb < 2 or not _corner(img, r, c):
            continue
        if _neighbour_groups(img, r, c) == 1:
            img[r, c] = False


def _corner(img, r, c) -> bool:
    h, w = img.shape

    def at(dy, dx):
        return 0 <= r + dy < h and 0 <= c + dx < w and bool(img[r + dy, c + dx])
    return ((at(-1, 0) and at(0, 1)) or (at(0, 1) and at(1, 0))
            or (at(1, 0) and at(0, -1)) or (at(0, -1) and at(-1, 0)))


def skeletonize(grid: np.ndarray) -> np.ndarray:
    """Zhang-Suen two-subiteration thinning until no pixel changes.

    Components the plain algorithm would erase entirely (2x2 blocks and
    similar) keep their first pixel in raster order so the component count
    is preserved.
    """
    img = np.asarray(grid, dtype=bool).copy()
    src = img.copy()
    while True:
        changed = False
        for step in (0, 1):
            kill = _zs_candidates(img, step)
            if kill.any():
                img &= ~kill
                changed = True
        if not changed:
            break
    _remove_staircases(img)
    labels, areas = connected_components(src)
    if areas:
        alive = np.zeros(len(areas) + 1, dtype=bool)
        alive[np.unique(labels[img])] = True
        for k in range(1, len(areas) + 1):
            if not alive[k]:
                rows, cols = np.nonzero(labels == k)
                img[rows[0], cols[0]] = True
    return img


def maxpool_downsample(grid: np.ndarray, factor: int) -> np.ndarray:
    """Block-wise logical OR."""
    g = np.asarray(grid, dtype=bool)
    h, w = g.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"grid {g.shape} not divisible by factor {factor}")
    return g.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))
