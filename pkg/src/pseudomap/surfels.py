"""Flat Gaussian surfels: meshgrid initialization and orthographic BEV splatting.

A surfel is a 2D Gaussian disc with zero thickness along its normal. Seen
from straight above, its footprint is the Gaussian pushed through the
projection of its local x/y axes onto the ground plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BevSpec, Pose2
from .raster import PALETTE, RasterClass, SemanticRaster

N_RASTER_CLASSES = len(RasterClass)
GRAY = (0.5, 0.5, 0.5)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion (normalized first)."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_mul(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def yaw_quat(angle: float) -> np.ndarray:
    return np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])


@dataclass(frozen=True)
class Surfel:
    center: tuple
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    scale: tuple = (0.5, 0.5)
    opacity: float = 1.0
    color: tuple = GRAY
    class_probs: tuple = tuple([1.0 / N_RASTER_CLASSES] * N_RASTER_CLASSES)

    def __post_init__(self):
        if len(self.center) != 3 or len(self.rotation) != 4 or len(self.scale) != 2:
            raise ValueError("surfel needs a 3D center, a quaternion and a 2D scale")
        if min(self.scale) <= 0:
            raise ValueError("surfel scale must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        p = np.asarray(self.class_probs, dtype=float)
        if len(p) != N_RASTER_CLASSES or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("class_probs must be a distribution over the raster classes")


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    timestamps: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))
        if not self.poses:
            raise ValueError("empty trajectory")
        if len(self.poses) != len(self.timestamps):
            raise ValueError("one timestamp per pose required")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, poses, dt: float = 0.1) -> "Trajectory":
        poses = tuple(poses)
        return cls(poses, tuple(k * dt for k in range(len(poses))))


class SurfelGrid:
    """Structure-of-arrays surfel set.

    ``centers`` (N, 3), ``rotations`` (N, 4) quaternions (w, x, y, z),
    ``scales`` (N, 2), ``opacities`` (N,), ``colors`` (N, 3) and
    ``class_probs`` (N, 5) over the raster classes.
    """

    def __init__(self, centers, rotations, scales, opacities, colors, class_probs,
                 spacing: float, source_trajectory=()):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        n = len(self.centers)
        self.rotations = np.asarray(rotations, dtype=float).reshape(n, 4)
        self.scales = np.asarray(scales, dtype=float).reshape(n, 2)
        self.opacities = np.asarray(opacities, dtype=float).reshape(n)
        self.colors = np.asarray(colors, dtype=float).reshape(n, 3)
        self.class_probs = np.asarray(class_probs, dtype=float).reshape(n, N_RASTER_CLASSES)
        self.spacing = float(spacing)
        self.source_trajectory = tuple(source_trajectory)
        if n == 0:
            raise ValueError("surfel grid is empty")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if np.any(self.scales <= 0):
            raise ValueError("surfel scale must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(self.class_probs < 0) or np.any(np.abs(self.class_probs.sum(1) - 1) > 1e-6):
            raise ValueError("class_probs rows must sum to 1")

    def __len__(self):
        return len(self.centers)

    @property
    def surfels(self) -> list[Surfel]:
        return [Surfel(tuple(self.centers[k]), tuple(self.rotations[k]), tuple(self.scales[k]),
                       float(self.opacities[k]), tuple(self.colors[k]), tuple(self.class_probs[k]))
                for k in range(len(self))]

    @classmethod
    def from_surfels(cls, surfels, spacing: float, source_trajectory=()) -> "SurfelGrid":
        s = list(surfels)
        return cls([x.center for x in s], [x.rotation for x in s], [x.scale for x in s],
                   [x.opacity for x in s], [x.color for x in s], [x.class_probs for x in s],
                   spacing, source_trajectory)

    def copy(self, **changes) -> "SurfelGrid":
        kw = dict(centers=self.centers, rotations=self.rotations, scales=self.scales,
                  opacities=self.opacities, colors=self.colors, class_probs=self.class_probs,
                  spacing=self.spacing, source_trajectory=self.source_trajectory)
        kw.update(changes)
        return SurfelGrid(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in kw.items()})


def _poses(traj) -> tuple:
    if isinstance(traj, Trajectory):
        return traj.poses
    if isinstance(traj, Pose2):
        return (traj,)
    return tuple(traj)


def init_meshgrid(traj, offset_r: float = 7.0, spacing: float = 0.25) -> SurfelGrid:
    """Lattice of flat surfels covering the per-pose squares [-r, r]^2 around the trajectory.

    Lattice nodes sit at integer multiples of ``spacing``; overlaps between
    poses are merged. The node closest to each pose is always included so
    that very small offsets still cover the trajectory.
    """
    poses = _poses(traj)
    if not poses:
        raise ValueError("empty trajectory")
    if offset_r <= 0 or spacing <= 0:
        raise ValueError("offset_r and spacing must be positive")
    nodes = set()
    tol = 1e-9
    for p in poses:
        i0 = math.ceil((p.x - offset_r) / spacing - tol)
        i1 = math.floor((p.x + offset_r) / spacing + tol)
        j0 = math.ceil((p.y - offset_r) / spacing - tol)
        j1 = math.floor((p.y + offset_r) / spacing + tol)
        nodes.update((i, j) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1))
        nodes.add((round(p.x / spacing), round(p.y / spacing)))
    ij = np.array(sorted(nodes), dtype=float)
    n = len(ij)
    centers = np.column_stack([ij * spacing, np.zeros(n)])
    return SurfelGrid(
        centers,
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full((n, 2), spacing / 2),
        np.ones(n),
        np.tile(GRAY, (n, 1)),
        np.full((n, N_RASTER_CLASSES), 1.0 / N_RASTER_CLASSES),
        spacing,
        poses,
    )


def transform_grid(grid: SurfelGrid, T: Pose2) -> SurfelGrid:
    """Apply the rigid motion ``T`` (ego frame of T -> world) to every surfel."""
    xy = T.ego_to_world(grid.centers[:, :2])
    phi = T.heading - math.pi / 2
    qz = yaw_quat(phi)
    rots = np.array([quat_mul(qz, q) for q in grid.rotations])
    traj = tuple(T.compose(p) for p in grid.source_trajectory)
    return grid.copy(centers=np.column_stack([xy, grid.centers[:, 2]]), rotations=rots,
                     source_trajectory=traj)


def _quat_matrices(q) -> np.ndarray:
    """Stack of rotation matrices for (N, 4) quaternions."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


@dataclass
class BevRendering:
    raster: SemanticRaster
    color: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray = field(repr=False, default=None)  # (H, W, 5) accumulated class weights

    def __iter__(self):
        return iter((self.raster, self.color, self.alpha))


def render_bev(grid: SurfelGrid, pose: Pose2, spec: BevSpec, alpha_min: float = 0.05,
               truncate: float = 3.0, chunk_cells: int = 2_000_000) -> BevRendering:
    """Orthographic top-down splat of ``grid`` into the ego frame of ``pose``.

    Each surfel adds ``w = opacity * exp(-0.5 * u^T diag(s)^-2 u)`` to every
    pixel within ``truncate`` standard deviations, where ``u`` is the
    pixel offset in the surfel's local frame. Class probabilities and colors
    are averaged with these weights; alpha is ``1 - prod(1 - w)``. Surfels
    are visited by descending z, then index, so reductions are order-stable.
    Pixels with alpha below ``alpha_min`` become Unobserved; class ties go to
    the lower class id.
    """
    h, w = spec.shape
    res = spec.resolution
    npix = h * w
    acc = np.zeros((N_RASTER_CLASSES, npix))
    col = np.zeros((3, npix))
    wsum = np.zeros(npix)
    log_t = np.zeros(npix)

    order = np.lexsort((np.arange(len(grid)), -grid.centers[:, 2]))
    order = order[grid.opacities[order] > 0]
    # local surfel axes -> ego frame
    A = pose.rotation().T @ _quat_matrices(grid.rotations[order])[:, :2, :2]
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    keep = np.abs(det) > 1e-12  # edge-on surfels have no ground footprint
    order, A, det = order[keep], A[keep], det[keep]
    if len(order) == 0:
        return _finish(acc, col, wsum, log_t, spec, alpha_min)
    Ainv = np.stack([np.stack([A[:, 1, 1], -A[:, 0, 1]], -1),
                     np.stack([-A[:, 1, 0], A[:, 0, 0]], -1)], 1) / det[:, None, None]
    ego = pose.world_to_ego(grid.centers[order, :2])
    scales = grid.scales[order]
    reach = truncate * float(scales.max())
    K = int(math.ceil(2 * reach * res)) + 2
    off = np.arange(K)
    step = max(1, chunk_cells // (K * K))
    for s in range(0, len(order), step):
        sl = slice(s, s + step)
        cx, cy = ego[sl, 0], ego[sl, 1]
        c0 = np.floor((cx - reach - spec.x_min) * res).astype(int)
        r0 = np.floor((spec.y_max - cy - reach) * res).astype(int)
        cols = c0[:, None] + off
        rows = r0[:, None] + off
        px = spec.x_min + (cols + 0.5) / res - cx[:, None]
        py = spec.y_max - (rows + 0.5) / res - cy[:, None]
        dx, dy = px[:, None, :], py[:, :, None]
        Ai = Ainv[sl]
        u = Ai[:, 0, 0, None, None] * dx + Ai[:, 0, 1, None, None] * dy
        v = Ai[:, 1, 0, None, None] * dx + Ai[:, 1, 1, None, None] * dy
        sc = scales[sl]
        m2 = (u / sc[:, 0, None, None]) ** 2 + (v / sc[:, 1, None, None]) ** 2
        ok = ((m2 <= truncate ** 2)
              & ((rows >= 0) & (rows < h))[:, :, None]
              & ((cols >= 0) & (cols < w))[:, None, :])
        which, rr, cc = np.nonzero(ok)
        wt = grid.opacities[order[sl]][which] * np.exp(-0.5 * m2[which, rr, cc])
        idx = rows[which, rr] * w + cols[which, cc]
        k = order[sl][which]
        wsum += np.bincount(idx, wt, npix)
        for c in range(N_RASTER_CLASSES):
            acc[c] += np.bincount(idx, wt * grid.class_probs[k, c], npix)
        for c in range(3):
            col[c] += np.bincount(idx, wt * grid.colors[k, c], npix)
        with np.errstate(divide="ignore"):
            log_t += np.bincount(idx, np.log1p(-np.minimum(wt, 1.0)), npix)
    return _finish(acc, col, wsum, log_t, spec, alpha_min)


def _finish(acc, col, wsum, log_t, spec, alpha_min) -> BevRendering:
    h, w = spec.shape
    alpha = (1.0 - np.exp(log_t)).reshape(h, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(wsum > 0, col / wsum, 0.0).T.reshape(h, w, 3)
    acc = acc.T.reshape(h, w, N_RASTER_CLASSES)
    classes = np.argmax(acc, axis=-1).astype(np.uint8)
    classes[alpha < alpha_min] = int(RasterClass.UNOBSERVED)
    return BevRendering(SemanticRaster(classes, spec), color, alpha, acc)


def paint_from_raster(grid: SurfelGrid, raster: SemanticRaster, pose: Pose2 = Pose2()
                      ) -> SurfelGrid:
    """Set one-hot semantics and palette colors from a raster seen at ``pose``.

    Surfels over Unobserved pixels or outside the raster get opacity 0.
    """
    ego = pose.world_to_ego(grid.centers[:, :2])
    rows, cols = raster.spec.xy_to_pixel(ego)
    inside = (rows >= 0) & (rows < raster.height) & (cols >= 0) & (cols < raster.width)
    cls = np.zeros(len(grid), dtype=int)
    cls[inside] = raster.classes[rows[inside], cols[inside]]
    probs = np.eye(N_RASTER_CLASSES)[cls]
    colors = np.array([PALETTE[RasterClass(c)] for c in cls], dtype=float) / 255.0
    opac = np.where(inside & (cls != RasterClass.UNOBSERVED), grid.opacities, 0.0)
    return grid.copy(class_probs=probs, colors=colors, opacities=opac)


def straight_trajectory(length: float, step: float = 1.0, heading: float = math.pi / 2,
                        dt: float = 0.1) -> Trajectory:
    """Poses every ``step`` meters along a straight line from the origin."""
    n = int(math.floor(length / step + 1e-9)) + 1
    d = np.array([math.cos(heading), math.sin(heading)])
    return Trajectory.from_poses([Pose2(*(k * step * d), heading) for k in range(n)], dt)
