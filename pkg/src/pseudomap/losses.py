"""Mask-aware loss terms with analytic gradients.

Every ``*_loss`` function returns ``(value, gradient)``; gradients are taken
with respect to predicted points (shape ``(L, 2)``) or predicted class
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevSpec, equivalent_orderings, resample
from .raster import BevMask, maxpool_downsample  # noqa: F401  (re-exported)

N_CLASSES = 3
BACKGROUND = N_CLASSES


@dataclass(frozen=True, eq=False)
class SoftRaster:
    values: np.ndarray
    spec: BevSpec

    def __post_init__(self):
        if self.values.shape != self.spec.shape:
            raise ValueError("soft raster shape does not match spec")


class PointJacobian:
    """Sparse Jacobian of a soft raster w.r.t. the element's points.

    Each pixel depends only on the two endpoints of its closest segment.
    """

    def __init__(self, n_points, seg_a, seg_b, grad_a, grad_b):
        self.n_points = n_points
        self.seg_a = seg_a      # (H, W) index of the first endpoint
        self.seg_b = seg_b      # (H, W) index of the second endpoint
        self.grad_a = grad_a    # (H, W, 2)
        self.grad_b = grad_b    # (H, W, 2)

    def vjp(self, upstream: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(upstream * values)`` w.r.t. the points, shape (N, 2)."""
        u = np.asarray(upstream, dtype=float)[..., None]
        out = np.zeros((self.n_points, 2))
        np.add.at(out, self.seg_a.ravel(), (u * self.grad_a).reshape(-1, 2))
        np.add.at(out, self.seg_b.ravel(), (u * self.grad_b).reshape(-1, 2))
        return out

    def pixel(self, row: int, col: int) -> np.ndarray:
        """Dense (N, 2) gradient of one pixel value."""
        out = np.zeros((self.n_points, 2))
        out[self.seg_a[row, col]] += self.grad_a[row, col]
        out[self.seg_b[row, col]] += self.grad_b[row, col]
        return out


def soft_rasterize(points, spec: BevSpec, sigma: float = 0.3, width: float | None = None,
                   closed: bool = False) -> tuple[SoftRaster, PointJacobian]:
    """Gaussian distance-field rendering of a polyline or polygon boundary band.

    value = exp(-d^2 / (2 sigma^2)), with d the distance to the polyline, or
    for rings the distance to the boundary band of ``width`` (default one
    pixel).
    """
    p = np.asarray(points, dtype=float)
    n = len(p)
    if width is None:
        width = 1.0 / spec.resolution
    X, Y = spec.pixel_centers()
    px, py = X.ravel(), Y.ravel()
    ia = np.arange(n if closed else n - 1)
    ib = (ia + 1) % n
    ax, ay = p[ia, 0], p[ia, 1]
    abx, aby = p[ib, 0] - ax, p[ib, 1] - ay
    L2 = abx * abx + aby * aby
    inv = np.divide(1.0, L2, out=np.zeros_like(L2), where=L2 > 0)
    npix = len(px)
    best = np.empty(npix)
    seg = np.empty(npix, dtype=int)
    t_best = np.empty(npix)
    step = max(1, 400_000 // max(len(ia), 1))
    for s0 in range(0, npix, step):
        dx = px[s0:s0 + step, None] - ax
        dy = py[s0:s0 + step, None] - ay
        t = np.clip((dx * abx + dy * aby) * inv, 0.0, 1.0)
        dx -= t * abx
        dy -= t * aby
        d2 = dx * dx + dy * dy
        k = np.argmin(d2, axis=1)  # first minimum: ties go to the lower segment
        rows = np.arange(len(k))
        best[s0:s0 + step] = d2[rows, k]
        seg[s0:s0 + step] = k
        t_best[s0:s0 + step] = t[rows, k]
    best = best.reshape(spec.shape)
    seg = seg.reshape(spec.shape)
    t_best = t_best.reshape(spec.shape)
    P = np.stack([X, Y], axis=-1)
    d = np.sqrt(best)
    a_idx, b_idx = ia[seg], ib[seg]
    c = p[a_idx] + t_best[..., None] * (p[b_idx] - p[a_idx])
    d_eff = np.maximum(d - width / 2, 0.0) if closed else d
    v = np.exp(-d_eff ** 2 / (2 * sigma ** 2))
    dv_dd = -d_eff / sigma ** 2 * v
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d[..., None] > 0, (P - c) / d[..., None], 0.0)
    # dd/da = -(p-c)/d * (1-t), dd/db = -(p-c)/d * t
    ga = (dv_dd * (1 - t_best))[..., None] * -unit
    gb = (dv_dd * t_best)[..., None] * -unit
    return SoftRaster(v, spec), PointJacobian(n, a_idx, b_idx, ga, gb)


def _mask_bits(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    bits = mask.bits if isinstance(mask, BevMask) else np.asarray(mask, dtype=bool)
    if bits.shape != shape:
        raise ValueError(f"mask shape {bits.shape} does not match raster {shape}")
    return bits


def _values(r):
    return r.values if isinstance(r, SoftRaster) else np.asarray(r, dtype=float)


def dice_loss(pred, target, mask=None, eps: float = 1.0) -> tuple[float, np.ndarray]:
    """Masked soft Dice loss and its gradient w.r.t. ``pred`` values."""
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise ValueError(f"raster shapes differ: {p.shape} vs {t.shape}")
    m = _mask_bits(mask, p.shape)
    pm, tm = np.where(m, p, 0.0), np.where(m, t, 0.0)
    num = 2.0 * float((pm * tm).sum()) + eps
    den = float((pm * pm).sum() + (tm * tm).sum()) + eps
    loss = 1.0 - num / den
    grad = -(2.0 * tm * den - num * 2.0 * pm) / den ** 2
    return loss, np.where(m, grad, 0.0)


def focal_loss(p_hat, cls: int, alpha: float = 0.25, gamma: float = 2.0,
               eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """-alpha (1 - p_t)^gamma log p_t on the target entry of a probability vector."""
    p = np.asarray(p_hat, dtype=float)
    pt = float(p[cls])
    grad = np.zeros_like(p)
    if pt < eps:
        pt_c = eps
        loss = -alpha * (1 - pt_c) ** gamma * np.log(pt_c)
        return float(loss), grad
    loss = -alpha * (1 - pt) ** gamma * np.log(pt)
    d = alpha * (gamma * (1 - pt) ** (gamma - 1) * np.log(pt) - (1 - pt) ** gamma / pt) \
        if gamma > 0 else -alpha / pt
    grad[cls] = d
    return float(loss), grad


def pointwise_l1(q, g, closed: bool = False) -> tuple[float, np.ndarray, int]:
    """Minimum over equivalent orderings of g of sum_l |q_l - g_gamma(l)|_1.

    Returns (loss, gradient w.r.t. q, index of the optimal ordering).
    """
    q = np.asarray(q, dtype=float)
    g = np.asarray(g, dtype=float)
    if q.shape != g.shape:
        raise ValueError("pointwise L1 needs equal point counts")
    best, best_k, best_g = np.inf, -1, None
    for k, gg in enumerate(equivalent_orderings(g, closed)):
        v = float(np.abs(q - gg).sum())
        if v < best:
            best, best_k, best_g = v, k, gg
    return best, np.sign(q - best_g), best_k


def mean_l1_cost(q, g, closed: bool = False) -> float:
    """Matching-cost form: mean per-point L1 under the best ordering."""
    return pointwise_l1(q, g, closed)[0] / len(q)


def direction_loss(points, closed: bool = False) -> tuple[float, np.ndarray]:
    """Mean over interior vertices of (1 - cos(turning angle))."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    grad = np.zeros_like(p)
    if closed:
        verts = [((k - 1) % n, k, (k + 1) % n) for k in range(n)]
    else:
        verts = [(k - 1, k, k + 1) for k in range(1, n - 1)]
    if not verts:
        return 0.0, grad
    total = 0.0
    for i, k, j in verts:
        u, w = p[k] - p[i], p[j] - p[k]
        nu, nw = float(np.hypot(*u)), float(np.hypot(*w))
        if nu == 0 or nw == 0:
            continue
        c = float(u @ w) / (nu * nw)
        total += 1.0 - c
        dc_du = w / (nu * nw) - c * u / nu ** 2
        dc_dw = u / (nu * nw) - c * w / nw ** 2
        grad[i] += dc_du
        grad[k] += -dc_du + dc_dw
        grad[j] += -dc_dw
    m = len(verts)
    return total / m, grad / m


def render_loss(q, assigned, mask: BevMask, sigma: float = 0.3, width: float | None = None,
                q_closed: bool = False) -> tuple[float, np.ndarray]:
    """Dice between the rasterized prediction and the max-union of its assigned labels.

    ``assigned`` holds (points, closed) pairs; sums run over observed cells only.
    """
    spec = mask.spec
    pred, jac = soft_rasterize(q, spec, sigma, width, q_closed)
    target = np.zeros(spec.shape)
    for pts, closed in assigned:
        target = np.maximum(target, soft_rasterize(pts, spec, sigma, width, closed)[0].values)
    loss, g = dice_loss(pred, target, mask)
    return loss, jac.vjp(g)


def masked_bev_seg_loss(pred, label, mask=None, eps: float = 1e-7) -> float:
    """Masked binary cross-entropy plus masked Dice; 0 when nothing is observed."""
    p = np.clip(_values(pred), eps, 1 - eps)
    y = np.asarray(label, dtype=float)
    m = _mask_bits(mask, p.shape)
    if not m.any():
        return 0.0
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    dice, _ = dice_loss(_values(pred), y, m)
    return float(bce[m].mean()) + dice


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class LossBreakdown:
    cls: float = 0.0
    pt: float = 0.0
    rend: float = 0.0
    dir: float = 0.0
    bev_seg: float = 0.0
    total: float = 0.0
    grad_points: list = field(default_factory=list)
    grad_class: np.ndarray = None
    weights: dict = field(default_factory=dict)

    TERMS = ("cls", "pt", "rend", "dir", "bev_seg")

    def to_dict(self, gradients: bool = False) -> dict:
        d = {k: getattr(self, k) for k in self.TERMS}
        d["total"] = self.total
        d["weights"] = dict(self.weights)
        if gradients:
            d["grad_points"] = [g.tolist() for g in self.grad_points]
            d["grad_class"] = None if self.grad_class is None else self.grad_class.tolist()
        return d


def total_loss(parts: dict, weights: dict, n_points=None, n_probs: int = N_CLASSES + 1
               ) -> LossBreakdown:
    """Weighted sum of loss terms and of their gradients.

    ``parts`` maps a term name to ``(value, grad_points, grad_class)`` where
    the gradients may be None. ``n_points`` lists the point count of every
    prediction (sets gradient shapes when a term has none).
    """
    for k, w in weights.items():
        if w < 0:
            raise ValueError(f"negative weight for {k}")
    if n_points is None:
        n_points = []
        for _, gp, _ in parts.values():
            if gp is not None:
                n_points = [len(g) for g in gp]
                break
    out = LossBreakdown(weights={k: float(weights.get(k, 0.0)) for k in LossBreakdown.TERMS})
    out.grad_points = [np.zeros((n, 2)) for n in n_points]
    out.grad_class = np.zeros((len(n_points), n_probs))
    total = 0.0
    for name in LossBreakdown.TERMS:
        if name not in parts:
            continue
        value, gp, gc = parts[name]
        w = out.weights[name]
        setattr(out, name, float(value))
        total += w * float(value)
        if gp is not None:
            for acc, g in zip(out.grad_points, gp):
                acc += w * np.asarray(g)
        if gc is not None:
            out.grad_class += w * np.asarray(gc)
    out.total = total
    return out


# ---------------------------------------------------------------------------
# full loss over one frame


DIRECTION_LOSSES = {"turning": direction_loss}


@dataclass(frozen=True)
class LossParams:
    weights: tuple = (("cls", 2.0), ("pt", 5.0), ("rend", 1.0), ("dir", 1.0), ("bev_seg", 1.0))
    alpha: float = 0.25
    gamma: float = 2.0
    sigma: float = 0.3
    line_width: float | None = None
    render_resolution: float = 5.0
    direction: str = "turning"
    min_points: int = 4

    def __post_init__(self):
        w = dict(self.weights)
        unknown = set(w) - set(LossBreakdown.TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if any(v < 0 for v in w.values()):
            raise ValueError("loss weights must be non-negative")
        if self.direction not in DIRECTION_LOSSES:
            raise ValueError(f"unknown direction loss {self.direction!r}")
        if self.sigma <= 0 or self.render_resolution <= 0:
            raise ValueError("sigma and render_resolution must be positive")
        object.__setattr__(self, "weights", tuple(sorted(w.items())))

    @property
    def weight_map(self) -> dict:
        return dict(self.weights)


def class_vector(cls: int, confidence) -> np.ndarray:
    """Probability vector over the map classes plus background.

    The predicted class gets ``confidence``; the rest is spread evenly.
    """
    conf = 1.0 if confidence is None else float(confidence)
    p = np.full(N_CLASSES + 1, (1.0 - conf) / N_CLASSES)
    p[int(cls)] = conf
    return p


def _render_mask(mask: BevMask, resolution: float) -> BevMask:
    spec = mask.spec.with_resolution(resolution)
    X, Y = spec.pixel_centers()
    bits = mask.observed_at(np.stack([X.ravel(), Y.ravel()], -1)).reshape(spec.shape)
    return BevMask(bits, spec)


def compute_losses(Q, G, mask: BevMask, result, params: LossParams | None = None,
                   probs=None, bev_pred=None, bev_label=None) -> LossBreakdown:
    """All loss terms of one frame given a global assignment.

    ``Q`` / ``G`` are lists of MapElements, ``result`` an AssignmentResult.
    ``probs`` optionally gives per-prediction probability vectors (classes +
    background); otherwise they are built with :func:`class_vector`.
    Predictions that are fully masked and not matched one-to-one are left
    out of every term. Classification sums over the kept predictions;
    point, render and direction terms average over the predictions they
    apply to.
    """
    from .assign import split_runs

    params = params or LossParams()
    Q, G = list(Q), list(G)
    n = len(Q)
    if probs is None:
        probs = [class_vector(q.cls, q.confidence) for q in Q]
    probs = [np.asarray(p, dtype=float) for p in probs]
    outcomes = list(result.outcomes) + [None] * (n - len(result.outcomes))

    def kind(i):
        o = outcomes[i]
        return None if o is None else o.kind

    keep = []
    for i, q in enumerate(Q):
        full, pieces = split_runs(q.points, q.closed, mask)
        masked = not full and not pieces
        if masked and kind(i) != "o2o":
            continue
        keep.append(i)

    zeros = [np.zeros((len(q.points), 2)) for q in Q]
    g_cls = np.zeros((n, N_CLASSES + 1))
    cls_total = 0.0
    for i in keep:
        target = G[outcomes[i].labels[0]].cls if kind(i) else BACKGROUND
        v, g = focal_loss(probs[i], int(target), params.alpha, params.gamma)
        cls_total += v
        g_cls[i] = g

    g_pt = [z.copy() for z in zeros]
    o2o = [i for i in keep if kind(i) == "o2o"]
    pt_total = 0.0
    for i in o2o:
        q, g = Q[i], G[outcomes[i].labels[0]]
        target = resample(g.points, len(q.points), g.closed)
        v, grad, _ = pointwise_l1(q.points, target, g.closed)
        pt_total += v
        g_pt[i] = grad
    if o2o:
        pt_total /= len(o2o)
        g_pt = [x / len(o2o) for x in g_pt]

    g_rend = [z.copy() for z in zeros]
    assigned = [i for i in keep if kind(i)]
    rend_total = 0.0
    if assigned:
        rmask = _render_mask(mask, params.render_resolution)
        for i in assigned:
            labels = [(G[j].points, G[j].closed) for j in outcomes[i].labels]
            v, grad = render_loss(Q[i].points, labels, rmask, params.sigma, params.line_width,
                                  Q[i].closed)
            rend_total += v
            g_rend[i] = grad / len(assigned)
        rend_total /= len(assigned)

    g_dir = [z.copy() for z in zeros]
    dir_fn = DIRECTION_LOSSES[params.direction]
    dir_total = 0.0
    for i in keep:
        v, grad = dir_fn(Q[i].points, Q[i].closed)
        dir_total += v
        g_dir[i] = grad / len(keep)
    if keep:
        dir_total /= len(keep)

    bev = 0.0
    if bev_pred is not None and bev_label is not None:
        bev = masked_bev_seg_loss(bev_pred, bev_label, mask)

    parts = {
        "cls": (cls_total, None, g_cls),
        "pt": (pt_total, g_pt, None),
        "rend": (rend_total, g_rend, None),
        "dir": (dir_total, g_dir, None),
        "bev_seg": (bev, None, None),
    }
    return total_loss(parts, params.weight_map, [len(q.points) for q in Q])
