"""Mask-aware hybrid one-to-one / one-to-many assignment.

Predictions are split by the observed mask into subsegments. A binary
integer program then picks, for every prediction, nothing, one label
(one-to-one), or a same-class label subset matched to its subsegments
(one-to-many), covering every label exactly once at minimum total cost.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceededError, InfeasibleAssignmentError
from .geometry import BevSpec, MapElement, canonical_points, resample, signed_area
from .losses import dice_loss, mean_l1_cost, soft_rasterize
from .raster import BevMask


@dataclass(frozen=True)
class CostParams:
    w_cls: float = 2.0
    w_pt: float = 5.0
    w_rend: float = 1.0
    sigma: float = 0.3             # soft raster kernel, meters
    line_width: float | None = None  # polygon band width; None = one render pixel
    render_resolution: float = 5.0   # px/m of the cost rasters
    large_cost: float = 1e9
    num_points: int = 20           # L
    min_points: int = 4            # L_m
    max_card: int | None = None    # None -> min(max_i |S^i|, 4)
    gate: float | None = 5.0       # meters; None disables spatial gating
    budget: int = 100_000

    def __post_init__(self):
        if min(self.w_cls, self.w_pt, self.w_rend) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.num_points < 2 or self.min_points < 2:
            raise ValueError("invalid point counts")


@dataclass(frozen=True)
class Segment:
    points: np.ndarray
    closed: bool = False


@dataclass
class Subsegments:
    prediction_index: int
    segments: list

    def __len__(self):
        return len(self.segments)


# ---------------------------------------------------------------------------
# splitting by mask


def _dense(points: np.ndarray, closed: bool, step: float):
    """Dense samples along the element: (xy, vertex_index or -1)."""
    ring = np.vstack([points, points[:1]]) if closed else points
    xy, vid = [], []
    n_edges = len(ring) - 1
    for k in range(n_edges):
        a, b = ring[k], ring[k + 1]
        n = max(int(math.ceil(np.hypot(*(b - a)) / step)), 1)
        t = np.arange(n) / n
        xy.append(a + t[:, None] * (b - a))
        v = np.full(n, -1)
        v[0] = k
        vid.append(v)
    if not closed:
        xy.append(ring[-1:])
        vid.append(np.array([len(ring) - 1]))
    return np.vstack(xy), np.concatenate(vid)


def _runs(flags: np.ndarray, closed: bool) -> list[np.ndarray]:
    """Index arrays of maximal True runs; rings may wrap around."""
    n = len(flags)
    if flags.all():
        return [np.arange(n)]
    runs = []
    i = 0
    while i < n:
        if flags[i]:
            j = i
            while j + 1 < n and flags[j + 1]:
                j += 1
            runs.append(np.arange(i, j + 1))
            i = j + 1
        else:
            i += 1
    if closed and len(runs) > 1 and flags[0] and flags[-1]:
        runs[0] = np.concatenate([runs[-1], runs[0]])
        runs.pop()
    return runs


def split_runs(points, closed: bool, mask: BevMask, step: float | None = None):
    """Observed pieces of an element.

    Returns ``(full, pieces)``: ``full`` is True when every point and edge is
    observed; otherwise ``pieces`` lists open point arrays made of the cut
    points and the original vertices inside each observed run.
    """
    p = np.asarray(points, dtype=float)
    step = step or 0.25 / mask.spec.resolution
    xy, vid = _dense(p, closed, step)
    obs = mask.observed_at(xy)
    if obs.all():
        return True, [p.copy()]
    pieces = []
    for run in _runs(obs, closed):
        pts = [xy[run[0]]]
        for k in run[1:-1]:
            if vid[k] >= 0:
                pts.append(xy[k])
        if len(run) > 1:
            pts.append(xy[run[-1]])
        arr = np.array(pts)
        keep = np.concatenate([[True], np.any(np.diff(arr, axis=0) != 0, axis=1)])
        pieces.append(arr[keep])
    return False, pieces


def split_by_mask(q: MapElement, mask: BevMask, num_points: int = 20, min_points: int = 4,
                  index: int = 0) -> Subsegments:
    """Observed subsegments of a prediction, each resampled to ``num_points``."""
    full, pieces = split_runs(q.points, q.closed, mask)
    segs = []
    if full:
        segs.append(Segment(resample(q.points, num_points, q.closed), q.closed))
    else:
        for piece in pieces:
            if len(piece) < min_points:
                continue
            try:
                segs.append(Segment(resample(piece, num_points), False))
            except ValueError:
                continue
    return Subsegments(index, segs)


def split_element(e: MapElement, mask: BevMask, min_points: int = 4) -> list[MapElement]:
    """Observed fragments of a label-side element, without resampling.

    Partially observed polygons keep their observed arcs closed by a chord.
    """
    full, pieces = split_runs(e.points, e.closed, mask)
    if full:
        return [e]
    out = []
    for piece in pieces:
        if len(piece) < min_points:
            continue
        if e.closed:
            if abs(signed_area(piece)) < 1e-12:
                continue
            if np.array_equal(piece[0], piece[-1]):
                piece = piece[:-1]
        out.append(e.with_points(piece))
    return out


# ---------------------------------------------------------------------------
# costs


class _Renderer:
    """Caches soft rasters of elements on the cost grid."""

    def __init__(self, params: CostParams, spec: BevSpec | None):
        base = spec or BevSpec()
        self.spec = base.with_resolution(params.render_resolution)
        self.params = params
        self.cache = {}

    def __call__(self, points, closed):
        # equivalent orderings share one raster
        points = canonical_points(np.asarray(points, dtype=float), closed)
        key = (points.tobytes(), closed)
        if key not in self.cache:
            self.cache[key] = soft_rasterize(points, self.spec, self.params.sigma,
                                             self.params.line_width, closed)[0].values
        return self.cache[key]


def _pair_cost(q_pts, q_closed, q_cls, q_conf, g: MapElement, params: CostParams,
               render: _Renderer) -> float:
    if q_cls != g.cls:
        return params.large_cost
    L = len(q_pts)
    g_pts = resample(canonical_points(g.points, g.closed), L, g.closed)
    conf = 1.0 if q_conf is None else q_conf
    cost = params.w_cls * (1.0 - conf)
    cost += params.w_pt * mean_l1_cost(q_pts, g_pts, g.closed)
    if params.w_rend > 0:
        cost += params.w_rend * dice_loss(render(q_pts, q_closed), render(g.points, g.closed))[0]
    return float(cost)


def cost_o2o(q: MapElement, g: MapElement, params: CostParams | None = None,
             spec: BevSpec | None = None, _render=None) -> float:
    """Class + point-wise L1 + rendering cost; cross-class pairs get ``large_cost``."""
    params = params or CostParams()
    render = _render or _Renderer(params, spec)
    q_pts = resample(q.points, params.num_points, q.closed)
    return _pair_cost(q_pts, q.closed, q.cls, q.confidence, g, params, render)


def segment_cost(seg: Segment, q: MapElement, g: MapElement, params: CostParams,
                 render: _Renderer) -> float:
    return _pair_cost(seg.points, seg.closed, q.cls, q.confidence, g, params, render)


def hungarian(cost) -> tuple[list, float]:
    """Minimum-cost matching of min(n, m) pairs (shortest augmenting paths).

    Returns (sorted list of (row, col) pairs, total cost). Ties resolve to
    the lowest column index found during each augmentation.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = C.shape
    if n == 0 or m == 0:
        return [], 0.0
    transposed = n > m
    if transposed:
        C = C.T
        n, m = m, n
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)      # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (m + 1)
    rows = C.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = rows[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(p[j] - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    pairs.sort()
    M = np.asarray(cost, dtype=float)
    total = 0.0
    for r, c in pairs:
        total += M[r, c]
    return pairs, total


def cost_o2m(S: Subsegments, J, G, q: MapElement, params: CostParams | None = None,
             spec: BevSpec | None = None, _render=None) -> tuple[float, tuple]:
    """Optimal local matching cost of subsegments to labels ``J``.

    Returns (cost, local) with ``local`` a tuple of (segment index, label)
    pairs; ``large_cost`` and an empty tuple when |S| != |J|.
    """
    params = params or CostParams()
    J = tuple(J)
    if len(S) != len(J) or not J:
        return params.large_cost, ()
    render = _render or _Renderer(params, spec)
    C = np.array([[segment_cost(s, q, G[j], params, render) for j in J] for s in S.segments])
    if np.any(C >= params.large_cost):
        return params.large_cost, ()
    pairs, total = hungarian(C)
    local = tuple(sorted((si, J[ji]) for si, ji in pairs))
    return total, local


# ---------------------------------------------------------------------------
# subsets


def _bbox_gap(a: np.ndarray, b: np.ndarray) -> float:
    dx = max(0.0, a[0] - b[2], b[0] - a[2])
    dy = max(0.0, a[1] - b[3], b[1] - a[3])
    return math.hypot(dx, dy)


def enumerate_subsets(G, max_card: int, gate: float | None = 5.0,
                      budget: int | None = 100_000) -> list[tuple]:
    """Same-class label subsets of size <= ``max_card``.

    With ``gate`` set, subsets of size >= 2 require every pair of bounding
    boxes to lie within ``gate`` meters. Singletons are always included.
    """
    if max_card < 1:
        raise ValueError("max_card must be >= 1")
    elements = list(G)
    boxes = [np.concatenate([e.points.min(axis=0), e.points.max(axis=0)]) for e in elements]
    by_class = {}
    for j, e in enumerate(elements):
        by_class.setdefault(e.cls, []).append(j)
    out = [(j,) for j in range(len(elements))]
    for cls in sorted(by_class):
        idx = by_class[cls]
        for k in range(2, max_card + 1):
            for J in itertools.combinations(idx, k):
                if gate is not None and any(_bbox_gap(boxes[a], boxes[b]) > gate
                                            for a, b in itertools.combinations(J, 2)):
                    continue
                out.append(J)
                if budget is not None and len(out) > budget:
                    raise BudgetExceededError()
    if budget is not None and len(out) > budget:
        raise BudgetExceededError()
    return sorted(out, key=lambda J: (len(J), J))


# ---------------------------------------------------------------------------
# problem + solvers


@dataclass(frozen=True)
class Variable:
    pred: int
    labels: tuple
    cost: float
    kind: str            # "o2o" | "o2m"
    local: tuple = ()


@dataclass
class AssignmentProblem:
    n_pred: int
    n_label: int
    variables: list
    subsegments: list = field(default_factory=list)

    def max_segments(self) -> int:
        return max((len(s) for s in self.subsegments), default=0)


@dataclass(frozen=True)
class Outcome:
    kind: str | None     # "o2o", "o2m" or None (unassigned)
    labels: tuple = ()
    local: tuple = ()
    cost: float = 0.0


@dataclass
class AssignmentResult:
    outcomes: list
    total_cost: float
    method: str = ""

    def assigned_labels(self, i: int) -> tuple:
        return self.outcomes[i].labels

    def to_dict(self) -> dict:
        matches = []
        unassigned = []
        for i, o in enumerate(self.outcomes):
            if o.kind is None:
                unassigned.append(i)
                continue
            matches.append({"pred": i, "labels": list(o.labels),
                            "local": [list(x) for x in o.local], "cost": o.cost})
        return {"matches": matches, "unassigned_preds": unassigned,
                "total_cost": self.total_cost}

    @classmethod
    def from_dict(cls, d: dict, n_pred: int | None = None) -> "AssignmentResult":
        n = n_pred
        if n is None:
            n = 1 + max([m["pred"] for m in d["matches"]] + list(d["unassigned_preds"]) + [-1])
        outcomes = [Outcome(None) for _ in range(n)]
        for m in d["matches"]:
            local = tuple(tuple(x) for x in m.get("local", []))
            kind = "o2m" if local else "o2o"
            outcomes[m["pred"]] = Outcome(kind, tuple(m["labels"]), local, float(m["cost"]))
        return cls(outcomes, float(d["total_cost"]))


def canonical_total(chosen) -> float:
    """Objective of a set of variables, summed in prediction-index order."""
    total = 0.0
    for v in sorted(chosen, key=lambda v: (v.pred, v.labels)):
        total += v.cost
    return total


def _with_length(q: MapElement, n: int) -> MapElement:
    if len(q.points) == n:
        return q
    return q.with_points(resample(q.points, n, q.closed))


def build_problem(Q, G, mask: BevMask, params: CostParams | None = None,
                  max_card: int | None = None, gate="default") -> AssignmentProblem:
    """Evaluate every feasible x_ij / y_iJ variable; sentinel-cost ones are dropped.

    Predictions are brought to ``params.num_points`` points before splitting.
    """
    params = params or CostParams()
    Q, G = [_with_length(q, params.num_points) for q in Q], list(G)
    render = _Renderer(params, mask.spec)
    subs = [split_by_mask(q, mask, params.num_points, params.min_points, i)
            for i, q in enumerate(Q)]
    variables = []
    for i, q in enumerate(Q):
        q_pts = resample(q.points, params.num_points, q.closed)
        for j, g in enumerate(G):
            c = _pair_cost(q_pts, q.closed, q.cls, q.confidence, g, params, render)
            if c < params.large_cost:
                variables.append(Variable(i, (j,), c, "o2o"))
    if max_card is None:
        max_card = params.max_card
    if max_card is None:
        max_card = min(max((len(s) for s in subs), default=1), 4)
    max_card = max(max_card, 1)
    gate = params.gate if gate == "default" else gate
    subsets = enumerate_subsets(G, max_card, gate, params.budget) if G else []
    seg_costs = {}
    for i, (q, S) in enumerate(zip(Q, subs)):
        if not len(S):
            continue
        for J in subsets:
            if len(J) != len(S) or G[J[0]].cls != q.cls:
                continue
            C = np.empty((len(S), len(J)))
            for a, s in enumerate(S.segments):
                for b, j in enumerate(J):
                    key = (i, a, j)
                    if key not in seg_costs:
                        seg_costs[key] = segment_cost(s, q, G[j], params, render)
                    C[a, b] = seg_costs[key]
            if np.any(C >= params.large_cost):
                continue
            pairs, total = hungarian(C)
            local = tuple(sorted((a, J[b]) for a, b in pairs))
            if total < params.large_cost:
                variables.append(Variable(i, tuple(J), float(total), "o2m", local))
    return AssignmentProblem(len(Q), len(G), variables, subs)


def _result(problem: AssignmentProblem, chosen, method) -> AssignmentResult:
    outcomes = [Outcome(None) for _ in range(problem.n_pred)]
    for v in chosen:
        outcomes[v.pred] = Outcome(v.kind, v.labels, v.local, v.cost)
    return AssignmentResult(outcomes, canonical_total(chosen), method)


def solve_ilp(problem: AssignmentProblem) -> AssignmentResult:
    """Exact binary program by depth-first branch and bound.

    Branches on the lowest uncovered label; the bound adds, for every
    uncovered label, the cheapest per-label share cost/|J| among variables
    still compatible with the partial solution.
    """
    m = problem.n_label
    if m == 0:
        return AssignmentResult([Outcome(None)] * problem.n_pred, 0.0, "ilp")
    variables = sorted(problem.variables, key=lambda v: (v.cost, v.pred, v.labels))
    lmask = [sum(1 << j for j in v.labels) for v in variables]
    share = [v.cost / len(v.labels) for v in variables]
    by_label = [[k for k, v in enumerate(variables) if j in v.labels] for j in range(m)]
    by_share = [sorted(ks, key=lambda k: (share[k], k)) for ks in by_label]
    preds = [v.pred for v in variables]
    full = (1 << m) - 1
    best = [math.inf, None]
    chosen: list[int] = []

    def bound(covered, used):
        lb = 0.0
        for j in range(m):
            if covered >> j & 1:
                continue
            for k in by_share[j]:
                if not (used >> preds[k] & 1) and not (lmask[k] & covered):
                    lb += share[k]
                    break
            else:
                return math.inf
        return lb

    def dfs(covered, used, cost):
        if covered == full:
            total = canonical_total(variables[k] for k in chosen)
            if total < best[0]:
                best[0] = total
                best[1] = list(chosen)
            return
        lb = bound(covered, used)
        if lb == math.inf:
            return
        if cost + lb > best[0] + 1e-9 * max(1.0, abs(best[0])):
            return
        j = (~covered & full & -(~covered & full)).bit_length() - 1
        for k in by_label[j]:
            v = variables[k]
            if used >> v.pred & 1 or lmask[k] & covered:
                continue
            chosen.append(k)
            dfs(covered | lmask[k], used | (1 << v.pred), cost + v.cost)
            chosen.pop()

    dfs(0, 0, 0.0)
    if best[1] is None:
        raise InfeasibleAssignmentError()
    return _result(problem, [variables[k] for k in best[1]], "ilp")


def solve_padded_hungarian(problem: AssignmentProblem, large_cost: float = 1e9
                           ) -> AssignmentResult:
    """Fast path for problems where no prediction has more than one subsegment.

    Labels are padded with null columns of zero cost up to |Q|; each real
    entry is the cheaper of the one-to-one and single-segment options.
    """
    n, m = problem.n_pred, problem.n_label
    if any(len(v.labels) > 1 for v in problem.variables):
        raise ValueError("padded Hungarian only handles single-label variables")
    if n < m:
        raise InfeasibleAssignmentError()
    best = {}
    for v in problem.variables:
        key = (v.pred, v.labels[0])
        cur = best.get(key)
        if cur is None or v.cost < cur.cost or (v.cost == cur.cost and v.kind == "o2o"):
            best[key] = v
    C = np.zeros((n, n))
    C[:, :m] = large_cost
    for (i, j), v in best.items():
        C[i, j] = v.cost
    pairs, _ = hungarian(C)
    chosen = []
    for i, j in pairs:
        if j >= m:
            continue
        if (i, j) not in best:
            raise InfeasibleAssignmentError()
        chosen.append(best[(i, j)])
    return _result(problem, chosen, "hungarian")


def solve_global(Q, G, mask: BevMask, params: CostParams | None = None,
                 method: str = "auto", max_card: int | None = None,
                 gate="default") -> AssignmentResult:
    """Globally optimal hybrid assignment of predictions ``Q`` to labels ``G``."""
    params = params or CostParams()
    Q, G = list(Q), list(G)
    problem = build_problem(Q, G, mask, params, max_card, gate)
    if method == "auto":
        method = "hungarian" if problem.max_segments() <= 1 else "ilp"
    if method == "hungarian":
        if problem.max_segments() > 1:
            raise ValueError("Hungarian fast path requires |S^i| <= 1 for all predictions")
        single = AssignmentProblem(problem.n_pred, problem.n_label,
                                   [v for v in problem.variables if len(v.labels) == 1],
                                   problem.subsegments)
        return solve_padded_hungarian(single, params.large_cost)
    if method == "ilp":
        return solve_ilp(problem)
    raise ValueError(f"unknown method {method!r}")
