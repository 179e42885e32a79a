"""Chamfer-distance AP, BEV coverage and observed-area-only evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import MapClass, MapElement, VectorMap, canonical_points, chamfer_points, resample
from .raster import BevMask


@dataclass(frozen=True)
class ApConfig:
    thresholds: tuple = (0.5, 1.0, 1.5)
    n_samples: int = 100

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t or any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be positive and strictly increasing")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        object.__setattr__(self, "thresholds", t)


@dataclass
class EvalReport:
    thresholds: tuple
    ap: dict = field(default_factory=dict)        # class key -> [AP per threshold]
    class_ap: dict = field(default_factory=dict)  # class key -> mean over thresholds
    mean_ap: float = 0.0
    counts: dict = field(default_factory=dict)    # class key -> [{"tp","fp","fn"} per threshold]

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "ap": {k: list(v) for k, v in self.ap.items()},
            "class_ap": dict(self.class_ap),
            "mean_ap": self.mean_ap,
            "counts": {k: list(v) for k, v in self.counts.items()},
        }

    def csv_rows(self) -> list[list[str]]:
        """Rows mirroring the ped./div./bdry./mean table layout."""
        head = ["threshold", "ped.", "div.", "bdry.", "mean"]
        rows = [head]
        keys = [c.key for c in MapClass]
        for i, t in enumerate(self.thresholds):
            vals = [self.ap[k][i] for k in keys]
            rows.append([f"{t:g}"] + [f"{100 * v:.1f}" for v in vals]
                        + [f"{100 * np.mean(vals):.1f}"])
        rows.append(["mean"] + [f"{100 * self.class_ap[k]:.1f}" for k in keys]
                    + [f"{100 * self.mean_ap:.1f}"])
        return rows


def average_precision(scores, is_tp, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve.

    ``scores`` / ``is_tp`` must already be in ranking order.
    """
    if n_gt == 0:
        return 1.0 if len(is_tp) == 0 else 0.0
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(is_tp, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(is_tp, dtype=float))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _samples(e: MapElement, n: int) -> np.ndarray:
    return resample(canonical_points(e.points, e.closed), n, e.closed)


def _frame_distances(preds, gts, n):
    ps = [_samples(e, n) for e in preds]
    gs = [_samples(e, n) for e in gts]
    d = np.full((len(preds), len(gts)), np.inf)
    for i, (p, pe) in enumerate(zip(ps, preds)):
        for j, (g, ge) in enumerate(zip(gs, gts)):
            if pe.kind == ge.kind:
                d[i, j] = chamfer_points(p, g)
    return d


def match_class(pred_frames, gt_frames, thresholds, n_samples):
    """Greedy confidence-ordered matching for one class.

    Returns (per-threshold is_tp lists in ranking order, n_gt).
    Confidence ties keep (frame order, element order).
    """
    ranked = []  # (-conf, frame_idx, elem_idx)
    dists = []
    n_gt = 0
    for f, (preds, gts) in enumerate(zip(pred_frames, gt_frames)):
        dists.append(_frame_distances(preds, gts, n_samples))
        n_gt += len(gts)
        for i, e in enumerate(preds):
            conf = 1.0 if e.confidence is None else e.confidence
            ranked.append((-conf, f, i))
    ranked.sort()
    results = []
    for tau in thresholds:
        claimed = [np.zeros(len(g), dtype=bool) for g in gt_frames]
        flags = []
        for _, f, i in ranked:
            d = dists[f][i].copy()
            d[claimed[f]] = np.inf
            ok = False
            if d.size:
                j = int(np.argmin(d))
                if d[j] < tau:
                    claimed[f][j] = True
                    ok = True
            flags.append(ok)
        results.append(flags)
    return results, n_gt


def chamfer_ap(preds, gts, cfg: ApConfig | None = None) -> EvalReport:
    """Chamfer-distance AP per class and threshold over paired frames.

    ``preds`` and ``gts`` are equal-length sequences of VectorMaps; pairs are
    matched by position (their frame ids must agree when both are set).
    """
    cfg = cfg or ApConfig()
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError("prediction and GT frame lists differ in length")
    for p, g in zip(preds, gts):
        if p.frame and g.frame and p.frame != g.frame:
            raise ValueError(f"frame mismatch: {p.frame!r} vs {g.frame!r}")
    report = EvalReport(cfg.thresholds)
    for cls in MapClass:
        pf = [p.of_class(cls) for p in preds]
        gf = [g.of_class(cls) for g in gts]
        flags, n_gt = match_class(pf, gf, cfg.thresholds, cfg.n_samples)
        aps, counts = [], []
        for fl in flags:
            aps.append(average_precision(None, fl, n_gt))
            tp = int(sum(fl))
            counts.append({"tp": tp, "fp": len(fl) - tp, "fn": n_gt - tp})
        report.ap[cls.key] = aps
        report.class_ap[cls.key] = float(np.mean(aps))
        report.counts[cls.key] = counts
    report.mean_ap = float(np.mean([report.class_ap[c.key] for c in MapClass]))
    return report


# ---------------------------------------------------------------------------
# coverage


def coverage_ratio(mask: BevMask) -> float:
    bits = mask.bits
    return float(np.count_nonzero(bits)) / bits.size


def coverage_curve(masks, taus) -> np.ndarray:
    """Fraction of masks whose coverage ratio exceeds each threshold."""
    ratios = np.array([coverage_ratio(m) for m in masks])
    taus = np.asarray(taus, dtype=float)
    if np.any((taus < 0) | (taus > 1)):
        raise ValueError("thresholds must lie in [0, 1]")
    if len(ratios) == 0:
        return np.zeros(len(taus))
    return np.array([np.mean(ratios > t) for t in taus])


def mask_gt(gts: VectorMap, mask: BevMask, min_points: int = 4) -> VectorMap:
    """Restrict GT to the observed area (the "observed area only" protocol).

    Fully observed elements pass through untouched; partially observed ones
    are cut into their observed runs (no resampling) and runs with fewer than
    ``min_points`` points are dropped.
    """
    from .assign import split_element

    out = []
    for e in gts.elements:
        out.extend(split_element(e, mask, min_points=min_points))
    return gts.replace(out)
