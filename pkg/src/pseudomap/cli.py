"""Command-line front end.

Every command reads and writes the package file formats, so the stages can
be chained through files::

    pseudomap synth --seed 1 --out scene
    pseudomap vectorize scene/raster/scene-1.pgm --out pred
    pseudomap eval --pred pred --gt scene/gt
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import formats
from .assign import solve_global
from .config import ENV_VAR, PipelineConfig, load_config
from .errors import BudgetExceededError, FormatError, InfeasibleAssignmentError
from .geometry import BevSpec, Pose2
from .losses import compute_losses
from .metrics import chamfer_ap, coverage_curve, coverage_ratio, mask_gt
from .raster import PALETTE, RasterClass, StructuringElement
from .surfels import init_meshgrid, paint_from_raster, render_bev, straight_trajectory
from .synth import SceneParams, gen_scene, multi_trip_union, rasterize_gt, trip_masks
from .vectorize import vectorize_bev

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 2, 3, 4


class Context:
    def __init__(self, args, config: PipelineConfig):
        self.args = args
        self.config = config
        self.verbose = args.verbose
        self.workers = max(1, args.workers)
        self.debug_dir = Path(args.debug_dir) if args.debug_dir else None

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        if self.verbose:
            print(f"[{name}] {time.perf_counter() - t0:.3f} s", file=sys.stderr)

    def map(self, fn, items):
        """Ordered parallel map over independent frames."""
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


# ---------------------------------------------------------------------------
# debug images


def _debug_png(path: Path, classes: np.ndarray, spec: BevSpec, vmap=None, mask=None):
    from PIL import Image, ImageDraw

    lut = np.zeros((256, 3), dtype=np.uint8)
    for c in RasterClass:
        lut[int(c)] = PALETTE[c]
    rgb = lut[classes]
    if mask is not None:
        rgb = np.where(mask.bits[..., None], rgb, rgb // 3)
    img = Image.fromarray(rgb, "RGB")
    if vmap is not None:
        draw = ImageDraw.Draw(img)
        colors = {0: (255, 0, 0), 1: (255, 255, 0), 2: (0, 200, 0)}
        for e in vmap.elements:
            p = e.points
            cols = (p[:, 0] - spec.x_min) * spec.resolution
            rows = (spec.y_max - p[:, 1]) * spec.resolution
            xy = [(float(c), float(r)) for c, r in zip(cols, rows)]
            if e.closed:
                xy.append(xy[0])
            draw.line(xy, fill=colors[int(e.cls)], width=2)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    spec = cfg.bev_range
    dash = tuple(a.dash) if a.dash else cfg.synth.dash_pattern
    out = Path(a.out)
    fov = math.radians(a.fov) if a.fov is not None else 2 * math.pi
    rng_m = a.range if a.range is not None else math.inf

    def one(seed):
        params = SceneParams(seed=seed, n_lanes=a.lanes, lane_width=a.lane_width,
                             curvature=a.curvature, n_crossings=a.crossings, dash_pattern=dash)
        gt = gen_scene(params, spec)
        raster = rasterize_gt(gt, spec, dash, cfg.synth.marking_width)
        masks = trip_masks(seed, a.trips, spec, fov, a.blobs, rng_m)
        return seed, gt, raster, masks

    with ctx.stage("synth"):
        scenes = ctx.map(one, range(a.seed, a.seed + a.count))
    frames = []
    with ctx.stage("write"):
        for seed, gt, raster, masks in scenes:
            name = gt.frame
            gt_path = out / "gt" / f"{name}.json"
            r_path = out / "raster" / f"{name}.pgm"
            m_path = out / "mask" / f"{name}.pgm"
            formats.write_vectormap(gt_path, gt)
            formats.write_raster(r_path, raster)
            formats.write_mask(m_path, multi_trip_union(masks))
            trips = []
            for k, m in enumerate(masks):
                t_path = out / "trips" / f"{name}_trip{k}.pgm"
                formats.write_mask(t_path, m)
                trips.append(_rel(t_path, out))
            frames.append({"frame": name, "seed": seed, "gt": _rel(gt_path, out),
                           "raster": _rel(r_path, out), "mask": _rel(m_path, out),
                           "trips": trips})
            if ctx.debug_dir:
                _debug_png(ctx.debug_dir / f"{name}_gt.png", raster.classes, spec, gt,
                           multi_trip_union(masks))
        formats.atomic_write(out / "manifest.json", formats.dumps({"frames": frames}))
    return EXIT_OK


def cmd_render(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    sp = cfg.surfel
    offset_r = a.offset_r or sp.offset_r
    spacing = a.spacing or sp.spacing
    pose = Pose2(*a.pose) if a.pose else Pose2()
    with ctx.stage("meshgrid"):
        if a.surfels:
            grid = formats.read_surfels(a.surfels)
        else:
            if not a.raster:
                raise FormatError("render needs --raster or --surfels")
            src = formats.read_raster(a.raster)
            half = a.length / 2
            traj = straight_trajectory(a.length, a.step)
            traj = type(traj).from_poses([Pose2(p.x, p.y - half, p.heading) for p in traj.poses])
            grid = paint_from_raster(init_meshgrid(traj, offset_r, spacing), src)
    spec = formats.read_raster(a.raster).spec if a.raster else cfg.bev_range
    with ctx.stage("render"):
        out = render_bev(grid, pose, spec, sp.alpha_min, sp.truncate)
    with ctx.stage("write"):
        formats.write_raster(a.out, out.raster)
        if a.mask_out:
            formats.write_mask(a.mask_out, out.raster.mask())
        if a.surfels_out:
            formats.write_surfels(a.surfels_out, grid)
    if ctx.debug_dir:
        _debug_png(ctx.debug_dir / (Path(a.out).stem + "_render.png"), out.raster.classes, spec)
    return EXIT_OK


def _vectorize_params(ctx: Context):
    a = ctx.args
    ctx.config = ctx.config.override(
        "vectorize", eps1=a.eps1, max_points=a.max_points, min_area=a.min_area,
        kernel=StructuringElement("disk", a.kernel) if a.kernel else None)
    return ctx.config.vectorize


def cmd_vectorize(ctx: Context) -> int:
    a = ctx.args
    params = _vectorize_params(ctx)
    out = Path(a.out)
    inputs = [Path(p) for p in a.rasters]

    def one(path):
        raster = formats.read_raster(path)
        vmap, mask = vectorize_bev(raster, params, frame=path.stem)
        return path, raster, vmap, mask

    with ctx.stage("vectorize"):
        results = ctx.map(one, inputs)
    with ctx.stage("write"):
        for path, raster, vmap, mask in results:
            formats.write_vectormap(out / f"{path.stem}.json", vmap)
            formats.write_mask(out / f"{path.stem}.mask.pgm", mask)
            if ctx.debug_dir:
                _debug_png(ctx.debug_dir / f"{path.stem}_vec.png", raster.classes, raster.spec,
                           vmap, mask)
    return EXIT_OK


def cmd_assign(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    Q = formats.read_vectormap(a.pred).elements
    G = formats.read_vectormap(a.labels).elements
    mask = formats.read_mask(a.mask)
    gate = None if a.no_gate else "default"
    with ctx.stage("assign"):
        result = solve_global(Q, G, mask, cfg.cost, a.method, a.max_card, gate)
    formats.write_assignment(a.out, result)
    return EXIT_OK


def cmd_loss(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    Q = formats.read_vectormap(a.pred).elements
    G = formats.read_vectormap(a.labels).elements
    mask = formats.read_mask(a.mask)
    result = formats.read_assignment(a.assignment, len(Q))
    with ctx.stage("loss"):
        lb = compute_losses(Q, G, mask, result, cfg.loss)
    formats.atomic_write(a.out, formats.dumps(lb.to_dict(gradients=a.gradients)))
    return EXIT_OK


def cmd_eval(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    ap_cfg = cfg.ap
    if a.thresholds:
        ctx.config = cfg.override("ap", thresholds=tuple(a.thresholds))
        ap_cfg = ctx.config.ap
    pred_dir, gt_dir = Path(a.pred), Path(a.gt)
    names = sorted(p.name for p in gt_dir.glob("*.json"))
    if not names:
        raise FormatError(f"no GT JSON files in {gt_dir}")

    def load(name):
        gt = formats.read_vectormap(gt_dir / name)
        pp = pred_dir / name
        pred = formats.read_vectormap(pp) if pp.exists() else gt.replace([])
        if a.observed_only:
            if not a.masks:
                raise FormatError("--observed-only needs --masks")
            mask = formats.read_mask(Path(a.masks) / (Path(name).stem + ".pgm"))
            gt = mask_gt(gt, mask, cfg.cost.min_points)
        return pred, gt

    with ctx.stage("load"):
        pairs = ctx.map(load, names)
    with ctx.stage("eval"):
        report = chamfer_ap([p for p, _ in pairs], [g for _, g in pairs], ap_cfg)
    doc = {"frames": [Path(n).stem for n in names], **report.to_dict()}
    text = formats.dumps(doc)
    if a.out:
        formats.atomic_write(a.out, text)
    else:
        sys.stdout.write(text)
    if a.csv:
        formats.atomic_write(a.csv, formats.report_csv(report))
    return EXIT_OK


def cmd_coverage(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.config
    tau = cfg.coverage.tau_m if a.tau is None else a.tau
    paths = [Path(p) for p in a.masks]
    with ctx.stage("coverage"):
        masks = ctx.map(formats.read_mask, paths)
        ratios = [coverage_ratio(m) for m in masks]
        frac = float(coverage_curve(masks, [tau])[0]) if masks else 0.0
    if a.out:
        taus = [k / 20 for k in range(21)]
        doc = {
            "tau_m": tau,
            "fraction_above": frac,
            "ratios": {p.name: r for p, r in zip(paths, ratios)},
            "kept": [p.name for p, r in zip(paths, ratios) if r >= tau],
            "curve": {"taus": taus, "fractions": coverage_curve(masks, taus).tolist()},
        }
        formats.atomic_write(a.out, formats.dumps(doc))
    print(f"{frac:.2f}")
    return EXIT_OK


def cmd_config(ctx: Context) -> int:
    text = ctx.config.dumps()
    if ctx.args.out:
        formats.atomic_write(ctx.args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config JSON (default: ${ENV_VAR} or built-in)")
    common.add_argument("--verbose", "-v", action="store_true", help="per-stage timings on stderr")
    common.add_argument("--workers", type=int, default=1, help="frames processed in parallel")
    common.add_argument("--debug-dir", help="write colorized PNG renders here")

    p = argparse.ArgumentParser(prog="pseudomap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1, help="scenes with seeds seed..seed+count-1")
    s.add_argument("--lanes", type=int, default=2)
    s.add_argument("--lane-width", type=float, default=3.5)
    s.add_argument("--curvature", type=float, default=0.0, help="1/m, positive turns right")
    s.add_argument("--crossings", type=int, default=1)
    s.add_argument("--dash", type=float, nargs=2, metavar=("ON", "OFF"))
    s.add_argument("--fov", type=float, help="camera field of view, degrees (default 360)")
    s.add_argument("--range", type=float, help="camera range, meters (default unlimited)")
    s.add_argument("--blobs", type=int, default=0, help="occluding disks per trip")
    s.add_argument("--trips", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", parents=[common], help="surfel meshgrid + BEV splat")
    s.add_argument("--raster", help="semantic raster used to paint the surfels")
    s.add_argument("--surfels", help="surfel grid JSON (instead of --raster)")
    s.add_argument("--offset-r", type=float)
    s.add_argument("--spacing", type=float)
    s.add_argument("--length", type=float, default=40.0, help="trajectory length, meters")
    s.add_argument("--step", type=float, default=1.0, help="pose spacing, meters")
    s.add_argument("--pose", type=float, nargs=3, metavar=("X", "Y", "HEADING"))
    s.add_argument("--out", required=True, help="output raster PGM")
    s.add_argument("--mask-out")
    s.add_argument("--surfels-out")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("vectorize", parents=[common], help="raster -> vector map")
    s.add_argument("rasters", nargs="+")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--eps1", type=float)
    s.add_argument("--max-points", type=int)
    s.add_argument("--kernel", type=int, help="lane dilation disk size, pixels")
    s.add_argument("--min-area", type=int)
    s.set_defaults(func=cmd_vectorize)

    s = sub.add_parser("assign", parents=[common], help="global hybrid assignment")
    s.add_argument("--pred", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=("auto", "ilp", "hungarian"), default="auto")
    s.add_argument("--max-card", type=int)
    s.add_argument("--no-gate", action="store_true", help="disable spatial subset gating")
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("loss", parents=[common], help="mask-aware loss breakdown")
    s.add_argument("--pred", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--assignment", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gradients", action="store_true")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("eval", parents=[common], help="Chamfer AP")
    s.add_argument("--pred", required=True, help="directory of prediction JSON")
    s.add_argument("--gt", required=True, help="directory of GT JSON (paired by filename)")
    s.add_argument("--masks", help="directory of <frame>.pgm masks")
    s.add_argument("--observed-only", action="store_true")
    s.add_argument("--thresholds", type=float, nargs="+")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("coverage", parents=[common], help="coverage ratio filter")
    s.add_argument("masks", nargs="+")
    s.add_argument("--tau", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("config", parents=[common], help="print the effective config")
    s.add_argument("--dump", action="store_true", help="emit full JSON (default)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args, load_config(args.config))
        return args.func(ctx)
    except InfeasibleAssignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
