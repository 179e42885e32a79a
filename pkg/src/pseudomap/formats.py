"""File formats: VectorMap / assignment / surfel JSON and PGM rasters with a JSON sidecar.

Writers are deterministic (fixed key order, shortest round-trip float
repr), so write -> read -> write reproduces the same bytes. Readers are
strict and raise :class:`FormatError` with a line/column or byte offset.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import BevSpec, Kind, MapClass, MapElement, VectorMap
from .raster import PALETTE, BevMask, RasterClass, SemanticRaster

# ---------------------------------------------------------------------------
# generic helpers


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temp file in the same directory + rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def loads(text: str, source: str = "<json>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: invalid JSON: {exc.msg}",
                          f"line {exc.lineno}, column {exc.colno}") from None


def read_json(path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {p}: {exc.strerror}") from None
    return loads(text, str(p))


def _require(d, keys, where, optional=()):
    if not isinstance(d, dict):
        raise FormatError(f"{where}: expected an object")
    unknown = set(d) - set(keys) - set(optional)
    if unknown:
        raise FormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in keys if k not in d]
    if missing:
        raise FormatError(f"{where}: missing field(s) {missing}")


def _number(v, where) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"{where}: expected a number, got {type(v).__name__}")
    return float(v)


# ---------------------------------------------------------------------------
# VectorMap JSON


def spec_to_dict(spec: BevSpec) -> dict:
    return spec.to_dict()


def spec_from_dict(d, where="bev_range") -> BevSpec:
    keys = ("x_min", "x_max", "y_min", "y_max", "resolution")
    _require(d, keys, where)
    try:
        return BevSpec(*(_number(d[k], f"{where}.{k}") for k in keys))
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{where}: {exc}") from None


def element_to_dict(e: MapElement) -> dict:
    return {
        "class": e.cls.key,
        "kind": e.kind.value,
        "confidence": e.confidence,
        "points": [[float(x), float(y)] for x, y in e.points],
    }


def element_from_dict(d, where="element") -> MapElement:
    _require(d, ("class", "kind", "points"), where, optional=("confidence",))
    try:
        cls = MapClass.from_key(d["class"])
    except (KeyError, ValueError):
        raise FormatError(f"{where}.class: unknown class {d['class']!r}") from None
    try:
        kind = Kind(d["kind"])
    except ValueError:
        raise FormatError(f"{where}.kind: unknown kind {d['kind']!r}") from None
    conf = d.get("confidence")
    if conf is not None:
        conf = _number(conf, f"{where}.confidence")
    pts = d["points"]
    if not isinstance(pts, list) or not all(isinstance(p, list) and len(p) == 2 for p in pts):
        raise FormatError(f"{where}.points: expected a list of [x, y] pairs")
    pts = [[_number(v, f"{where}.points[{k}]") for v in p] for k, p in enumerate(pts)]
    try:
        return MapElement(cls, pts, kind, conf)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def vectormap_to_dict(vmap: VectorMap) -> dict:
    return {
        "frame": vmap.frame,
        "bev_range": spec_to_dict(vmap.bev_range),
        "elements": [element_to_dict(e) for e in vmap.elements],
    }


def vectormap_from_dict(d) -> VectorMap:
    _require(d, ("frame", "bev_range", "elements"), "map")
    if not isinstance(d["frame"], str):
        raise FormatError("map.frame: expected a string")
    if not isinstance(d["elements"], list):
        raise FormatError("map.elements: expected a list")
    spec = spec_from_dict(d["bev_range"])
    els = [element_from_dict(e, f"elements[{k}]") for k, e in enumerate(d["elements"])]
    return VectorMap(tuple(els), d["frame"], spec)


def dumps_vectormap(vmap: VectorMap) -> str:
    return dumps(vectormap_to_dict(vmap))


def write_vectormap(path, vmap: VectorMap) -> None:
    atomic_write(path, dumps_vectormap(vmap))


def read_vectormap(path) -> VectorMap:
    return vectormap_from_dict(read_json(path))


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)


def encode_pgm(grid: np.ndarray) -> bytes:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError("PGM needs a 2D grid")
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + g.astype(np.uint8).tobytes()


def decode_pgm(data: bytes, source: str = "<pgm>") -> np.ndarray:
    """Parse a binary PGM; comments and arbitrary whitespace in the header are accepted."""
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated PGM header", f"byte {start}")
        return data[start:pos], start

    magic, at = token()
    if magic != b"P5":
        raise FormatError(f"{source}: not a binary PGM (magic {magic[:8]!r})", f"byte {at}")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, at = token()
        if not tok.isdigit():
            raise FormatError(f"{source}: bad {name} {tok[:16]!r}", f"byte {at}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{source}: maxval must be 255, got {maxval}", f"byte {at}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{source}: missing whitespace after header", f"byte {pos}")
    pos += 1
    body = data[pos:]
    if len(body) != w * h:
        raise FormatError(f"{source}: expected {w * h} pixel bytes, found {len(body)}",
                          f"byte {pos}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def meta_path(pgm_path) -> Path:
    p = Path(pgm_path)
    return p.with_name(p.stem + ".meta.json") if p.suffix == ".pgm" else Path(str(p) + ".meta.json")


def _palette_dict() -> dict:
    return {str(int(c)): {"name": c.name.lower(), "rgb": list(PALETTE[c])} for c in RasterClass}


def write_raster(path, raster: SemanticRaster) -> None:
    atomic_write(path, encode_pgm(raster.classes))
    meta = {"kind": "semantic", "bev_range": spec_to_dict(raster.spec), "palette": _palette_dict()}
    atomic_write(meta_path(path), dumps(meta))


def write_mask(path, mask: BevMask) -> None:
    atomic_write(path, encode_pgm(np.where(mask.bits, 255, 0).astype(np.uint8)))
    meta = {"kind": "mask", "bev_range": spec_to_dict(mask.spec), "palette": None}
    atomic_write(meta_path(path), dumps(meta))


def _read_grid(path, kind):
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {p}: {exc.strerror}") from None
    grid = decode_pgm(data, str(p))
    meta = read_json(meta_path(p))
    _require(meta, ("kind", "bev_range", "palette"), str(meta_path(p)))
    if meta["kind"] != kind:
        raise FormatError(f"{p}: expected a {kind} raster, sidecar says {meta['kind']!r}")
    spec = spec_from_dict(meta["bev_range"], f"{meta_path(p)}: bev_range")
    if grid.shape != spec.shape:
        raise FormatError(f"{p}: PGM is {grid.shape[1]}x{grid.shape[0]}, "
                          f"bev_range implies {spec.width}x{spec.height}")
    return grid, spec


def read_raster(path) -> SemanticRaster:
    grid, spec = _read_grid(path, "semantic")
    bad = np.flatnonzero(grid > max(RasterClass))
    if bad.size:
        r, c = divmod(int(bad[0]), grid.shape[1])
        raise FormatError(f"{path}: unknown class id {int(grid[r, c])}", f"row {r}, col {c}")
    return SemanticRaster(grid, spec)


def read_mask(path) -> BevMask:
    grid, spec = _read_grid(path, "mask")
    bad = np.flatnonzero((grid != 0) & (grid != 255))
    if bad.size:
        r, c = divmod(int(bad[0]), grid.shape[1])
        raise FormatError(f"{path}: mask values must be 0 or 255, got {int(grid[r, c])}",
                          f"row {r}, col {c}")
    return BevMask(grid == 255, spec)


# ---------------------------------------------------------------------------
# assignment / surfels / reports


def write_assignment(path, result) -> None:
    atomic_write(path, dumps(result.to_dict()))


def read_assignment(path, n_pred: int | None = None):
    from .assign import AssignmentResult

    d = read_json(path)
    _require(d, ("matches", "unassigned_preds", "total_cost"), str(path))
    for k, m in enumerate(d["matches"]):
        _require(m, ("pred", "labels", "cost"), f"matches[{k}]", optional=("local",))
    return AssignmentResult.from_dict(d, n_pred)


def surfels_to_dict(grid) -> dict:
    return {
        "spacing": grid.spacing,
        "source_trajectory": [[p.x, p.y, p.heading] for p in grid.source_trajectory],
        "surfels": [
            {
                "center": grid.centers[k].tolist(),
                "rotation": grid.rotations[k].tolist(),
                "scale": grid.scales[k].tolist(),
                "opacity": float(grid.opacities[k]),
                "color": grid.colors[k].tolist(),
                "class_probs": grid.class_probs[k].tolist(),
            }
            for k in range(len(grid))
        ],
    }


def surfels_from_dict(d):
    from .geometry import Pose2
    from .surfels import SurfelGrid

    _require(d, ("spacing", "source_trajectory", "surfels"), "surfels")
    rows = d["surfels"]
    fields = ("center", "rotation", "scale", "opacity", "color", "class_probs")
    for k, s in enumerate(rows):
        _require(s, fields, f"surfels[{k}]")
    try:
        return SurfelGrid(
            [s["center"] for s in rows], [s["rotation"] for s in rows],
            [s["scale"] for s in rows], [s["opacity"] for s in rows],
            [s["color"] for s in rows], [s["class_probs"] for s in rows],
            d["spacing"], [Pose2(*p) for p in d["source_trajectory"]],
        )
    except (ValueError, TypeError) as exc:
        raise FormatError(f"surfels: {exc}") from None


def write_surfels(path, grid) -> None:
    atomic_write(path, dumps(surfels_to_dict(grid)))


def read_surfels(path):
    return surfels_from_dict(read_json(path))


def report_csv(report) -> str:
    return "".join(",".join(row) + "\n" for row in report.csv_rows())
