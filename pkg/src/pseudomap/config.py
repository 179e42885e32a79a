"""Single JSON document holding every tunable of the pipeline."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .assign import CostParams
from .errors import FormatError
from .formats import dumps, read_json, spec_from_dict
from .geometry import BevSpec
from .losses import LossParams
from .metrics import ApConfig
from .raster import StructuringElement
from .vectorize import VectorizeParams

ENV_VAR = "PSEUDOMAP_CONFIG"


@dataclass(frozen=True)
class SurfelParams:
    offset_r: float = 7.0
    spacing: float = 0.25
    alpha_min: float = 0.05
    truncate: float = 3.0

    def __post_init__(self):
        if self.offset_r <= 0 or self.spacing <= 0 or self.truncate <= 0:
            raise ValueError("offset_r, spacing and truncate must be positive")
        if not 0 <= self.alpha_min <= 1:
            raise ValueError("alpha_min must lie in [0, 1]")


@dataclass(frozen=True)
class SynthParams:
    dash_pattern: tuple = (3.0, 6.0)
    marking_width: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "dash_pattern", tuple(float(x) for x in self.dash_pattern))
        on, off = self.dash_pattern
        if on <= 0 or off < 0 or self.marking_width <= 0:
            raise ValueError("invalid dash pattern or marking width")


@dataclass(frozen=True)
class CoverageParams:
    tau_m: float = 0.3

    def __post_init__(self):
        if not 0 <= self.tau_m <= 1:
            raise ValueError("tau_m must lie in [0, 1]")


_SECTIONS = {
    "vectorize": VectorizeParams,
    "cost": CostParams,
    "ap": ApConfig,
    "loss": LossParams,
    "surfel": SurfelParams,
    "synth": SynthParams,
    "coverage": CoverageParams,
}


@dataclass(frozen=True)
class PipelineConfig:
    bev_range: BevSpec = field(default_factory=BevSpec)
    vectorize: VectorizeParams = field(default_factory=VectorizeParams)
    cost: CostParams = field(default_factory=CostParams)
    ap: ApConfig = field(default_factory=ApConfig)
    loss: LossParams = field(default_factory=LossParams)
    surfel: SurfelParams = field(default_factory=SurfelParams)
    synth: SynthParams = field(default_factory=SynthParams)
    coverage: CoverageParams = field(default_factory=CoverageParams)

    def to_dict(self) -> dict:
        out = {"bev_range": self.bev_range.to_dict()}
        for name in _SECTIONS:
            out[name] = _section_to_dict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise FormatError("config: expected an object")
        unknown = set(d) - {"bev_range", *_SECTIONS}
        if unknown:
            raise FormatError(f"config: unknown section(s) {sorted(unknown)}")
        base = cls()
        kw = {}
        if "bev_range" in d:
            merged = {**base.bev_range.to_dict(), **_as_obj(d["bev_range"], "bev_range")}
            kw["bev_range"] = spec_from_dict(merged, "config.bev_range")
        for name, typ in _SECTIONS.items():
            if name in d:
                kw[name] = _section_from_dict(typ, getattr(base, name),
                                              _as_obj(d[name], name), name)
        return cls(**kw)

    def dumps(self) -> str:
        return dumps(self.to_dict())

    def override(self, section: str, **values) -> "PipelineConfig":
        """Copy with some fields of one section replaced (None values are ignored)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "bev_range":
            return dataclasses.replace(self, bev_range=dataclasses.replace(self.bev_range, **values))
        return dataclasses.replace(
            self, **{section: dataclasses.replace(getattr(self, section), **values)})


def _as_obj(v, where):
    if not isinstance(v, dict):
        raise FormatError(f"config.{where}: expected an object")
    return v


def _encode(v):
    if isinstance(v, StructuringElement):
        return {"shape": v.shape, "size": v.size}
    if isinstance(v, tuple):
        return [_encode(x) for x in v]
    return v


def _section_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if f.name == "weights" and isinstance(obj, LossParams):
            out[f.name] = dict(v)
        else:
            out[f.name] = _encode(v)
    return out


def _section_from_dict(typ, default, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(d) - names
    if unknown:
        raise FormatError(f"config.{where}: unknown field(s) {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        cur = getattr(default, k)
        try:
            if isinstance(cur, StructuringElement):
                v = StructuringElement(**_as_obj(v, f"{where}.{k}"))
            elif typ is LossParams and k == "weights":
                v = tuple({**dict(cur), **_as_obj(v, f"{where}.{k}")}.items())
            elif isinstance(cur, tuple):
                v = tuple(v)
            elif isinstance(cur, bool) or (isinstance(cur, int) and not isinstance(cur, bool)):
                if isinstance(v, float) and v.is_integer():
                    v = int(v)
            elif isinstance(cur, float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
        except TypeError as exc:
            raise FormatError(f"config.{where}.{k}: {exc}") from None
        kw[k] = v
    try:
        return dataclasses.replace(default, **kw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"config.{where}: {exc}") from None


def load_config(path=None) -> PipelineConfig:
    """Load from ``path``, else from $PSEUDOMAP_CONFIG, else defaults."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return PipelineConfig()
    return PipelineConfig.from_dict(read_json(path))
