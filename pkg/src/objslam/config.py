"""Dataclass configs and JSON loading with field-level diagnostics."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

LEVEL_2D = "2d-iou"
LEVEL_PRO = "label-posterior"
LEVEL_QUADRIC = "quadric-iou"
LEVEL_POINTS = "point-ratio"
LEVEL_NEW = "new-landmark"
LEVELS = (LEVEL_2D, LEVEL_PRO, LEVEL_QUADRIC, LEVEL_POINTS)

METHOD_LEVELS = {
    "mlv": LEVELS,
    "2d": (LEVEL_2D,),
    "pro": (LEVEL_PRO,),
    "3d": (LEVEL_QUADRIC, LEVEL_POINTS),
}
METHODS = ("mlv", "jda", "2d", "pro", "3d")


class ConfigError(ValueError):
    """Bad configuration; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str = "", line: Optional[int] = None):
        self.field = field
        self.line = line
        super().__init__(message)

    def to_dict(self) -> dict:
        return {"error": "config", "message": str(self), "field": self.field, "line": self.line}


@dataclass
class EngineConfig:
    delta1: float = 0.5
    delta2: float = 0.4
    delta3: float = 0.5
    window_size: int = 10
    th_objs: int = 3
    th_ids: int = 1000
    th_score: float = 0.8
    n_consist: int = 3
    alpha: float = 1.0
    sigma_pos: float = 20.0
    default_rho: float = 1.0
    num_classes: int = 10
    n_init: int = 3
    # score the new-object option with the uniform label likelihood 1/L (True)
    # or with its bare prior alpha/(N+alpha) (False)
    new_object_likelihood: bool = True
    kf_min_translation: float = 0.05
    kf_min_rotation_deg: float = 5.0
    # a frame that creates a landmark also becomes a keyframe, so the landmark
    # enters the sliding window straight away
    kf_on_new_landmark: bool = True
    levels: tuple = LEVELS
    # "level-major": every detection tries level k before any tries level k+1;
    # "detection-major": each detection runs its whole cascade in turn
    cascade: str = "level-major"
    # depth gate (m) for absorbing map points when no ellipsoid is observed
    point_gate: float = 0.75
    # ... and the normalised-radius gate inside an observed ellipsoid
    point_gate_scale: float = 1.3
    default_depth: float = 2.0
    rotation_measure: str = "trace"
    translation_mode: str = "normalized"
    with_scale: bool = True
    correct_loops: bool = True
    # a correction is applied only if it lowers the RMS landmark residual by more
    # than this many metres; smaller ones are logged but not applied
    min_correction: float = 0.15

    def __post_init__(self):
        self.levels = tuple(self.levels)
        for name in ("delta1", "delta2", "delta3", "th_score"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}", name)
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1", "window_size")
        if self.th_objs < 1 or self.th_ids < 0 or self.n_consist < 1:
            raise ConfigError("loop gates must be positive", "th_objs")
        if self.alpha <= 0 or self.sigma_pos <= 0:
            raise ConfigError("alpha and sigma_pos must be positive", "alpha")
        if not 0.0 < self.default_rho <= 1.0:
            raise ConfigError("default_rho must lie in (0, 1]", "default_rho")
        bad = [lv for lv in self.levels if lv not in LEVELS]
        if bad:
            raise ConfigError(f"unknown verification levels {bad}", "levels")
        if self.rotation_measure not in ("trace", "frobenius", "spectral"):
            raise ConfigError("rotation_measure must be trace|frobenius|spectral", "rotation_measure")
        if self.cascade not in ("level-major", "detection-major"):
            raise ConfigError("cascade must be level-major|detection-major", "cascade")
        if self.translation_mode not in ("normalized", "metric"):
            raise ConfigError("translation_mode must be normalized|metric", "translation_mode")

    def for_method(self, method: str) -> "EngineConfig":
        if method not in METHOD_LEVELS:
            return self
        return dataclasses.replace(self, levels=METHOD_LEVELS[method])


@dataclass
class JDAWeights:
    label: float = 1.0
    distance: float = 1.0
    iou: float = 1.0
    gate: float = 0.8


@dataclass
class ReferenceCriteria:
    max_position: float = 3.0
    max_angle_deg: float = 80.0
    min_id_gap: int = 1000


PRESETS = {
    # 3 m, 80 deg, 1000 id gap; engine gates 3 objects / 1000 ids
    "objs3-gap1000": {"engine": {"th_objs": 3, "th_ids": 1000},
                      "reference": {"max_position": 3.0, "max_angle_deg": 80.0, "min_id_gap": 1000}},
    # co-observed >= 2 objects, id gap 500
    "objs2-gap500": {"engine": {"th_objs": 2, "th_ids": 500},
                     "reference": {"max_position": 3.0, "max_angle_deg": 80.0, "min_id_gap": 500}},
}
REFERENCE_PRESETS = {
    "standard": ReferenceCriteria(3.0, 80.0, 1000),
    "strict": ReferenceCriteria(1.0, 53.0, 1000),
}


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        args = typing.get_args(tp)
        if not args:
            return list(value)
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return tuple(value)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    return value


def from_dict(cls, data: Any, path: str = ""):
    """Build dataclass ``cls`` from a dict, rejecting unknown or mistyped keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}", path)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown} in {cls.__name__}",
                          f"{path}.{unknown[0]}" if path else unknown[0])
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hints[key], value, sub)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(str(exc), f"{path}.{exc.field}" if path else exc.field) from None


def load_json(path: str | Path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", "", exc.lineno) from None


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, list):
            v = [to_dict(x) if dataclasses.is_dataclass(x) else x for x in v]
        out[f.name] = v
    return out


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out

