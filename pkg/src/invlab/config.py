"""Experiment configuration: JSON schema, parsing and serialisation."""

import json
from dataclasses import asdict, dataclass, field, fields

import jsonschema

from .errors import ConfigError
from .inversion import parse_method
from .schedule import DEFAULT_KIND, DEFAULT_PARAMS, DEFAULT_T, KINDS

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["trials"],
    "properties": {
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(KINDS)},
                "T": _POS_INT,
                "params": {"type": "object", "additionalProperties": _NUM},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"N": {"type": "integer", "minimum": 2},
                           "offset": {"type": "integer", "minimum": 0}},
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gaussian", "gmm"]},
                "variance": {"type": "number", "exclusiveMinimum": 0},
                "file": {"type": ["string", "null"]},
                "K": _POS_INT,
                "mean_scale": {"type": "number", "minimum": 0},
                "var_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                              "minItems": 2, "maxItems": 2},
            },
        },
        "error": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["gamma"],
            "properties": {
                "gamma": {"oneOf": [{"type": "number", "minimum": 0},
                                    {"type": "array", "items": {"type": "number", "minimum": 0},
                                     "minItems": 1}]},
                "rho": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "methods": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
        "extra_iters": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "trials": _POS_INT,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "dim": _POS_INT,
        "stats": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bins": _POS_INT,
                "estimators": {"type": "array", "minItems": 1,
                               "items": {"enum": ["ddim-prev", "ife", "no-approx"]}},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": ["string", "null"]}
                           for k in ("csv", "json", "summary_csv", "trajectory", "histograms")},
        },
    },
}


@dataclass
class ScheduleSpec:
    kind: str = DEFAULT_KIND
    T: int = DEFAULT_T
    params: dict = None

    def __post_init__(self):
        if self.params is None:
            self.params = {} if self.kind == "cosine" else dict(DEFAULT_PARAMS)


@dataclass
class GridSpec:
    N: int = 50
    offset: int = 1


@dataclass
class ModelSpec:
    kind: str = "gmm"
    variance: float = 1.0
    file: str = None
    K: int = 3
    mean_scale: float = 1.0
    var_range: list = field(default_factory=lambda: [0.05, 0.25])


@dataclass
class ErrorSpec:
    gamma: object = 0.01
    rho: float = 0.0


@dataclass
class StatsSpec:
    bins: int = 50
    estimators: list = field(default_factory=lambda: ["ddim-prev", "ife", "no-approx"])


@dataclass
class OutputSpec:
    csv: str = None
    json: str = None
    summary_csv: str = None
    trajectory: str = None
    histograms: str = None


@dataclass
class ExperimentConfig:
    trials: int
    dim: int = 8
    seed: int = 0
    methods: list = None
    extra_iters: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    error: ErrorSpec = None
    stats: StatsSpec = field(default_factory=StatsSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


_NESTED = {"schedule": ScheduleSpec, "grid": GridSpec, "model": ModelSpec,
           "error": ErrorSpec, "stats": StatsSpec, "output": OutputSpec}


def _field_path(error):
    parts = list(error.absolute_path)
    if error.validator == "required":
        missing = error.message.split("'")[1]
        parts.append(missing)
    elif error.validator == "additionalProperties":
        extra = error.message.split("'")[1]
        parts.append(extra)
    return ".".join(str(p) for p in parts) or "<root>"


def config_from_dict(obj):
    """Validate ``obj`` against :data:`SCHEMA` and build an :class:`ExperimentConfig`."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _field_path(err))
    kw = {}
    for f in fields(ExperimentConfig):
        if f.name not in obj:
            continue
        val = obj[f.name]
        if f.name in _NESTED and val is not None:
            val = _NESTED[f.name](**val)
        kw[f.name] = val
    cfg = ExperimentConfig(**kw)
    if cfg.model.kind == "gmm" and cfg.model.var_range[0] > cfg.model.var_range[1]:
        raise ConfigError("lower bound exceeds upper bound", "model.var_range")
    for j, m in enumerate(cfg.methods or []):
        try:
            parse_method(m)
        except ValueError as exc:
            raise ConfigError(str(exc), f"methods.{j}") from None
    return cfg


def parse_config(path):
    """Read and validate a JSON config file; errors carry the line or field path."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config_text(text)


def parse_config_text(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(obj)
