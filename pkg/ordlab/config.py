import functools
import hashlib
import inspect
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from ordlab import logger
from ordlab.models import (
    AbstractType,
    compression_families,
    metric_kinds,
    prune_families,
    quant_scopes,
    rounding_modes,
    scoring_modes,
)

experiment_kinds = [
    "coa_grid",
    "cer_curve",
    "theorem1",
    "theorem2",
    "violation",
    "multistage",
    "mpq",
    "rotation_prune",
    "plan",
    "share",
]


class ConfigError(ValueError):
    """Invalid experiment configuration, optionally anchored to a line of the source file."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        self.message = message
        location = self.path or "<config>"
        if line is not None:
            location = f"{location}:{line}"
        super().__init__(f"{location}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    dims: tuple[int, ...] = (8, 8, 8, 8, 8, 8, 8)
    n_samples: int = 128
    metric_kind: str = "synthetic_exact"
    beta: float = 1.0
    base_value: float = 0.0
    prune_fractions: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    bits: tuple[int, ...] = (4, 5, 6, 7, 8)
    prune_family: str = "prune_unstructured"
    quant_scope: str = "tensor"
    rounding: str = "nearest"
    rotate: bool = False
    scoring: str = "error"
    group_size: int = 2
    steps: tuple[dict, ...] = ()
    total_p: float = 0.3
    splits: tuple[tuple[float, float], ...] = (
        (0.05, 0.25),
        (0.1, 0.2),
        (0.15, 0.15),
    )
    avg_bits: tuple[float, ...] = (6.0, 5.0, 4.0, 3.0)
    bit_menu: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
    trials: int = 1
    instances: int = 100
    tolerance: float = 1e-8
    output_dir: str = "results"

    def as_kwargs(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_dict(self) -> dict:
        """Nested, JSON-ready representation mirroring the config file layout."""
        flat = asdict(self)
        doc = {"kind": flat.pop("kind"), "seed": flat.pop("seed")}
        doc["model"] = {key: _plain(flat.pop(key)) for key in _MODEL_KEYS}
        doc["metric"] = {
            "kind": flat.pop("metric_kind"),
            "beta": flat.pop("beta"),
            "base_value": flat.pop("base_value"),
        }
        doc["operators"] = {key: _plain(flat.pop(key)) for key in _OPERATOR_KEYS}
        doc.update({key: _plain(value) for key, value in flat.items()})
        return doc

    def replace(self, **changes) -> "ExperimentConfig":
        return config_from_dict({**self.as_kwargs(), **changes}, flat=True)


_MODEL_KEYS = ("dims", "n_samples")
_OPERATOR_KEYS = (
    "prune_fractions",
    "bits",
    "prune_family",
    "quant_scope",
    "rounding",
    "rotate",
    "scoring",
    "group_size",
    "steps",
    "total_p",
    "splits",
    "avg_bits",
    "bit_menu",
)
_number = {"type": "number"}
_fraction = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_bit = {"type": "integer", "minimum": 2, "maximum": 16}
_layer_count = {"type": "integer", "minimum": 1}

STEP_SCHEMA = {
    "type": "object",
    "required": ["family"],
    "additionalProperties": False,
    "properties": {
        "family": {"enum": list(compression_families)},
        "fraction": _fraction,
        "bits": _bit,
        "rounding": {"enum": list(rounding_modes)},
        "scope": {"enum": list(quant_scopes)},
        "group_size": {"type": "integer", "minimum": 2},
        "rotate": {"type": "boolean"},
        "clip": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "scoring": {"enum": list(scoring_modes)},
        "layers": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
        "seed": {"type": "integer", "minimum": 0},
    },
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "ordlab experiment configuration",
    "type": "object",
    "required": ["kind", "seed"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": experiment_kinds},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {"type": "array", "items": _layer_count, "minItems": 2},
                "n_samples": _layer_count,
            },
        },
        "metric": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(metric_kinds)},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "base_value": _number,
            },
        },
        "operators": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "prune_fractions": {"type": "array", "items": _fraction, "minItems": 1},
                "bits": {"type": "array", "items": _bit, "minItems": 1},
                "prune_family": {"enum": list(prune_families)},
                "quant_scope": {"enum": list(quant_scopes)},
                "rounding": {"enum": list(rounding_modes)},
                "rotate": {"type": "boolean"},
                "scoring": {"enum": list(scoring_modes)},
                "group_size": {"type": "integer", "minimum": 2},
                "steps": {"type": "array", "items": STEP_SCHEMA},
                "total_p": _fraction,
                "splits": {
                    "type": "array",
                    "items": {"type": "array", "items": _fraction, "minItems": 2, "maxItems": 2},
                    "minItems": 1,
                },
                "avg_bits": {"type": "array", "items": {"type": "number", "minimum": 2, "maximum": 16}, "minItems": 1},
                "bit_menu": {"type": "array", "items": _bit, "minItems": 1},
            },
        },
        "trials": {"type": "integer", "minimum": 1},
        "instances": {"type": "integer", "minimum": 1},
        "tolerance": {"type": "number", "minimum": 0},
        "output_dir": {"type": "string"},
    },
}

_VALIDATOR = jsonschema.Draft7Validator(CONFIG_SCHEMA)

# defaults that differ per kind; they fill keys a document leaves out
KIND_DEFAULTS = {
    "theorem1": {"prune_family": "prune_layer", "prune_fractions": (0.25,)},
    "theorem2": {"prune_family": "prune_layer", "prune_fractions": (0.25,)},
    "violation": {"prune_family": "prune_layer", "prune_fractions": (0.17, 0.34, 0.5)},
}
# kinds whose runners prune every fraction of ``prune_fractions`` with ``prune_family``
_FRACTION_KINDS = ("coa_grid", "cer_curve", "theorem1", "theorem2", "violation", "rotation_prune", "share")
# kinds that need a disjoint pruning family and quantization scope
_DISJOINT_KINDS = ("theorem1", "violation")
_EXACT_METRIC_KINDS = ("theorem1", "theorem2")

_CASTS = {
    "dims": lambda v: tuple(int(d) for d in v),
    "beta": float,
    "base_value": float,
    "prune_fractions": lambda v: tuple(float(p) for p in v),
    "bits": lambda v: tuple(int(b) for b in v),
    "steps": lambda v: tuple(dict(step) for step in v),
    "total_p": float,
    "splits": lambda v: tuple(tuple(float(p) for p in pair) for pair in v),
    "avg_bits": lambda v: tuple(float(b) for b in v),
    "bit_menu": lambda v: tuple(int(b) for b in v),
    "tolerance": float,
}


def _plain(value):
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _node_line(node: yaml.Node | None, path) -> int | None:
    """1-based line of the node at ``path`` in a composed document, or of its deepest existing parent."""
    if node is None:
        return None
    line = node.start_mark.line + 1
    for key in path:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == str(key):
                    line, node = key_node.start_mark.line + 1, value_node
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _error_path(error: jsonschema.ValidationError) -> list:
    path = list(error.absolute_path)
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        known = error.schema.get("properties", {})
        extra = [key for key in error.instance if key not in known]
        if extra:
            path.append(extra[0])
    return path


def _location(path) -> str:
    return "/".join(str(key) for key in path) or "<root>"


def _check_schema(raw, node: yaml.Node | None, path: str | Path | None):
    errors = list(_VALIDATOR.iter_errors(raw))
    if not errors:
        return
    if node is None:
        error, line = jsonschema.exceptions.best_match(errors), None
    else:
        line, error = min(((_node_line(node, _error_path(e)), e) for e in errors), key=lambda pair: pair[0])
    raise ConfigError(f"{_location(error.absolute_path)}: {error.message}", path=path, line=line)


def _flatten(raw: dict) -> dict:
    values = {k: raw[k] for k in ("kind", "seed", "trials", "instances", "tolerance", "output_dir") if k in raw}
    values.update(raw.get("model", {}))
    metric = raw.get("metric", {})
    if "kind" in metric:
        values["metric_kind"] = metric["kind"]
    values.update({k: metric[k] for k in ("beta", "base_value") if k in metric})
    values.update(raw.get("operators", {}))
    for key, default in KIND_DEFAULTS.get(values["kind"], {}).items():
        values.setdefault(key, default)
    return {key: _CASTS[key](value) if key in _CASTS else value for key, value in values.items()}


def _unit_count(dims, family: str) -> int:
    level = prune_families[family]
    if level == AbstractType.LAYER:
        return len(dims) - 1
    if level == AbstractType.ROW:
        return sum(dims[1:])
    return sum(a * b for a, b in zip(dims, dims[1:]))


def _check_semantics(config: "ExperimentConfig", node: yaml.Node | None, path: str | Path | None):
    from ordlab.data_utils import op_from_dict

    def fail(message, *keys):
        raise ConfigError(message, path=path, line=_node_line(node, keys))

    for i, step in enumerate(config.steps):
        try:
            op_from_dict(step)
        except (ValueError, NotImplementedError, TypeError) as exc:
            fail(f"operators/steps/{i}: {exc}", "operators", "steps", i)
    if config.kind in _FRACTION_KINDS:
        n = _unit_count(config.dims, config.prune_family)
        for i, p in enumerate(config.prune_fractions):
            k = int(np.floor(p * n + 0.5))
            if not 0 < k < n:
                fail(
                    f"operators/prune_fractions/{i}: {p:g} of {n} {config.prune_family} units selects {k}; "
                    "it must select at least one and not all.",
                    "operators", "prune_fractions", i,
                )
    if config.kind in _DISJOINT_KINDS and prune_families[config.prune_family] < quant_scopes[config.quant_scope]:
        fail(
            f"operators/prune_family: {config.kind} needs disjoint selectivity, which "
            f"{config.prune_family} lacks with {config.quant_scope}-scope quantization.",
            "operators", "prune_family",
        )
    if config.kind in _EXACT_METRIC_KINDS and config.metric_kind != "synthetic_exact":
        fail(f"metric/kind: {config.kind} needs the synthetic_exact metric.", "metric", "kind")


def config_from_dict(
    raw: dict, node: yaml.Node | None = None, path: str | Path | None = None, flat: bool = False
) -> ExperimentConfig:
    """
    Validate a raw configuration mapping and build an ``ExperimentConfig``.

    Args:
        raw (dict): parsed config document (nested layout) or, with ``flat=True``,
            a mapping of ``ExperimentConfig`` field names.
        node (yaml.Node | None): composed source document, used to anchor errors to lines.
        path (str | Path | None): source path for error messages.
        flat (bool): interpret ``raw`` as flat field names.

    Returns:
        ExperimentConfig: the validated configuration. Keys the document leaves out take
        the kind's entry in ``KIND_DEFAULTS`` first, then the field default.

    Raises:
        ConfigError: on any schema or range violation, or a combination the kind cannot run.
    """
    if flat:
        try:
            raw = ExperimentConfig(**raw).to_dict()
        except TypeError as exc:
            raise ConfigError(str(exc), path=path)
    _check_schema(raw, node, path)
    config = ExperimentConfig(**_flatten(raw))
    _check_semantics(config, node, path)
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    """Read, parse and validate a JSON or YAML experiment configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration: {exc.strerror}.", path=path)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = None if mark is None else mark.line + 1
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"Cannot parse configuration: {problem}.", path=path, line=line)
    config = config_from_dict(raw, node=yaml.compose(text), path=path)
    logger.debug(f"Loaded {config.kind} configuration from {path}")
    return config


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def configurable(func):
    """Wraps keyword arguments from configuration."""
    signature = inspect.signature(func)

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        """Injects configuration keywords."""
        config = kwargs.pop("config", None)
        if config is None:
            return func(*args, **kwargs)
        elif isinstance(config, ExperimentConfig):
            values = config.as_kwargs()
        elif isinstance(config, dict):
            logger.debug("Use config from dict")
            values = config
        else:
            values = load_config(config).as_kwargs()
        bound = signature.bind_partial(*args, **kwargs).arguments
        conf = {
            name: value
            for name, value in values.items()
            if name in signature.parameters and name not in bound
        }
        conf.update(kwargs)
        return func(*args, **conf)

    return wrapper
