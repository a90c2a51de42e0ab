from dataclasses import fields

import jsonschema
import numpy as np

from ordlab.models import B_ORIG, AbstractType, compression_families, rounding_modes
from ordlab.models.compressors import ApplicationMask, CompressionOp
from ordlab.models.model_builder import Layer, LayeredModel

_OP_DEFAULTS = {f.name: f.default for f in fields(CompressionOp)}


def op_to_dict(op: CompressionOp) -> dict:
    """
    JSON-ready descriptor of a compression op; only non-default parameters are kept.

    Example:
        >>> op_to_dict(CompressionOp.quant(4))
        {'family': 'quant_uniform', 'bits': 4}
    """
    out = {"family": op.family}
    for name, default in _OP_DEFAULTS.items():
        if name == "family":
            continue
        value = getattr(op, name)
        if value != default:
            out[name] = list(value) if isinstance(value, tuple) else value
    return out


def op_from_dict(doc: dict) -> CompressionOp:
    """
    Build a compression op from its descriptor.

    Args:
        doc (dict): mapping with a ``family`` key plus any ``CompressionOp`` parameters.

    Returns:
        CompressionOp: the validated op.

    Raises:
        NotImplementedError: for unknown families.
        TypeError: for unknown parameters.
        ValueError: for parameters outside their valid ranges.
    """
    doc = dict(doc)
    family = doc.pop("family", None)
    if family not in compression_families:
        raise NotImplementedError(f"The compression family '{family}' is not implemented.")
    unknown = set(doc) - set(_OP_DEFAULTS)
    if unknown:
        raise TypeError(f"Unknown parameters {sorted(unknown)} for {family}.")
    if "layers" in doc and doc["layers"] is not None:
        doc["layers"] = tuple(doc["layers"])
    return CompressionOp(family=family, **doc)


def layer_to_dict(layer: Layer) -> dict:
    return {
        "weight": layer.weight.ravel().tolist(),
        "pruned": layer.pruned.ravel().astype(int).tolist(),
        "bits": layer.bits,
        "act_bits": layer.act_bits,
        "act_rounding": layer.act_rounding,
        "act_seed": layer.act_seed,
        "rotated": layer.rotated,
        "shared_group": layer.shared_group,
    }


LAYER_SCHEMA = {
    "type": "object",
    "required": ["weight", "pruned", "bits", "act_bits", "act_rounding", "act_seed", "rotated", "shared_group"],
    "additionalProperties": False,
    "properties": {
        "weight": {"type": "array", "items": {"type": "number"}},
        "pruned": {"type": "array", "items": {"enum": [0, 1]}},
        "bits": {"type": "integer", "minimum": 2, "maximum": B_ORIG},
        "act_bits": {"type": ["integer", "null"], "minimum": 2},
        "act_rounding": {"enum": list(rounding_modes)},
        "act_seed": {"type": "integer", "minimum": 0},
        "rotated": {"type": "boolean"},
        "shared_group": {"type": ["integer", "null"], "minimum": 0},
    },
}

# layer i stores its (dims[i + 1], dims[i]) weight and pruning mask flattened row-major;
# calib_input is a features x samples matrix
MODEL_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "ordlab layered model",
    "type": "object",
    "required": ["model_id", "seed", "dims", "layers", "calib_input", "label_targets"],
    "additionalProperties": False,
    "properties": {
        "model_id": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
        "layers": {"type": "array", "items": LAYER_SCHEMA, "minItems": 1},
        "calib_input": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "label_targets": {"type": ["array", "null"], "items": {"type": "integer"}},
    },
}


def model_to_dict(m: LayeredModel) -> dict:
    """Lossless JSON-ready document of a model laid out as ``MODEL_SCHEMA``."""
    return {
        "model_id": m.model_id,
        "seed": m.seed,
        "dims": m.dims,
        "layers": [layer_to_dict(layer) for layer in m.layers],
        "calib_input": m.calib_input.tolist(),
        "label_targets": None if m.label_targets is None else m.label_targets.tolist(),
    }


def model_from_dict(doc: dict) -> LayeredModel:
    """
    Rebuild a model from its ``MODEL_SCHEMA`` document.

    Raises:
        ValueError: if the document breaks the schema or a layer does not fit ``dims``.
    """
    try:
        jsonschema.validate(instance=doc, schema=MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        location = "/".join(str(key) for key in exc.absolute_path) or "<root>"
        raise ValueError(f"Invalid model document at {location}: {exc.message}")
    dims = doc["dims"]
    if len(dims) != len(doc["layers"]) + 1:
        raise ValueError(f"dims {dims} do not describe {len(doc['layers'])} layers.")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        entry = dict(entry)
        shape = (dims[i + 1], dims[i])
        weight, pruned = entry.pop("weight"), entry.pop("pruned")
        if len(weight) != shape[0] * shape[1] or len(pruned) != len(weight):
            raise ValueError(f"Layer {i} does not hold {shape[0]} x {shape[1]} weights.")
        weight = np.array(weight, dtype=np.float64).reshape(shape)
        pruned = np.array(pruned, dtype=bool).reshape(shape)
        layers.append(Layer(weight, pruned, **entry))
    return LayeredModel(
        layers=tuple(layers),
        calib_input=np.array(doc["calib_input"], dtype=np.float64),
        label_targets=doc["label_targets"],
        model_id=doc["model_id"],
        seed=doc["seed"],
    )


def mask_to_dict(mask: ApplicationMask) -> dict:
    return {
        "op": mask.op,
        "level": mask.level.name.lower(),
        "absorbable": mask.absorbable,
        "shapes": [list(s) for s in mask.shapes],
        "values": [v.astype(int).tolist() for v in mask.values],
    }


def mask_from_dict(doc: dict) -> ApplicationMask:
    return ApplicationMask(
        level=AbstractType.from_name(doc["level"]),
        values=tuple(np.array(v, dtype=bool) for v in doc["values"]),
        shapes=tuple(tuple(s) for s in doc["shapes"]),
        op=doc.get("op", ""),
        absorbable=doc.get("absorbable", True),
    )
