from enum import IntEnum


class AbstractType(IntEnum):
    """Granularity levels, a totally ordered chain."""

    ELEMENT = 0
    ROW = 1
    LAYER = 2
    MODEL = 3

    @classmethod
    def from_name(cls, name: str) -> "AbstractType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise NotImplementedError(f"The abstract type '{name}' is not implemented.")


def least_upper_type(*levels: AbstractType) -> AbstractType:
    return AbstractType(max(levels))


B_ORIG = 16

prune_families = {
    "prune_unstructured": AbstractType.ELEMENT,
    "prune_row": AbstractType.ROW,
    "prune_layer": AbstractType.LAYER,
}
quant_families = {
    "quant_uniform": None,  # granularity follows the scale scope
}
share_families = {
    "share": AbstractType.LAYER,
}
compression_families = {**prune_families, **quant_families, **share_families}

# family order used for tie-breaks in the planner
family_order = list(compression_families)

quant_scopes = {
    "row": AbstractType.ROW,
    "tensor": AbstractType.LAYER,
}
rounding_modes = [
    "nearest",
    "stochastic",
]
scoring_modes = [
    "error",
    "magnitude",
]
metric_kinds = [
    "synthetic_exact",
    "task_accuracy",
]
