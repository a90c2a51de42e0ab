from dataclasses import dataclass, replace

import numpy as np

from ordlab import logger
from ordlab.config import configurable
from ordlab.linalg import as_matrix, check_finite, frob_norm_sq, hadamard, matmul, relu
from ordlab.models import B_ORIG, AbstractType, metric_kinds, quant_scopes, rounding_modes


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def quantize_uniform(
    x: np.ndarray,
    bits: int,
    scope: str = "tensor",
    rounding: str = "nearest",
    rng: np.random.Generator | None = None,
    clip: float = 1.0,
) -> np.ndarray:
    """
    Symmetric uniform grid quantizer used for weights and activations.

    The grid spacing is ``s = clip * max|x| / (2^(B-1) - 1)`` over the scope (the whole
    tensor or each row). Values beyond the clipped range saturate to the grid edge.

    Args:
        x (np.ndarray): values to quantize.
        bits (int): target bit-width B. ``B >= 16`` returns an unchanged copy.
        scope (str): "tensor" or "row".
        rounding (str): "nearest" or "stochastic".
        rng (np.random.Generator | None): random source, required for stochastic rounding.
        clip (float): fraction of the absolute maximum kept in range, 0 < clip <= 1.

    Returns:
        np.ndarray: quantized values with the same shape as ``x``.

    Raises:
        ValueError: for stochastic rounding without ``rng`` or an invalid ``clip``.
        NotImplementedError: for unknown scopes or rounding modes.
    """
    x = np.asarray(x, dtype=np.float64)
    if scope not in quant_scopes:
        raise NotImplementedError(f"The scale scope '{scope}' is not implemented.")
    if rounding not in rounding_modes:
        raise NotImplementedError(f"The rounding mode '{rounding}' is not implemented.")
    if not 0.0 < clip <= 1.0:
        raise ValueError(f"Clip ratio must lie in (0, 1], got {clip}.")
    if bits >= B_ORIG:
        return x.copy()
    levels = 2 ** (bits - 1) - 1
    if scope == "tensor" or x.ndim < 2:
        amax = np.max(np.abs(x)) if x.size else np.float64(0.0)
    else:
        amax = np.max(np.abs(x), axis=1, keepdims=True)
    scale = clip * amax / levels
    scaled = np.divide(x, scale, out=np.zeros_like(x), where=np.broadcast_to(scale > 0, x.shape))
    scaled = np.clip(scaled, -levels, levels)
    if rounding == "nearest":
        q = np.round(scaled)
    else:
        if rng is None:
            raise ValueError("Stochastic rounding needs a random generator.")
        low = np.floor(scaled)
        q = low + (rng.random(scaled.shape) < (scaled - low))
    return q * scale


@dataclass(frozen=True, eq=False)
class Layer:
    """One linear layer together with the compression state applied to it."""

    weight: np.ndarray
    pruned: np.ndarray | None = None
    bits: int = B_ORIG
    act_bits: int | None = None
    act_rounding: str = "nearest"
    act_seed: int = 0
    rotated: bool = False
    shared_group: int | None = None

    def __post_init__(self):
        weight = check_finite(as_matrix(self.weight), "weight")
        object.__setattr__(self, "weight", _frozen(weight))
        if self.pruned is None:
            pruned = np.zeros(weight.shape, dtype=bool)
        else:
            pruned = np.asarray(self.pruned, dtype=bool)
        if pruned.shape != weight.shape:
            raise ValueError(f"Pruning mask shape {pruned.shape} does not match weight shape {weight.shape}.")
        object.__setattr__(self, "pruned", _frozen(pruned, dtype=bool))
        if self.rotated:
            for n in weight.shape:
                hadamard(n)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    @property
    def fully_pruned(self) -> bool:
        return bool(self.pruned.all())

    def evolve(self, **changes) -> "Layer":
        return replace(self, **changes)


def _quantize_activation(layer: Layer, x: np.ndarray) -> np.ndarray:
    if layer.act_bits is None or layer.act_bits >= B_ORIG:
        return x
    rng = np.random.default_rng(layer.act_seed) if layer.act_rounding == "stochastic" else None
    return quantize_uniform(x, layer.act_bits, "tensor", layer.act_rounding, rng)


def stored_operands(layer: Layer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weight and prepared input in the layer's storage basis (rotated if the layer is)."""
    if layer.rotated:
        x = hadamard(layer.shape[1]) @ x
    return layer.weight, _quantize_activation(layer, x)


def layer_operands(layer: Layer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Effective weight and input in the original basis; their product is the layer output."""
    w, x_hat = stored_operands(layer, x)
    if not layer.rotated:
        return w, x_hat
    h_out, h_in = hadamard(layer.shape[0]), hadamard(layer.shape[1])
    return h_out.T @ w @ h_in, h_in.T @ x_hat


def layer_output(layer: Layer, x: np.ndarray) -> np.ndarray:
    w, x_hat = stored_operands(layer, x)
    out = matmul(w, x_hat)
    if layer.rotated:
        out = hadamard(layer.shape[0]).T @ out
    return out


@dataclass(frozen=True, eq=False)
class LayeredModel:
    """
    Ordered chain of linear layers with a cached calibration batch.

    Layer ``i`` maps ``layers[i].shape[1]`` features to ``layers[i].shape[0]`` features;
    the calibration batch is stored as features x samples.
    """

    layers: tuple[Layer, ...]
    calib_input: np.ndarray
    label_targets: np.ndarray | None = None
    model_id: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        layers = tuple(l if isinstance(l, Layer) else Layer(l) for l in self.layers)
        if not layers:
            raise ValueError("A model needs at least one layer.")
        for i in range(len(layers) - 1):
            if layers[i].shape[0] != layers[i + 1].shape[1]:
                raise ValueError(
                    f"Layer {i} output dimension {layers[i].shape[0]} does not match "
                    f"layer {i + 1} input dimension {layers[i + 1].shape[1]}."
                )
        object.__setattr__(self, "layers", layers)
        calib = check_finite(as_matrix(self.calib_input), "calibration input")
        if calib.shape[0] != layers[0].shape[1]:
            raise ValueError(
                f"Calibration features {calib.shape[0]} do not match input dimension {layers[0].shape[1]}."
            )
        object.__setattr__(self, "calib_input", _frozen(calib))
        if self.label_targets is not None:
            labels = np.asarray(self.label_targets, dtype=np.int64).reshape(-1)
            if labels.shape[0] != calib.shape[1]:
                raise ValueError(f"Expected {calib.shape[1]} labels, got {labels.shape[0]}.")
            object.__setattr__(self, "label_targets", _frozen(labels, dtype=np.int64))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[1]] + [layer.shape[0] for layer in self.layers]

    @property
    def weights(self) -> tuple[np.ndarray, ...]:
        return tuple(layer.weight for layer in self.layers)

    def with_layers(self, layers) -> "LayeredModel":
        return replace(self, layers=tuple(layers))

    def with_weights(self, weights) -> "LayeredModel":
        """Fresh uncompressed layers with the given weights; labels and calibration are kept."""
        return replace(self, layers=tuple(Layer(w) for w in weights))


@dataclass(frozen=True)
class Unit:
    layer: int
    row: int | None = None
    element: int | None = None
    level: AbstractType = AbstractType.LAYER

    def __post_init__(self):
        level = AbstractType(self.level)
        object.__setattr__(self, "level", level)
        if level == AbstractType.MODEL:
            raise ValueError("Units at Model level are not enumerated.")
        needs_row = level <= AbstractType.ROW
        needs_element = level == AbstractType.ELEMENT
        if (self.row is not None) != needs_row or (self.element is not None) != needs_element:
            raise ValueError(f"Unit indices do not match level {level.name}: {self}.")

    @property
    def key(self) -> tuple[int, ...]:
        return tuple(i for i in (self.layer, self.row, self.element) if i is not None)


@dataclass(frozen=True)
class Metric:
    kind: str = "synthetic_exact"
    beta: float = 1.0
    base_value: float = 0.0

    def __post_init__(self):
        if self.kind not in metric_kinds:
            raise NotImplementedError(f"The metric '{self.kind}' is not implemented.")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}.")


@configurable
def make_metric(metric_kind: str = "synthetic_exact", beta: float = 1.0, base_value: float = 0.0) -> Metric:
    return Metric(kind=metric_kind, beta=beta, base_value=base_value)


@configurable
def build_synthetic_model(dims: list[int], seed: int, n_samples: int = 128) -> LayeredModel:
    """
    Build a seeded random layered model with a calibration batch and self-generated labels.

    Args:
        dims (list[int]): feature dimensions ``[d_0, d_1, ..., d_L]``; layer ``i`` has shape
            ``(d_{i+1}, d_i)``.
        seed (int): seed for weights and calibration data.
        n_samples (int): calibration batch size.

    Returns:
        LayeredModel: weights ~ N(0, 1/fan_in), calibration ~ N(0, 1), labels are the argmax
        of the model's own final output.

    Raises:
        ValueError: if fewer than two dimensions are given or any dimension is not positive.

    Example:
        >>> m = build_synthetic_model([8, 16, 8], seed=7)
        >>> [w.shape for w in m.weights]
        [(16, 8), (8, 16)]
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"A layered model needs at least two dimensions, got {dims}.")
    if any(d < 1 for d in dims):
        raise ValueError(f"All dimensions must be positive, got {dims}.")
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}.")
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        for d_in, d_out in zip(dims[:-1], dims[1:])
    ]
    calib = rng.standard_normal((dims[0], n_samples))
    model = LayeredModel(
        layers=tuple(Layer(w) for w in weights),
        calib_input=calib,
        model_id=f"synthetic-{'x'.join(map(str, dims))}",
        seed=seed,
    )
    labels = np.argmax(model_output(model), axis=0)
    logger.debug(f"Built {model.model_id} with seed {seed}")
    return replace(model, label_targets=labels)


def forward_activations(m: LayeredModel) -> list[np.ndarray]:
    """Inputs seen by each layer: ``X_1`` is the calibration batch, ``X_{i+1} = relu(W_i X_i)``."""
    activations = [m.calib_input]
    for layer in m.layers[:-1]:
        activations.append(relu(layer_output(layer, activations[-1])))
    return activations


def model_output(m: LayeredModel) -> np.ndarray:
    return layer_output(m.layers[-1], forward_activations(m)[-1])


def check_compatible(original: LayeredModel, compressed: LayeredModel) -> None:
    if original.n_layers != compressed.n_layers:
        raise ValueError(
            f"Models differ in depth: {original.n_layers} vs {compressed.n_layers} layers."
        )
    for i, (a, b) in enumerate(zip(original.layers, compressed.layers)):
        if a.shape != b.shape:
            raise ValueError(f"Layer {i} shapes differ: {a.shape} vs {b.shape}.")
    if original.calib_input.shape != compressed.calib_input.shape or not np.array_equal(
        original.calib_input, compressed.calib_input
    ):
        raise ValueError("Models do not share the same calibration input.")


def layer_errors(original: LayeredModel, compressed: LayeredModel) -> list[np.ndarray]:
    """Per-layer errors, each computed on the original model's activations."""
    check_compatible(original, compressed)
    activations = forward_activations(original)
    return [
        layer_output(c, x) - layer_output(o, x)
        for o, c, x in zip(original.layers, compressed.layers, activations)
    ]


def layer_error(original: LayeredModel, compressed: LayeredModel, i: int) -> np.ndarray:
    """
    Error of layer ``i``: compressed layer output minus original layer output.

    Both outputs are computed on the original model's input to layer ``i``; the
    compressed layer applies its own activation quantizer and rotation. Errors of
    different layers are therefore independent of each other.

    Raises:
        ValueError: if the architectures or calibration inputs differ.
        IndexError: if ``i`` is out of range.
    """
    check_compatible(original, compressed)
    if not 0 <= i < original.n_layers:
        raise IndexError(f"Layer index {i} out of range for {original.n_layers} layers.")
    x = forward_activations(original)[i]
    return layer_output(compressed.layers[i], x) - layer_output(original.layers[i], x)


def unit_output(w: np.ndarray, x: np.ndarray, unit: Unit) -> np.ndarray:
    """Output footprint of a unit given effective layer operands."""
    if unit.level == AbstractType.LAYER:
        return w @ x
    if unit.level == AbstractType.ROW:
        return w[unit.row : unit.row + 1] @ x
    return w[unit.row, unit.element] * x[unit.element : unit.element + 1]


def unit_errors(
    original: LayeredModel, compressed: LayeredModel, units: list[Unit]
) -> list[np.ndarray]:
    """Error of each unit's output footprint, computed on original activations."""
    check_compatible(original, compressed)
    activations = forward_activations(original)
    cache = {}

    def operands(model, i):
        key = (id(model), i)
        if key not in cache:
            cache[key] = layer_operands(model.layers[i], activations[i])
        return cache[key]

    errors = []
    for unit in units:
        w_c, x_c = operands(compressed, unit.layer)
        w_o, x_o = operands(original, unit.layer)
        errors.append(unit_output(w_c, x_c, unit) - unit_output(w_o, x_o, unit))
    return errors


def evaluate(m_compressed: LayeredModel, m_original: LayeredModel, metric: Metric) -> float:
    """
    Performance M of a compressed model.

    Args:
        m_compressed (LayeredModel): compressed model.
        m_original (LayeredModel): reference model the errors are measured against.
        metric (Metric): ``synthetic_exact`` gives ``base_value - beta * sum_i ||eps_i||_F^2``;
            ``task_accuracy`` gives the fraction of calibration samples whose final-output
            argmax matches the labels.

    Returns:
        float: the metric value (higher is better).

    Raises:
        ValueError: for task accuracy on a model without labels.
    """
    if metric.kind == "synthetic_exact":
        total = sum(frob_norm_sq(e) for e in layer_errors(m_original, m_compressed))
        return float(metric.base_value - metric.beta * total)
    if metric.kind == "task_accuracy":
        labels = m_original.label_targets
        if labels is None:
            raise ValueError("Task accuracy needs label targets on the original model.")
        check_compatible(m_original, m_compressed)
        predictions = np.argmax(model_output(m_compressed), axis=0)
        return float(np.mean(predictions == labels))
    raise NotImplementedError(f"The metric '{metric.kind}' is not implemented.")


def units_at(m: LayeredModel, t: AbstractType) -> list[Unit]:
    """All units of ``m`` at granularity ``t`` in layer-major, row, element order."""
    t = AbstractType(t)
    if t == AbstractType.MODEL:
        raise ValueError("Partitioning at Model level is degenerate; use Element, Row or Layer.")
    units = []
    for i, layer in enumerate(m.layers):
        rows, cols = layer.shape
        if t == AbstractType.LAYER:
            units.append(Unit(i, level=t))
        elif t == AbstractType.ROW:
            units.extend(Unit(i, r, level=t) for r in range(rows))
        else:
            units.extend(Unit(i, r, c, level=t) for r in range(rows) for c in range(cols))
    return units


def count_units(m: LayeredModel, t: AbstractType, layers: list[int] | None = None) -> int:
    t = AbstractType(t)
    selected = range(m.n_layers) if layers is None else layers
    if t == AbstractType.LAYER:
        return len(selected)
    if t == AbstractType.ROW:
        return sum(m.layers[i].shape[0] for i in selected)
    return sum(m.layers[i].weight.size for i in selected)
