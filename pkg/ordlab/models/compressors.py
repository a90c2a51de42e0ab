from dataclasses import dataclass, field, replace

import numpy as np

from ordlab import logger
from ordlab.linalg import frob_norm_sq, hadamard
from ordlab.models import (
    B_ORIG,
    AbstractType,
    compression_families,
    prune_families,
    quant_families,
    quant_scopes,
    rounding_modes,
    scoring_modes,
    share_families,
)
from ordlab.models.model_builder import (
    LayeredModel,
    Unit,
    check_compatible,
    count_units,
    forward_activations,
    layer_errors,
    quantize_uniform,
    stored_operands,
)


@dataclass(frozen=True)
class CompressionOp:
    """
    Descriptor of one compression method f(.; C).

    Family-specific parameters: ``fraction`` for pruning, ``bits``/``rounding``/``scope``/
    ``clip``/``rotate`` for quantization, ``group_size`` for sharing. ``layers`` restricts
    the op to a subset of layers (all layers when ``None``).
    """

    family: str
    fraction: float | None = None
    bits: int | None = None
    rounding: str = "nearest"
    scope: str = "tensor"
    group_size: int | None = None
    rotate: bool = False
    clip: float = 1.0
    scoring: str = "error"
    layers: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in compression_families:
            raise NotImplementedError(f"The compression family '{self.family}' is not implemented.")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if self.is_pruning:
            if self.fraction is None or not 0.0 < self.fraction < 1.0:
                raise ValueError(f"Pruning fraction must lie in (0, 1), got {self.fraction}.")
            if self.scoring not in scoring_modes:
                raise NotImplementedError(f"The scoring mode '{self.scoring}' is not implemented.")
        elif self.is_quant:
            if self.bits is None or int(self.bits) != self.bits or not 2 <= self.bits <= B_ORIG:
                raise ValueError(f"Bit-width must be an integer in [2, {B_ORIG}], got {self.bits}.")
            object.__setattr__(self, "bits", int(self.bits))
            if self.rounding not in rounding_modes:
                raise NotImplementedError(f"The rounding mode '{self.rounding}' is not implemented.")
            if self.scope not in quant_scopes:
                raise NotImplementedError(f"The scale scope '{self.scope}' is not implemented.")
            if not 0.0 < self.clip <= 1.0:
                raise ValueError(f"Clip ratio must lie in (0, 1], got {self.clip}.")
        else:
            if self.group_size is None or int(self.group_size) != self.group_size or self.group_size < 2:
                raise ValueError(f"Share group size must be an integer >= 2, got {self.group_size}.")
        if self.rotate and not self.is_quant:
            raise ValueError("Rotation is only defined for quantization.")

    @classmethod
    def prune(cls, fraction: float, family: str = "prune_layer", **kwargs) -> "CompressionOp":
        if family not in prune_families:
            raise NotImplementedError(f"The pruning family '{family}' is not implemented.")
        return cls(family=family, fraction=fraction, **kwargs)

    @classmethod
    def quant(cls, bits: int, **kwargs) -> "CompressionOp":
        return cls(family="quant_uniform", bits=bits, **kwargs)

    @classmethod
    def share(cls, group_size: int, **kwargs) -> "CompressionOp":
        return cls(family="share", group_size=group_size, **kwargs)

    @property
    def is_pruning(self) -> bool:
        return self.family in prune_families

    @property
    def is_quant(self) -> bool:
        return self.family in quant_families

    @property
    def is_share(self) -> bool:
        return self.family in share_families

    @property
    def ratio(self) -> float:
        """Nominal compression ratio C."""
        if self.is_pruning:
            return 1.0 / (1.0 - self.fraction)
        if self.is_quant:
            return B_ORIG / self.bits
        return float(self.group_size)

    @property
    def granularity(self) -> AbstractType:
        if self.is_quant:
            return quant_scopes[self.scope]
        return compression_families[self.family]

    @property
    def name(self) -> str:
        if self.is_pruning:
            label = f"{self.family}(p={self.fraction:g})"
        elif self.is_quant:
            label = f"quant_uniform(B={self.bits},{self.scope}{',rot' if self.rotate else ''})"
        else:
            label = f"share(k={self.group_size})"
        if self.layers is not None:
            label += f"@{list(self.layers)}"
        return label

    def with_seed(self, seed: int) -> "CompressionOp":
        return replace(self, seed=int(seed))


def _level_shape(shape: tuple[int, int], level: AbstractType) -> tuple[int, ...]:
    if level == AbstractType.ELEMENT:
        return shape
    if level == AbstractType.ROW:
        return (shape[0],)
    return (1,)


def _convert(values: np.ndarray, shape: tuple[int, int], source: AbstractType, target: AbstractType) -> np.ndarray:
    if source == target:
        return values.copy()
    if target > source:
        if target == AbstractType.ROW:
            return values.any(axis=1)
        return np.array([values.any()])
    if source == AbstractType.LAYER:
        return np.full(_level_shape(shape, target), bool(values[0]))
    return np.repeat(values[:, None], shape[1], axis=1)


def fully_pruned_units(model: LayeredModel, level: AbstractType) -> tuple[np.ndarray, ...]:
    level = AbstractType(level)
    out = []
    for layer in model.layers:
        if level == AbstractType.ELEMENT:
            out.append(layer.pruned.copy())
        elif level == AbstractType.ROW:
            out.append(layer.pruned.all(axis=1))
        else:
            out.append(np.array([layer.fully_pruned]))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ApplicationMask:
    """
    Per-unit indicator a(u, f) at a fixed granularity.

    ``values[i]`` holds the indicators of layer ``i``: shape (rows, cols) at Element level,
    (rows,) at Row level and (1,) at Layer level. ``absorbable`` is False for pruning masks;
    every other mask loses its indicator on units that end up fully pruned.
    """

    level: AbstractType
    values: tuple[np.ndarray, ...]
    shapes: tuple[tuple[int, int], ...]
    op: str = ""
    absorbable: bool = True

    @classmethod
    def empty(cls, model: LayeredModel, level: AbstractType, op: str = "", absorbable: bool = True):
        shapes = tuple(layer.shape for layer in model.layers)
        values = tuple(np.zeros(_level_shape(s, level), dtype=bool) for s in shapes)
        return cls(AbstractType(level), values, shapes, op, absorbable)

    def at_level(self, level: AbstractType, final: LayeredModel | None = None) -> "ApplicationMask":
        """
        Lift (any constituent modified) or refine (broadcast) to ``level``.

        When ``final`` is given and the mask is absorbable, units fully pruned in ``final``
        are cleared.
        """
        level = AbstractType(level)
        if level == AbstractType.MODEL:
            raise ValueError("Masks are not defined at Model level.")
        values = [_convert(v, s, self.level, level) for v, s in zip(self.values, self.shapes)]
        if final is not None and self.absorbable:
            dead = fully_pruned_units(final, level)
            values = [v & ~d for v, d in zip(values, dead)]
        return ApplicationMask(level, tuple(values), self.shapes, self.op, self.absorbable)

    def indicator(self, unit: Unit) -> int:
        if unit.level != self.level:
            raise ValueError(f"Unit level {unit.level.name} differs from mask level {self.level.name}.")
        values = self.values[unit.layer]
        if self.level == AbstractType.LAYER:
            return int(values[0])
        if self.level == AbstractType.ROW:
            return int(values[unit.row])
        return int(values[unit.row, unit.element])

    def count(self) -> int:
        return int(sum(v.sum() for v in self.values))

    def modified_units(self) -> list[Unit]:
        units = []
        for i, values in enumerate(self.values):
            if self.level == AbstractType.LAYER:
                if values[0]:
                    units.append(Unit(i, level=self.level))
            elif self.level == AbstractType.ROW:
                units.extend(Unit(i, int(r), level=self.level) for r in np.flatnonzero(values))
            else:
                rows, cols = np.nonzero(values)
                units.extend(Unit(i, int(r), int(c), level=self.level) for r, c in zip(rows, cols))
        return units

    def as_dict(self) -> dict[Unit, int]:
        out = {}
        for i, values in enumerate(self.values):
            for index in np.ndindex(values.shape):
                if self.level == AbstractType.LAYER:
                    unit = Unit(i, level=self.level)
                elif self.level == AbstractType.ROW:
                    unit = Unit(i, index[0], level=self.level)
                else:
                    unit = Unit(i, index[0], index[1], level=self.level)
                out[unit] = int(values[index])
        return out


@dataclass(frozen=True, eq=False)
class PipelineResult:
    model: LayeredModel
    masks: tuple[ApplicationMask, ...]
    selections: tuple[tuple[Unit, ...] | None, ...] = field(default_factory=tuple)

    def lifted_masks(self, level: AbstractType) -> list[ApplicationMask]:
        return [mask.at_level(level, self.model) for mask in self.masks]


def _scope_layers(op: CompressionOp, m: LayeredModel) -> list[int]:
    if op.layers is None:
        return list(range(m.n_layers))
    for i in op.layers:
        if not 0 <= i < m.n_layers:
            raise ValueError(f"Layer index {i} out of range for {m.n_layers} layers.")
    return sorted(set(op.layers))


def _prune_candidates(op: CompressionOp, m: LayeredModel, original: LayeredModel, layers: list[int]):
    """
    Flat arrays (layer, row, element), score and is-zero flag of every still-unpruned unit in scope.

    A unit is zero when all of its stored weights already are, for example after a coarse
    quantizer rounded them away.
    """
    level = op.granularity
    activations = forward_activations(original)
    index, scores, zero = [], [], []
    for i in layers:
        layer = m.layers[i]
        w, x_hat = stored_operands(layer, activations[i])
        if level == AbstractType.LAYER:
            if layer.fully_pruned:
                continue
            score = frob_norm_sq(w @ x_hat) if op.scoring == "error" else frob_norm_sq(w)
            index.append(np.array([[i, -1, -1]]))
            scores.append(np.array([score]))
            zero.append(np.array([not np.any(w)]))
        elif level == AbstractType.ROW:
            if op.scoring == "error":
                row_scores = np.sum((w @ x_hat) ** 2, axis=1)
            else:
                row_scores = np.sum(w**2, axis=1)
            rows = np.flatnonzero(~layer.pruned.all(axis=1))
            index.append(np.column_stack([np.full(rows.size, i), rows, np.full(rows.size, -1)]))
            scores.append(row_scores[rows])
            zero.append(~np.any(w[rows] != 0, axis=1))
        else:
            if op.scoring == "error":
                element_scores = w**2 * np.sum(x_hat**2, axis=1)[None, :]
            else:
                element_scores = w**2
            rows, cols = np.nonzero(~layer.pruned)
            index.append(np.column_stack([np.full(rows.size, i), rows, cols]))
            scores.append(element_scores[rows, cols])
            zero.append(w[rows, cols] == 0)
    if not index:
        return np.zeros((0, 3), dtype=int), np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(index).astype(int), np.concatenate(scores), np.concatenate(zero).astype(bool)


def _unit_from_row(row: np.ndarray, level: AbstractType) -> Unit:
    layer, r, c = (int(v) for v in row)
    if level == AbstractType.LAYER:
        return Unit(layer, level=level)
    if level == AbstractType.ROW:
        return Unit(layer, r, level=level)
    return Unit(layer, r, c, level=level)


def _apply_prune(op, m, original, selection):
    level = op.granularity
    layers = _scope_layers(op, m)
    n_total = count_units(m, level, layers)
    k = int(np.floor(op.fraction * n_total + 0.5))
    if selection is None:
        index, scores, zero = _prune_candidates(op, m, original, layers)
        if k <= 0 or k >= n_total or k > len(scores):
            raise ValueError(
                f"Pruning fraction {op.fraction} selects {k} of {n_total} units "
                f"({len(scores)} still unpruned); it must select at least one and not all."
            )
        # already-zero units rank after every nonzero one
        order = np.lexsort((scores, zero))[:k]
        selection = tuple(_unit_from_row(index[j], level) for j in sorted(order))
    else:
        selection = tuple(selection)
        if any(u.level != level for u in selection):
            raise ValueError(f"Frozen selection must contain {level.name} units.")

    weights = [layer.weight.copy() for layer in m.layers]
    pruned = [layer.pruned.copy() for layer in m.layers]
    mask = ApplicationMask.empty(m, level, op.name, absorbable=False)
    values = [v.copy() for v in mask.values]
    for unit in selection:
        if level == AbstractType.LAYER:
            footprint = np.s_[:, :]
            values[unit.layer][0] = True
        elif level == AbstractType.ROW:
            footprint = np.s_[unit.row, :]
            values[unit.layer][unit.row] = True
        else:
            footprint = np.s_[unit.row, unit.element]
            values[unit.layer][unit.row, unit.element] = True
        weights[unit.layer][footprint] = 0.0
        pruned[unit.layer][footprint] = True
    touched = {u.layer for u in selection}
    layers_out = [
        layer.evolve(weight=weights[i], pruned=pruned[i]) if i in touched else layer
        for i, layer in enumerate(m.layers)
    ]
    mask = replace(mask, values=tuple(values))
    return m.with_layers(layers_out), mask, selection


def _apply_quant(op, m):
    level = op.granularity
    mask = ApplicationMask.empty(m, level, op.name)
    values = [v.copy() for v in mask.values]
    layers_out = list(m.layers)
    for i in _scope_layers(op, m):
        layer = m.layers[i]
        if layer.fully_pruned:
            continue
        rng = np.random.default_rng([op.seed, i])
        weight, pruned, rotated = layer.weight, layer.pruned, layer.rotated
        if op.rotate and not rotated:
            rows, cols = layer.shape
            weight = hadamard(rows) @ weight @ hadamard(cols).T
            # rotation densifies a partially pruned matrix
            pruned = np.zeros(layer.shape, dtype=bool)
            rotated = True
        q = quantize_uniform(weight, op.bits, op.scope, op.rounding, rng, op.clip)
        q[pruned] = 0.0
        layers_out[i] = layer.evolve(
            weight=q,
            pruned=pruned,
            bits=op.bits,
            act_bits=op.bits,
            act_rounding=op.rounding,
            act_seed=int(rng.integers(2**32)),
            rotated=rotated,
        )
        if level == AbstractType.ROW:
            values[i] = ~pruned.all(axis=1)
        else:
            values[i][0] = True
    return m.with_layers(layers_out), replace(mask, values=tuple(values)), None


def _apply_share(op, m):
    layers = _scope_layers(op, m)
    k = op.group_size
    groups = [layers[j : j + k] for j in range(0, len(layers) - k + 1, k)]
    if not groups:
        raise ValueError(f"Sharing with group size {k} needs at least {k} layers, got {len(layers)}.")
    mask = ApplicationMask.empty(m, AbstractType.LAYER, op.name)
    values = [v.copy() for v in mask.values]
    layers_out = list(m.layers)
    for g, chunk in enumerate(groups):
        members = [m.layers[i] for i in chunk]
        shapes = {layer.shape for layer in members}
        if len(shapes) != 1:
            raise ValueError(f"Cannot share layers {chunk} with incompatible shapes {sorted(shapes)}.")
        if len({layer.rotated for layer in members}) != 1:
            raise ValueError(f"Cannot share layers {chunk} stored in different bases.")
        mean = np.mean([layer.weight for layer in members], axis=0)
        pruned = np.logical_and.reduce([layer.pruned for layer in members])
        for i in chunk:
            layers_out[i] = m.layers[i].evolve(weight=mean, pruned=pruned, shared_group=g)
            values[i][0] = True
    return m.with_layers(layers_out), replace(mask, values=tuple(values)), None


def apply_traced(
    op: CompressionOp,
    m: LayeredModel,
    original: LayeredModel,
    selection: tuple[Unit, ...] | None = None,
) -> tuple[LayeredModel, ApplicationMask, tuple[Unit, ...] | None]:
    """Like ``apply`` but also returns the pruning selection (``None`` for other families)."""
    check_compatible(original, m)
    if op.is_pruning:
        return _apply_prune(op, m, original, selection)
    if selection is not None:
        raise ValueError(f"Only pruning accepts a frozen selection, got one for {op.name}.")
    if op.is_quant:
        return _apply_quant(op, m)
    return _apply_share(op, m)


def apply(
    op: CompressionOp,
    m: LayeredModel,
    original: LayeredModel,
    selection: tuple[Unit, ...] | None = None,
) -> tuple[LayeredModel, ApplicationMask]:
    """
    Apply one compression method to ``m``.

    Pruning zeroes the ``round(p * |units|)`` lowest-scoring units still alive, scored by
    their error ``||W_u X_u||_F^2`` on the original activations (or by magnitude), ties
    broken by lowest unit index. Quantization puts every weight on its uniform grid and
    flags the layer for activation quantization at the same bit-width. Sharing replaces
    each group of ``k`` consecutive same-shape layers by their elementwise mean.

    Args:
        op (CompressionOp): the method.
        m (LayeredModel): the model to compress (left untouched).
        original (LayeredModel): the uncompressed reference model.
        selection (tuple[Unit, ...] | None): frozen pruning selection to replay.

    Returns:
        tuple[LayeredModel, ApplicationMask]: compressed model and the mask of modified units.

    Raises:
        ValueError: for incompatible models, a pruning fraction selecting zero or all
            units, sharing incompatible shapes, or rotation of non power-of-two layers.
    """
    model, mask, _ = apply_traced(op, m, original, selection)
    return model, mask


def run_pipeline(
    ops: list[CompressionOp],
    model: LayeredModel,
    original: LayeredModel | None = None,
    selections: list[tuple[Unit, ...] | None] | None = None,
) -> PipelineResult:
    """Apply ``ops`` left to right; ``selections`` replays frozen pruning choices."""
    original = model if original is None else original
    if selections is not None and len(selections) != len(ops):
        raise ValueError(f"Got {len(selections)} frozen selections for {len(ops)} ops.")
    current, masks, chosen = model, [], []
    for j, op in enumerate(ops):
        frozen = None if selections is None else selections[j]
        current, mask, selection = apply_traced(op, current, original, frozen)
        masks.append(mask)
        chosen.append(selection)
    return PipelineResult(current, tuple(masks), tuple(chosen))


def compression_ratio(original: LayeredModel, compressed: LayeredModel) -> float:
    """
    Realized footprint ratio: original bits over surviving weights times their bit-width.

    Layers of one shared group are stored once.
    """
    check_compatible(original, compressed)
    original_bits = sum(layer.weight.size * B_ORIG for layer in original.layers)
    stored, seen = 0, set()
    for layer in compressed.layers:
        if layer.shared_group is not None:
            key = (layer.shared_group, layer.shape, layer.weight.tobytes())
            if key in seen:
                continue
            seen.add(key)
        stored += int((~layer.pruned).sum()) * layer.bits
    return float("inf") if stored == 0 else original_bits / stored


@dataclass(frozen=True, eq=False)
class QuantErrorStats:
    mean: tuple[np.ndarray, ...]
    entry_variance: tuple[np.ndarray, ...]
    variance: float
    trials: int


def quant_error_stats(op: CompressionOp, m: LayeredModel, trials: int, seed: int) -> QuantErrorStats:
    """
    Monte-Carlo statistics of the layer errors Q(W)Q(X) - WX under stochastic rounding.

    Args:
        op (CompressionOp): stochastic uniform quantization.
        m (LayeredModel): model to quantize.
        trials (int): number of independent rounding draws.
        seed (int): base seed; per-trial seeds are spawned from it.

    Returns:
        QuantErrorStats: per-entry mean and variance for each layer plus the pooled variance.

    Raises:
        ValueError: for nearest rounding, a non-quantization op or ``trials < 1``.
    """
    if not op.is_quant:
        raise ValueError(f"Quantization error statistics need a quantization op, got {op.name}.")
    if op.rounding != "stochastic":
        raise ValueError("Quantization error statistics are only meaningful for stochastic rounding.")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}.")
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    total, total_sq = None, None
    for trial_seed in seeds:
        compressed, _ = apply(op.with_seed(int(trial_seed)), m, m)
        errors = layer_errors(m, compressed)
        if total is None:
            total = [np.zeros_like(e) for e in errors]
            total_sq = [np.zeros_like(e) for e in errors]
        for acc, acc_sq, e in zip(total, total_sq, errors):
            acc += e
            acc_sq += e**2
    mean = tuple(acc / trials for acc in total)
    ddof = 1 if trials > 1 else 0
    entry_variance = tuple(
        np.maximum(acc_sq - trials * mu**2, 0.0) / max(trials - ddof, 1)
        for acc_sq, mu in zip(total_sq, mean)
    )
    pooled = float(np.mean(np.concatenate([v.ravel() for v in entry_variance])))
    logger.debug(f"Pooled variance of {op.name} over {trials} trials: {pooled:.3e}")
    return QuantErrorStats(mean, entry_variance, pooled, trials)


@dataclass(frozen=True)
class RotationPruningError:
    matrix_wise: float
    element_wise: float
    total: float


def rotate_model(m: LayeredModel) -> LayeredModel:
    """Store every layer in its Hadamard-rotated basis without quantizing it."""
    rotated, _ = apply(CompressionOp.quant(B_ORIG, rotate=True), m, m)
    return rotated


def rotation_pruning_error(m: LayeredModel, prune_op: CompressionOp) -> RotationPruningError:
    """
    Split the extra pruning error caused by a Hadamard rotation into two parts.

    Four variants are built: ``m`` itself, ``m`` pruned with selection S0, the rotated model
    pruned at the same unit positions S0 in its storage basis, and the rotated model pruned
    with a selection recomputed on the rotated weights.

    Returns:
        RotationPruningError: ``matrix_wise`` is the error difference between pruning S0
        with and without rotation; ``element_wise`` is the further difference caused by the
        recomputed selection; ``total`` compares the recomputed rotated pruning with the
        unrotated one.

    Rows and elements zeroed in the storage basis are spread over every output by the
    back-rotation, so for a pruned row set P the matrix-wise term of a layer is
    ``||(P - H^T P H) W X||_F^2``. A whole layer has no such residual: zeroing the stored
    matrix zeroes the output in any basis, and only rounding noise of the unpruned rotated
    layers remains.
    """
    if not prune_op.is_pruning:
        raise ValueError(f"Rotation pruning error needs a pruning op, got {prune_op.name}.")
    plain, _, selection = apply_traced(prune_op, m, m)
    rotated = rotate_model(m)
    same_selection, _ = apply(prune_op, rotated, m, selection=selection)
    reselected, _, new_selection = apply_traced(prune_op, rotated, m)
    e_plain = layer_errors(m, plain)
    e_same = layer_errors(m, same_selection)
    e_new = layer_errors(m, reselected)
    matrix_wise = sum(frob_norm_sq(a - b) for a, b in zip(e_same, e_plain))
    element_wise = sum(frob_norm_sq(a - b) for a, b in zip(e_new, e_same))
    total = sum(frob_norm_sq(a - b) for a, b in zip(e_new, e_plain))
    if set(new_selection) == set(selection):
        logger.debug(f"Rotation left the selection of {prune_op.name} unchanged")
    return RotationPruningError(float(matrix_wise), float(element_wise), float(total))
