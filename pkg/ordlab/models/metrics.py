"""Order-sensitivity quantities: performance gap, CER, COA, disjointness, partition, interference."""
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ordlab import logger
from ordlab.linalg import frob_norm_sq
from ordlab.models import B_ORIG, AbstractType, least_upper_type
from ordlab.models.compressors import (
    ApplicationMask,
    CompressionOp,
    PipelineResult,
    apply,
    run_pipeline,
)
from ordlab.models.model_builder import (
    LayeredModel,
    Metric,
    Unit,
    evaluate,
    forward_activations,
    layer_operands,
    unit_errors,
    unit_output,
    units_at,
)

CURVE_BITS = (16, 12, 10, 8, 7, 6, 5, 4, 3, 2)


class DisjointnessError(ValueError):
    """Raised when an operation requires disjoint selectivity and the pair violates it."""


@dataclass(frozen=True, eq=False)
class QuantCurve:
    """
    Quantization performance curve: ratio C_Q = 16 / B against performance.

    ``raw`` keeps the measured values; ``envelope`` is the lower monotone envelope
    (performance non-increasing in C_Q) used for inversion.
    """

    ratios: np.ndarray
    raw: np.ndarray
    envelope: np.ndarray
    bits: tuple[int, ...] | None = None

    @classmethod
    def from_points(cls, points, bits=None) -> "QuantCurve":
        points = sorted((float(c), float(v)) for c, v in points)
        if len(points) < 2:
            raise ValueError(f"A quantization curve needs at least 2 points, got {len(points)}.")
        ratios = np.array([c for c, _ in points])
        if np.any(np.diff(ratios) <= 0):
            raise ValueError(f"Curve ratios must be strictly increasing, got {ratios.tolist()}.")
        raw = np.array([v for _, v in points])
        envelope = np.minimum.accumulate(raw)
        if np.any(envelope < raw):
            logger.debug("Repaired a non-monotone quantization curve")
        return cls(ratios, raw, envelope, None if bits is None else tuple(sorted(bits, reverse=True)))

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.ratios.tolist(), self.envelope.tolist()))

    def to_frame(self) -> pd.DataFrame:
        bits = self.bits if self.bits is not None else [np.nan] * len(self.ratios)
        return pd.DataFrame(
            {"B": bits, "C_Q": self.ratios, "performance": self.raw, "envelope": self.envelope}
        )


def build_quant_curve(
    m: LayeredModel,
    metric: Metric,
    bits=CURVE_BITS,
    rounding: str = "nearest",
    scope: str = "tensor",
    seed: int = 0,
    clip: float = 1.0,
) -> QuantCurve:
    """Measure single-method quantization at each bit-width on the original model."""
    bits = sorted(set(int(b) for b in bits), reverse=True)
    points = []
    for b in bits:
        op = CompressionOp.quant(b, rounding=rounding, scope=scope, seed=seed, clip=clip)
        compressed, _ = apply(op, m, m)
        points.append((B_ORIG / b, evaluate(compressed, m, metric)))
    return QuantCurve.from_points(points, bits=bits)


@dataclass(frozen=True)
class CerEstimate:
    value: float
    clamped: bool = False
    extrapolated: bool = False
    ambiguous: bool = False

    @property
    def flagged(self) -> bool:
        return self.extrapolated or self.ambiguous

    def __float__(self) -> float:
        return self.value


def invert_curve(curve: QuantCurve, performance: float) -> CerEstimate:
    """
    Ratio C' at which the interpolated curve reaches ``performance``.

    Example:
        >>> curve = QuantCurve.from_points([(2, 70), (4, 60)])
        >>> invert_curve(curve, 65).value
        3.0
    """
    x, y = curve.ratios, curve.envelope
    if performance > y[0]:
        return CerEstimate(float(x[0]), clamped=True)
    for k in range(len(x) - 1):
        x0, x1, y0, y1 = x[k], x[k + 1], y[k], y[k + 1]
        if y1 <= performance <= y0:
            if y0 == y1:
                logger.warning(f"Performance {performance:.6g} lies on a flat curve segment; using its midpoint")
                return CerEstimate(float((x0 + x1) / 2), ambiguous=True)
            t = (y0 - performance) / (y0 - y1)
            return CerEstimate(float(x0 + t * (x1 - x0)))
    x0, x1, y0, y1 = x[-2], x[-1], y[-2], y[-1]
    logger.warning(f"Performance {performance:.6g} is below the worst curve point; extrapolating")
    if y0 == y1:
        return CerEstimate(float(x1), extrapolated=True, ambiguous=True)
    return CerEstimate(float(x1 + (y1 - performance) * (x1 - x0) / (y0 - y1)), extrapolated=True)


def cer(m: LayeredModel, metric: Metric, f: CompressionOp, curve: QuantCurve) -> CerEstimate:
    compressed, _ = apply(f, m, m)
    return invert_curve(curve, evaluate(compressed, m, metric))


def performance_gap(m: LayeredModel, metric: Metric, f1: CompressionOp, f2: CompressionOp) -> float:
    """M(f1(phi)) - M(f2(phi))."""
    first, _ = apply(f1, m, m)
    second, _ = apply(f2, m, m)
    return evaluate(first, m, metric) - evaluate(second, m, metric)


def run_both_orders(
    m: LayeredModel, f1: CompressionOp, f2: CompressionOp
) -> tuple[PipelineResult, PipelineResult]:
    """Pipelines ``f2 after f1`` and ``f1 after f2``, in that order."""
    return run_pipeline([f1, f2], m), run_pipeline([f2, f1], m)


def coa(m: LayeredModel, metric: Metric, f1: CompressionOp, f2: CompressionOp) -> float:
    """
    Compression order advantage of applying ``f1`` first.

    Returns:
        float: M(f2(f1(phi))) - M(f1(f2(phi))); positive means ``f1`` first wins.
    """
    f1_first, f2_first = run_both_orders(m, f1, f2)
    return evaluate(f1_first.model, m, metric) - evaluate(f2_first.model, m, metric)


def order_level(*ops: CompressionOp) -> AbstractType:
    return least_upper_type(*(op.granularity for op in ops))


def check_disjoint(
    masks: list[ApplicationMask], final: LayeredModel, level: AbstractType | None = None
) -> bool:
    """
    True iff every unit at ``level`` is modified by exactly one of ``masks`` in one pipeline.

    Masks are lifted to ``level`` (default: their least upper type); a coarse unit counts as
    modified if any constituent is, except that non-pruning indicators are cleared on units
    fully pruned in ``final``.
    """
    if not masks:
        raise ValueError("check_disjoint needs at least one mask.")
    level = least_upper_type(*(mask.level for mask in masks)) if level is None else AbstractType(level)
    lifted = [mask.at_level(level, final) for mask in masks]
    for i in range(len(final.layers)):
        total = sum(mask.values[i].astype(int) for mask in lifted)
        if np.any(total != 1):
            return False
    return True


def results_disjoint(*results: PipelineResult, level: AbstractType | None = None) -> bool:
    return all(check_disjoint(list(r.masks), r.model, level) for r in results)


def disjoint_selectivity(m: LayeredModel, f1: CompressionOp, f2: CompressionOp) -> bool:
    """Disjoint selectivity of the pair, checked under both orders at their least upper type."""
    return results_disjoint(*run_both_orders(m, f1, f2), level=order_level(f1, f2))


@dataclass(frozen=True)
class UnitPartition:
    level: AbstractType
    g1: tuple[Unit, ...]
    g2: tuple[Unit, ...]
    g3: tuple[Unit, ...]
    g4: tuple[Unit, ...]

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.g1), len(self.g2), len(self.g3), len(self.g4)

    @property
    def order_dependent(self) -> tuple[Unit, ...]:
        return self.g1 + self.g2


def partition_from_results(
    m: LayeredModel, f1_first: PipelineResult, f2_first: PipelineResult, level: AbstractType
) -> UnitPartition:
    """
    Four-group partition from the two frozen pipelines.

    ``f1_first`` runs [f1, f2] and ``f2_first`` runs [f2, f1]; each unit is keyed by the
    indicator of ``f1`` in both.
    """
    if not results_disjoint(f1_first, f2_first, level=level):
        raise DisjointnessError(
            "Disjoint selectivity does not hold for this pair; use interference() instead."
        )
    a_first = f1_first.masks[0].at_level(level, f1_first.model)
    a_second = f2_first.masks[1].at_level(level, f2_first.model)
    groups = {(1, 0): [], (0, 1): [], (0, 0): [], (1, 1): []}
    for unit in units_at(m, level):
        groups[(a_first.indicator(unit), a_second.indicator(unit))].append(unit)
    return UnitPartition(
        level,
        tuple(groups[(1, 0)]),
        tuple(groups[(0, 1)]),
        tuple(groups[(0, 0)]),
        tuple(groups[(1, 1)]),
    )


def partition_units(m: LayeredModel, f1: CompressionOp, f2: CompressionOp) -> UnitPartition:
    """
    Classify units at the least upper type by the indicator of ``f1`` under both orders.

    Raises:
        DisjointnessError: if disjoint selectivity does not hold.
    """
    f1_first, f2_first = run_both_orders(m, f1, f2)
    return partition_from_results(m, f1_first, f2_first, order_level(f1, f2))


def forced_unit_errors(m: LayeredModel, op: CompressionOp, units: list[Unit]) -> list[np.ndarray]:
    """
    Error of each unit when ``op`` handles it, applied to the original model.

    A pruned unit outputs zero, so its error is minus its original output; other families
    take the unit's error in ``op(m)``.
    """
    if op.is_pruning:
        activations = forward_activations(m)
        cache = {}
        errors = []
        for unit in units:
            if unit.layer not in cache:
                cache[unit.layer] = layer_operands(m.layers[unit.layer], activations[unit.layer])
            errors.append(-unit_output(*cache[unit.layer], unit))
        return errors
    compressed, _ = apply(op, m, m)
    return unit_errors(m, compressed, units)


def interference_terms(
    m: LayeredModel, f1: CompressionOp, f2: CompressionOp, result: PipelineResult | None = None
) -> list[np.ndarray]:
    """
    Per-unit interference of ``f2`` applied after ``f1``.

    For every unit at ``f2``'s granularity that ``f2`` modifies in the pipeline, the term is
    the unit's error in ``f2(f1(m))`` minus the error ``f2`` alone gives it on ``m``. A unit
    that ``f2`` prunes has the same error in both, so pruning as the second op contributes
    nothing.
    """
    result = run_pipeline([f1, f2], m) if result is None else result
    level = f2.granularity
    units = result.masks[1].at_level(level, result.model).modified_units()
    if not units:
        return []
    e_pipeline = unit_errors(m, result.model, units)
    e_second = forced_unit_errors(m, f2, units)
    return [e12 - e2 for e12, e2 in zip(e_pipeline, e_second)]


def interference(m: LayeredModel, f1: CompressionOp, f2: CompressionOp) -> float:
    """Interference as a sum of per-unit squared Frobenius norms."""
    return float(sum(frob_norm_sq(term) for term in interference_terms(m, f1, f2)))


def interference_norm_of_sum(m: LayeredModel, f1: CompressionOp, f2: CompressionOp) -> float:
    """Squared norm of the summed per-unit terms; needs all terms to share one shape."""
    terms = interference_terms(m, f1, f2)
    if not terms:
        return 0.0
    shapes = {t.shape for t in terms}
    if len(shapes) != 1:
        raise ValueError(f"Interference terms have different shapes {sorted(shapes)}; no matrix sum exists.")
    return frob_norm_sq(np.sum(terms, axis=0))


@dataclass(frozen=True)
class OrderReport:
    f1: str
    f2: str
    m_f1_first: float
    m_f2_first: float
    pg: float
    coa: float
    cer_f1: CerEstimate
    cer_f2: CerEstimate
    interference_forward: float
    interference_backward: float
    partition: UnitPartition | None
    disjoint: bool

    def to_row(self) -> dict:
        sizes = self.partition.sizes if self.partition is not None else (np.nan,) * 4
        return {
            "f1": self.f1,
            "f2": self.f2,
            "M_f1_first": self.m_f1_first,
            "M_f2_first": self.m_f2_first,
            "PG": self.pg,
            "COA": self.coa,
            "CER_f1": self.cer_f1.value,
            "CER_f2": self.cer_f2.value,
            "CER_flagged": self.cer_f1.flagged or self.cer_f2.flagged,
            "interference_forward": self.interference_forward,
            "interference_backward": self.interference_backward,
            "G1": sizes[0],
            "G2": sizes[1],
            "G3": sizes[2],
            "G4": sizes[3],
            "disjoint": self.disjoint,
        }


def order_report(
    m: LayeredModel, metric: Metric, f1: CompressionOp, f2: CompressionOp, curve: QuantCurve
) -> OrderReport:
    """All scalar outputs of one pairwise comparison of ``f1`` and ``f2``."""
    f1_first, f2_first = run_both_orders(m, f1, f2)
    level = order_level(f1, f2)
    m_f1_first = evaluate(f1_first.model, m, metric)
    m_f2_first = evaluate(f2_first.model, m, metric)
    disjoint = results_disjoint(f1_first, f2_first, level=level)
    partition = partition_from_results(m, f1_first, f2_first, level) if disjoint else None
    forward = sum(frob_norm_sq(t) for t in interference_terms(m, f1, f2, f1_first))
    backward = sum(frob_norm_sq(t) for t in interference_terms(m, f2, f1, f2_first))
    return OrderReport(
        f1=f1.name,
        f2=f2.name,
        m_f1_first=m_f1_first,
        m_f2_first=m_f2_first,
        pg=performance_gap(m, metric, f1, f2),
        coa=m_f1_first - m_f2_first,
        cer_f1=cer(m, metric, f1, curve),
        cer_f2=cer(m, metric, f2, curve),
        interference_forward=float(forward),
        interference_backward=float(backward),
        partition=partition,
        disjoint=disjoint,
    )
