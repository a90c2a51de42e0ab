"""
Exactly checkable statements about compression order on synthetic models.

Includes the tools that build models where those statements apply by construction:
layer rescaling is exact because relu is positively homogeneous, so scores of individual
layers can be placed at will without changing which samples are active.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ordlab import logger
from ordlab.linalg import frob_norm_sq
from ordlab.models import B_ORIG
from ordlab.models.compressors import CompressionOp, PipelineResult, apply
from ordlab.models.metrics import (
    QuantCurve,
    UnitPartition,
    build_quant_curve,
    cer,
    coa,
    disjoint_selectivity,
    forced_unit_errors,
    order_level,
    partition_from_results,
    partition_units,
    run_both_orders,
)
from ordlab.models.model_builder import (
    LayeredModel,
    Metric,
    build_synthetic_model,
    count_units,
    evaluate,
    forward_activations,
    layer_errors,
    stored_operands,
)


def layer_scores(m: LayeredModel) -> np.ndarray:
    """Pruning score ``||W_i X_i||_F^2`` of every layer on the model's own activations."""
    activations = forward_activations(m)
    return np.array(
        [frob_norm_sq(np.dot(*stored_operands(layer, x))) for layer, x in zip(m.layers, activations)]
    )


def quant_to_prune_ratio(m: LayeredModel, quant: CompressionOp) -> float:
    """Largest per-layer ratio of quantization error to the error of pruning that layer."""
    if not quant.is_quant:
        raise ValueError(f"Expected a quantization op, got {quant.name}.")
    compressed, _ = apply(quant, m, m)
    scores = layer_scores(m)
    ratios = [frob_norm_sq(e) / s for e, s in zip(layer_errors(m, compressed), scores) if s > 0]
    return float(max(ratios)) if ratios else 0.0


def rescale_layer_scores(m: LayeredModel, targets) -> LayeredModel:
    """
    Scale each layer so its score ``||W_i X_i||_F^2`` equals ``targets[i]``.

    Layers are processed front to back since a scaled layer scales every downstream
    activation by the same positive factor.

    Args:
        m (LayeredModel): an uncompressed model.
        targets (Sequence[float]): one positive target score per layer.

    Returns:
        LayeredModel: the rescaled model; calibration input and labels are unchanged.
    """
    targets = [float(t) for t in targets]
    if len(targets) != m.n_layers:
        raise ValueError(f"Expected {m.n_layers} target scores, got {len(targets)}.")
    if any(t <= 0 for t in targets):
        raise ValueError(f"Target scores must be positive, got {targets}.")
    weights = [np.array(w) for w in m.weights]
    current = m
    for i, target in enumerate(targets):
        score = layer_scores(current)[i]
        if score <= 0:
            raise ValueError(f"Layer {i} has zero output on the calibration batch and cannot be rescaled.")
        weights[i] = weights[i] * np.sqrt(target / score)
        current = m.with_weights(weights)
    return current


def separate_layer_scores(m: LayeredModel, spread: float = 10.0, order=None) -> LayeredModel:
    """
    Rescale layers so their scores are ``spread**rank``; ``order`` lists layers weakest first.

    With a large spread no realistic quantization noise can change which layers pruning
    picks, which makes the selection order-invariant.
    """
    order = list(range(m.n_layers)) if order is None else [int(i) for i in order]
    if sorted(order) != list(range(m.n_layers)):
        raise ValueError(f"order must be a permutation of the layer indices, got {order}.")
    targets = np.empty(m.n_layers)
    for rank, i in enumerate(order):
        targets[i] = spread**rank
    return rescale_layer_scores(m, targets)


@dataclass(frozen=True)
class FlipProfile:
    """Scale-invariant per-layer quantities a near-tie construction depends on."""

    score_ratio: np.ndarray
    error_ratio: np.ndarray


def flip_profile(m: LayeredModel, quant: CompressionOp) -> FlipProfile:
    quantized, _ = apply(quant, m, m)
    plain = layer_scores(m)
    activations = forward_activations(m)
    noisy = np.array(
        [frob_norm_sq(np.dot(*stored_operands(layer, x))) for layer, x in zip(quantized.layers, activations)]
    )
    errors = np.array([frob_norm_sq(e) for e in layer_errors(m, quantized)])
    return FlipProfile(noisy / plain, errors / plain)


def engineer_order_flip(
    m: LayeredModel,
    quant: CompressionOp,
    pair: tuple[int, int] | None = None,
    below=(),
) -> LayeredModel:
    """
    Rescale ``m`` so that quantizing first changes which layer layer-pruning removes.

    Layers in ``below`` get negligible scores (pruned under any order), the two layers of
    ``pair`` compete for the next pruning slot and every other layer is kept far away.
    The competing scores are placed so that pruning the original model removes one layer
    while pruning the quantized model removes the other, and quantizing first is not the
    better order.

    Args:
        m (LayeredModel): an uncompressed model.
        quant (CompressionOp): the quantization op that will be used in the pipelines.
        pair (tuple[int, int] | None): candidate layers; every pair is tried when ``None``.
        below (Sequence[int]): layers that must always be pruned first.

    Returns:
        LayeredModel: the rescaled model. With ``len(below) + 1`` layers pruned, the
        partition of (quant, prune_layer) has one unit in each order-dependent group.

    Raises:
        ValueError: if no admissible scaling exists for the requested layers.
    """
    below = sorted({int(i) for i in below})
    free = [i for i in range(m.n_layers) if i not in below]
    if pair is None:
        candidates = [(i, j) for i in free for j in free if i != j]
    else:
        if len(set(pair)) != 2 or any(i in below or not 0 <= i < m.n_layers for i in pair):
            raise ValueError(f"pair must name two distinct layers outside below, got {pair}.")
        candidates = [tuple(pair), tuple(reversed(pair))]
    profile = flip_profile(m, quant)
    r, e = profile.score_ratio, profile.error_ratio
    for i, j in candidates:
        if e[j] >= 1.0:
            continue
        lower = max(1.0, (1.0 - e[i]) / (1.0 - e[j]))
        upper = r[i] / r[j]
        if not upper > lower * (1.0 + 1e-9):
            continue
        t = float(np.sqrt(lower * upper))
        targets = np.full(m.n_layers, 1e3 * max(t, 1.0) * max(1.0, r.max() / r.min()))
        targets[below] = 1e-3 / max(1.0, r.max())
        targets[i], targets[j] = 1.0, t
        engineered = rescale_layer_scores(m, targets)
        logger.debug(f"Order flip between layers {i} and {j} with score ratio {t:.6g}")
        return engineered
    raise ValueError(f"No admissible order-flip scaling exists for {quant.name} on this model.")


def find_order_flip(
    dims, quant: CompressionOp, seeds, below=(), n_samples: int = 128
) -> tuple[LayeredModel, int]:
    """Engineer an order flip on the first seed that admits one."""
    for seed in seeds:
        m = build_synthetic_model(dims, seed=int(seed), n_samples=n_samples)
        try:
            return engineer_order_flip(m, quant, below=below), int(seed)
        except ValueError:
            logger.debug(f"Seed {seed} admits no order flip")
    raise ValueError(f"None of the seeds admits an order flip for {quant.name}.")


@dataclass(frozen=True, eq=False)
class TheoremInstance:
    model: LayeredModel
    metric: Metric
    f1: CompressionOp
    f2: CompressionOp
    f1_first: PipelineResult
    f2_first: PipelineResult
    partition: UnitPartition

    @property
    def beta(self) -> float:
        return self.metric.beta

    @property
    def quant_to_prune_ratio(self) -> float | None:
        for op in (self.f1, self.f2):
            if op.is_quant:
                return quant_to_prune_ratio(self.model, op)
        return None


def make_theorem_instance(
    model: LayeredModel, metric: Metric, f1: CompressionOp, f2: CompressionOp
) -> TheoremInstance:
    """
    Run both orders once and freeze them together with their partition.

    Raises:
        ValueError: if the metric is not ``synthetic_exact``.
        DisjointnessError: if the pair lacks disjoint selectivity.
    """
    if metric.kind != "synthetic_exact":
        raise ValueError(f"Theorem instances need the synthetic_exact metric, got {metric.kind}.")
    f1_first, f2_first = run_both_orders(model, f1, f2)
    partition = partition_from_results(model, f1_first, f2_first, order_level(f1, f2))
    return TheoremInstance(model, metric, f1, f2, f1_first, f2_first, partition)


@dataclass(frozen=True)
class Theorem1Result:
    lhs: float
    rhs: float
    residual: float
    sizes: tuple[int, int, int, int]

    def passed(self, tolerance: float = 1e-8) -> bool:
        return self.residual < tolerance


def order_contributions(inst: TheoremInstance, units) -> np.ndarray:
    """``||eps_f1(u)||^2 - ||eps_f2(u)||^2`` for each unit, each op forced on the original model."""
    units = list(units)
    if not units:
        return np.zeros(0)
    e1 = forced_unit_errors(inst.model, inst.f1, units)
    e2 = forced_unit_errors(inst.model, inst.f2, units)
    return np.array([frob_norm_sq(a) - frob_norm_sq(b) for a, b in zip(e1, e2)])


def theorem1_check(inst: TheoremInstance) -> Theorem1Result:
    """
    Compare the directly evaluated COA with its closed form over order-dependent units.

    ``lhs`` is M(f2(f1(phi))) - M(f1(f2(phi))) from the two frozen pipelines; ``rhs`` is
    ``beta * (sum_G2 g - sum_G1 g)``; the residual is relative to ``max(1, |lhs|)``.
    """
    lhs = evaluate(inst.f1_first.model, inst.model, inst.metric) - evaluate(
        inst.f2_first.model, inst.model, inst.metric
    )
    g1 = order_contributions(inst, inst.partition.g1)
    g2 = order_contributions(inst, inst.partition.g2)
    rhs = inst.beta * (float(g2.sum()) - float(g1.sum()))
    residual = abs(lhs - rhs) / max(1.0, abs(lhs))
    return Theorem1Result(float(lhs), float(rhs), float(residual), inst.partition.sizes)


@dataclass(frozen=True, eq=False)
class Theorem2Result:
    frame: pd.DataFrame
    monotone: bool
    assumption_violating: bool
    quant_to_prune_ratio: float
    disjoint: bool

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.frame["cer_diff"].tolist(), self.frame["coa_mean"].tolist()))

    @property
    def passed(self) -> bool:
        return self.monotone or self.assumption_violating


def is_monotone(means, standard_errors, width: float = 2.0) -> bool:
    """Non-decreasing within ``width`` combined standard errors of consecutive points."""
    means = np.asarray(means, dtype=float)
    se = np.asarray(standard_errors, dtype=float)
    for k in range(len(means) - 1):
        slack = width * np.sqrt(se[k] ** 2 + se[k + 1] ** 2) + 1e-12
        if means[k + 1] < means[k] - slack:
            return False
    return True


def theorem2_experiment(
    model: LayeredModel,
    metric: Metric,
    prune: CompressionOp,
    bits,
    trials: int = 64,
    seed: int = 0,
    scope: str = "tensor",
    threshold: float = 0.1,
    n_jobs: int = 1,
    curve: QuantCurve | None = None,
) -> Theorem2Result:
    """
    Mean COA(quant -> prune) against the CER difference under stochastic rounding.

    Args:
        model (LayeredModel): the model to compress.
        metric (Metric): must be ``synthetic_exact``.
        prune (CompressionOp): fixed pruning op.
        bits (Sequence[int]): at least two bit-widths (duplicates are merged).
        trials (int): independent rounding draws per bit-width.
        seed (int): base seed; per-trial seeds are spawned from it and shared across bits.
        scope (str): quantization scale scope.
        threshold (float): quantization-to-pruning error ratio above which the run is
            flagged as violating the small-quantization-error assumption.
        n_jobs (int): joblib workers for the trials.
        curve (QuantCurve | None): nearest-rounding curve for C*_P; built when omitted.

    Returns:
        Theorem2Result: one row per bit-width sorted by increasing ``cer_diff`` with the
        trial mean and standard error of COA, plus the monotonicity verdict.

    Raises:
        ValueError: for fewer than two bit-widths, a non-pruning op, ``trials < 1`` or a
            metric other than ``synthetic_exact``.
    """
    bits = list(bits)
    if len(bits) < 2:
        raise ValueError(f"theorem2_experiment needs at least 2 bit-widths, got {bits}.")
    if not prune.is_pruning:
        raise ValueError(f"Expected a pruning op, got {prune.name}.")
    if metric.kind != "synthetic_exact":
        raise ValueError(f"theorem2 runs need the synthetic_exact metric, got {metric.kind}.")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}.")
    bits = sorted({int(b) for b in bits}, reverse=True)
    curve = build_quant_curve(model, metric, scope=scope) if curve is None else curve
    cer_prune = cer(model, metric, prune, curve).value
    trial_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(trials)]

    jobs = [
        CompressionOp.quant(b, rounding="stochastic", scope=scope, seed=s) for b in bits for s in trial_seeds
    ]
    values = Parallel(n_jobs=n_jobs)(delayed(coa)(model, metric, q, prune) for q in jobs)
    values = np.array(values).reshape(len(bits), trials)

    disjoint, ratio = True, 0.0
    for b in bits:
        q = CompressionOp.quant(b, rounding="stochastic", scope=scope, seed=trial_seeds[0])
        disjoint = disjoint and disjoint_selectivity(model, q, prune)
        ratio = max(ratio, quant_to_prune_ratio(model, q))

    se = values.std(axis=1, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros(len(bits))
    frame = pd.DataFrame(
        {
            "B": bits,
            "C_Q": [B_ORIG / b for b in bits],
            "CER_P": cer_prune,
            "cer_diff": [cer_prune - B_ORIG / b for b in bits],
            "coa_mean": values.mean(axis=1),
            "coa_se": se,
            "trials": trials,
        }
    )
    frame = frame.sort_values("cer_diff", kind="stable").reset_index(drop=True)
    monotone = is_monotone(frame["coa_mean"], frame["coa_se"])
    violating = ratio >= threshold or not disjoint
    if violating:
        logger.warning(
            f"Run is assumption-violating (quant/prune error ratio {ratio:.3g}, disjoint={disjoint})"
        )
    logger.info(f"theorem2 verdict for {prune.name}: monotone={monotone}")
    return Theorem2Result(frame, monotone, violating, ratio, disjoint)


@dataclass(frozen=True)
class ViolationStep:
    p: float
    k: int
    g1: int
    case: int | None
    coa: float
    consistent: bool = True


def violation_case_explorer(
    model: LayeredModel,
    metric: Metric,
    prune_fractions,
    quant: CompressionOp,
    family: str = "prune_layer",
    tolerance: float = 1e-9,
) -> list[ViolationStep]:
    """
    Track how the order-dependent groups change as the pruning budget grows one unit at a time.

    Each step after the first is Case 1 when |G1| shrinks, Case 2 when it is unchanged and
    Case 3 when it grows. COA(quant -> prune) must not fall across Case 1 and Case 2 steps;
    Case 3 steps are reported only.

    Raises:
        ValueError: if consecutive fractions do not differ by exactly one pruned unit.
        DisjointnessError: if the pair lacks disjoint selectivity at some fraction.
    """
    ops = [CompressionOp.prune(p, family=family) for p in prune_fractions]
    if not ops:
        raise ValueError("violation_case_explorer needs at least one pruning fraction.")
    level = ops[0].granularity
    total = count_units(model, level)
    counts = [int(np.floor(op.fraction * total + 0.5)) for op in ops]
    for a, b in zip(counts, counts[1:]):
        if b - a != 1:
            raise ValueError(f"Consecutive pruning fractions must add exactly one unit, got counts {counts}.")
    steps = []
    for op, k in zip(ops, counts):
        partition = partition_units(model, quant, op)
        value = coa(model, metric, quant, op)
        if not steps:
            steps.append(ViolationStep(op.fraction, k, len(partition.g1), None, value))
            continue
        previous = steps[-1]
        g1 = len(partition.g1)
        case = 1 if g1 < previous.g1 else 2 if g1 == previous.g1 else 3
        consistent = case == 3 or value >= previous.coa - tolerance
        if case == 3:
            logger.warning(f"Case 3 step at p={op.fraction:g}: order-dependent units grew to {g1}")
        elif not consistent:
            logger.warning(f"COA fell across a Case {case} step at p={op.fraction:g}")
        steps.append(ViolationStep(op.fraction, k, g1, case, value, consistent))
    return steps
