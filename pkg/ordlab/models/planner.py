import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ordlab import logger
from ordlab.linalg import frob_norm_sq
from ordlab.models import B_ORIG, AbstractType, family_order, prune_families
from ordlab.models.compressors import (
    CompressionOp,
    apply,
    compression_ratio,
    run_pipeline,
)
from ordlab.models.metrics import (
    CURVE_BITS,
    QuantCurve,
    cer,
    check_disjoint,
    invert_curve,
)
from ordlab.models.model_builder import LayeredModel, Metric, count_units, evaluate, layer_error

MAX_BRUTE_FORCE_OPS = 6


@dataclass(frozen=True, eq=False)
class Plan:
    """An ordered compression pipeline, optionally annotated with the CER used to rank it."""

    steps: tuple[CompressionOp, ...]
    predicted_rank: tuple[float, ...] | None = None
    warnings: tuple[str, ...] = ()
    score: float | None = None

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ValueError("A plan needs at least one step.")
        for step in steps:
            if not isinstance(step, CompressionOp):
                raise ValueError(f"Plan steps must be CompressionOp instances, got {step!r}.")
        object.__setattr__(self, "steps", steps)
        if self.predicted_rank is not None:
            rank = tuple(float(r) for r in self.predicted_rank)
            if len(rank) != len(steps):
                raise ValueError(f"Got {len(rank)} rank values for {len(steps)} steps.")
            object.__setattr__(self, "predicted_rank", rank)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def names(self) -> list[str]:
        return [step.name for step in self.steps]

    @property
    def nominal_ratio(self) -> float:
        return float(np.prod([step.ratio for step in self.steps]))

    def to_dict(self) -> dict:
        from ordlab.data_utils import op_to_dict

        return {
            "steps": [op_to_dict(step) for step in self.steps],
            "predicted_rank": None if self.predicted_rank is None else list(self.predicted_rank),
            "nominal_ratio": self.nominal_ratio,
            "score": self.score,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def pipeline_score(m: LayeredModel, metric: Metric, steps) -> float:
    return evaluate(run_pipeline(list(steps), m).model, m, metric)


def brute_force_order(
    m: LayeredModel, metric: Metric, ops: list[CompressionOp], n_jobs: int = 1
) -> tuple[Plan, pd.DataFrame]:
    """
    Evaluate every permutation of ``ops`` and keep the best pipeline.

    Permutations are enumerated in lexicographic order of step indices; the first one
    reaching the maximal score wins.

    Args:
        m (LayeredModel): model to compress.
        metric (Metric): performance metric.
        ops (list[CompressionOp]): between 1 and 6 ops.
        n_jobs (int): joblib workers.

    Returns:
        tuple[Plan, pd.DataFrame]: the best plan and one row per permutation with columns
        ``permutation``, ``order`` and ``score``.

    Raises:
        ValueError: for no ops or more than 6 ops.
    """
    ops = list(ops)
    if not ops:
        raise ValueError("brute_force_order needs at least one op.")
    if len(ops) > MAX_BRUTE_FORCE_OPS:
        raise ValueError(
            f"{len(ops)} ops mean {math.factorial(len(ops))} pipelines; "
            f"brute force is limited to {MAX_BRUTE_FORCE_OPS} ops, use progressive_order instead."
        )
    permutations = list(itertools.permutations(range(len(ops))))
    logger.info(f"Evaluating {len(permutations)} orders of {len(ops)} ops")
    scores = Parallel(n_jobs=n_jobs)(
        delayed(pipeline_score)(m, metric, [ops[i] for i in perm]) for perm in permutations
    )
    table = pd.DataFrame(
        {
            "permutation": ["-".join(str(i) for i in perm) for perm in permutations],
            "order": [" -> ".join(ops[i].name for i in perm) for perm in permutations],
            "score": scores,
        }
    )
    best = 0
    for k, score in enumerate(scores):
        if score > scores[best]:
            best = k
    plan = Plan(tuple(ops[i] for i in permutations[best]), score=float(scores[best]))
    return plan, table


def progressive_order(
    m: LayeredModel, metric: Metric, ops: list[CompressionOp], curve: QuantCurve
) -> Plan:
    """
    Order ops from weakest to strongest by their CER on the original model.

    Ties are broken by smaller nominal ratio, then by family order.
    """
    ops = list(ops)
    if not ops:
        raise ValueError("progressive_order needs at least one op.")
    estimates = [cer(m, metric, op, curve) for op in ops]
    order = sorted(
        range(len(ops)),
        key=lambda i: (estimates[i].value, ops[i].ratio, family_order.index(ops[i].family), i),
    )
    warnings = [
        f"CER of {ops[i].name} is extrapolated beyond the quantization curve"
        for i in order
        if estimates[i].extrapolated
    ]
    for message in warnings:
        logger.warning(message)
    steps = tuple(ops[i] for i in order)
    return Plan(
        steps,
        predicted_rank=tuple(estimates[i].value for i in order),
        warnings=tuple(warnings),
        score=pipeline_score(m, metric, steps),
    )


def adjacent_transposition_check(m: LayeredModel, metric: Metric, plan: Plan) -> pd.DataFrame:
    """COA of keeping each adjacent pair of the plan in place rather than swapping it."""
    base = pipeline_score(m, metric, plan.steps)
    rows = []
    for k in range(len(plan.steps) - 1):
        swapped = list(plan.steps)
        swapped[k], swapped[k + 1] = swapped[k + 1], swapped[k]
        rows.append(
            {
                "position": k,
                "earlier": plan.steps[k].name,
                "later": plan.steps[k + 1].name,
                "coa": base - pipeline_score(m, metric, swapped),
            }
        )
    return pd.DataFrame(rows, columns=["position", "earlier", "later", "coa"])


def intermediate_cer_diagnostic(
    m: LayeredModel, metric: Metric, plan: Plan, curve: QuantCurve
) -> pd.DataFrame:
    """
    CER of every step on the original model next to its CER on the model the previous steps produce.

    The intermediate CER inverts a quantization curve measured on that intermediate model.
    """
    bits = curve.bits if curve.bits is not None else CURVE_BITS
    current = m
    rows = []
    for step in plan.steps:
        points = []
        for b in bits:
            quantized, _ = apply(CompressionOp.quant(b), current, m)
            points.append((B_ORIG / b, evaluate(quantized, m, metric)))
        local = QuantCurve.from_points(points, bits=bits)
        compressed, _ = apply(step, current, m)
        rows.append(
            {
                "step": step.name,
                "cer_original": cer(m, metric, step, curve).value,
                "cer_intermediate": invert_curve(local, evaluate(compressed, m, metric)).value,
            }
        )
        current = compressed
    return pd.DataFrame(rows, columns=["step", "cer_original", "cer_intermediate"])


def ratio_report(m: LayeredModel, plan: Plan, rel_tol: float = 1e-6) -> dict:
    """Realized footprint ratio of the plan against the product of its nominal step ratios."""
    realized = compression_ratio(m, run_pipeline(list(plan.steps), m).model)
    nominal = plan.nominal_ratio
    consistent = bool(np.isclose(realized, nominal, rtol=rel_tol, atol=0.0))
    if not consistent:
        logger.warning(f"Realized ratio {realized:.6g} differs from nominal ratio {nominal:.6g}")
    return {"nominal_ratio": nominal, "realized_ratio": realized, "consistent": consistent}


def multi_stage(
    m: LayeredModel,
    metric: Metric,
    total_p: float,
    splits,
    quant: CompressionOp,
    family: str = "prune_row",
) -> pd.DataFrame:
    """
    Compare two-stage pruning schedules ``P(p1) -> Q -> P(p2)``.

    The second stage selects among the units the first stage left alive and removes
    ``round(total_p * n) - round(p1 * n)`` of the ``n`` units, so every split removes the
    same number of units in total.

    Returns:
        pd.DataFrame: columns ``p1``, ``p2``, ``score``, ``reverse_score`` and ``advantage``
        (score of the split minus score of the swapped split).

    Raises:
        ValueError: if a split does not sum to ``total_p`` or a stage would remove no unit.
    """
    n = count_units(m, prune_families[family])
    total_k = int(np.floor(total_p * n + 0.5))
    cache = {}

    def score(p1, p2):
        if (p1, p2) not in cache:
            first_k = int(np.floor(p1 * n + 0.5))
            if not 0 < first_k < total_k:
                raise ValueError(f"Split ({p1}, {p2}) leaves a stage with no unit out of {total_k}.")
            second = CompressionOp.prune((total_k - first_k) / n, family=family)
            steps = [CompressionOp.prune(p1, family=family), quant, second]
            cache[(p1, p2)] = pipeline_score(m, metric, steps)
        return cache[(p1, p2)]

    rows = []
    for p1, p2 in splits:
        p1, p2 = float(p1), float(p2)
        if p1 <= 0 or p2 <= 0:
            raise ValueError(f"Both stages must prune something, got split ({p1}, {p2}).")
        if abs(p1 + p2 - total_p) > 1e-9:
            raise ValueError(f"Split ({p1}, {p2}) does not sum to total_p={total_p}.")
        forward, backward = score(p1, p2), score(p2, p1)
        rows.append({"p1": p1, "p2": p2, "score": forward, "reverse_score": backward, "advantage": forward - backward})
    return pd.DataFrame(rows, columns=["p1", "p2", "score", "reverse_score", "advantage"])


def allocate_bits(
    m: LayeredModel,
    avg_bits: float,
    bit_menu,
    rounding: str = "nearest",
    scope: str = "tensor",
) -> tuple[int, ...]:
    """
    Greedy per-layer bit allocation under a parameter-weighted average bit budget.

    Every layer starts at the largest menu entry; the layer whose next lower bit-width adds
    the least layer error per saved bit is lowered until the budget is met.

    Raises:
        ValueError: if even the smallest menu entry exceeds ``avg_bits``.
    """
    menu = sorted({int(b) for b in bit_menu})
    if not menu:
        raise ValueError("bit_menu must not be empty.")
    if menu[0] > avg_bits:
        raise ValueError(f"avg_bits={avg_bits} is infeasible with bit menu {menu}.")
    sizes = np.array([layer.weight.size for layer in m.layers], dtype=float)
    errors = {}

    def error(i, b):
        if (i, b) not in errors:
            op = CompressionOp.quant(b, rounding=rounding, scope=scope, layers=(i,))
            errors[(i, b)] = frob_norm_sq(layer_error(m, apply(op, m, m)[0], i))
        return errors[(i, b)]

    bits = [menu[-1]] * m.n_layers
    while np.dot(bits, sizes) / sizes.sum() > avg_bits + 1e-12:
        best, best_cost = None, np.inf
        for i, b in enumerate(bits):
            position = menu.index(b)
            if position == 0:
                continue
            lower = menu[position - 1]
            cost = (error(i, lower) - error(i, b)) / ((b - lower) * sizes[i])
            if cost < best_cost:
                best, best_cost = (i, lower), cost
        i, lower = best
        bits[i] = lower
    logger.debug(f"Allocated bits {bits} for average {avg_bits}")
    return tuple(bits)


def bit_groups(allocation, descending: bool = True, **quant_kwargs) -> list[CompressionOp]:
    """One quantization op per distinct bit-width, restricted to the layers holding it."""
    groups = {}
    for i, b in enumerate(allocation):
        groups.setdefault(b, []).append(i)
    return [
        CompressionOp.quant(b, layers=tuple(groups[b]), **quant_kwargs)
        for b in sorted(groups, reverse=descending)
    ]


@dataclass(frozen=True)
class MpqResult:
    allocation: tuple[int, ...]
    progressive_score: float
    regressive_score: float
    coa: float
    disjoint: bool
    progressive: tuple[str, ...] = field(default_factory=tuple)


def mpq_orderings(
    m: LayeredModel,
    metric: Metric,
    avg_bits: float,
    bit_menu,
    rounding: str = "nearest",
    scope: str = "tensor",
) -> MpqResult:
    """
    Apply a fixed mixed-precision allocation from high to low bits and from low to high bits.

    Each bit-width group acts as its own compression method; disjoint selectivity across
    all groups is checked on both pipelines at Layer level.
    """
    allocation = allocate_bits(m, avg_bits, bit_menu, rounding=rounding, scope=scope)
    progressive_ops = bit_groups(allocation, descending=True, rounding=rounding, scope=scope)
    regressive_ops = list(reversed(progressive_ops))
    progressive = run_pipeline(progressive_ops, m)
    regressive = run_pipeline(regressive_ops, m)
    disjoint = check_disjoint(list(progressive.masks), progressive.model, AbstractType.LAYER) and check_disjoint(
        list(regressive.masks), regressive.model, AbstractType.LAYER
    )
    prog_score = evaluate(progressive.model, m, metric)
    regr_score = evaluate(regressive.model, m, metric)
    return MpqResult(
        allocation,
        prog_score,
        regr_score,
        prog_score - regr_score,
        disjoint,
        tuple(op.name for op in progressive_ops),
    )
