"""Experiment runners, one per experiment kind, and the artifact-writing ``run`` entry point."""
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from ordlab import logger
from ordlab.config import ExperimentConfig, configurable
from ordlab.data_utils import op_from_dict
from ordlab.fitting import fit_exponential
from ordlab.models import B_ORIG
from ordlab.models.compressors import (
    CompressionOp,
    compression_ratio,
    rotation_pruning_error,
    run_pipeline,
)
from ordlab.models.metrics import CURVE_BITS, build_quant_curve, cer, order_report
from ordlab.models.model_builder import build_synthetic_model, evaluate, make_metric
from ordlab.models.planner import (
    MAX_BRUTE_FORCE_OPS,
    adjacent_transposition_check,
    brute_force_order,
    intermediate_cer_diagnostic,
    mpq_orderings,
    multi_stage,
    progressive_order,
    ratio_report,
)
from ordlab.models.theory import (
    make_theorem_instance,
    theorem1_check,
    theorem2_experiment,
    violation_case_explorer,
)
from ordlab.reporting import (
    frame_records,
    make_manifest,
    make_report_df,
    update_report,
    write_csv,
    write_json,
)

MIN_FIT_POINTS = 4


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    report: pd.DataFrame
    summary: dict = field(default_factory=dict)
    fit: dict | None = None
    passed: bool | None = None


def _map(func, items, n_jobs: int = 1, desc: str | None = None) -> list:
    """Apply ``func`` to argument tuples in order, in a joblib pool when ``n_jobs != 1``."""
    items = list(items)
    results = []
    with tqdm(total=len(items), desc=desc, file=sys.stderr, disable=None) as pbar:
        if n_jobs == 1:
            for args in items:
                results.append(func(*args))
                pbar.update(1)
        else:
            for value in Parallel(n_jobs=n_jobs, return_as="generator")(delayed(func)(*args) for args in items):
                results.append(value)
                pbar.update(1)
    return results


def _trial_seeds(seed: int, trials: int) -> list[int]:
    return [seed + t for t in range(trials)]


def _fit_series(frame: pd.DataFrame, group: str, x: str, y: str) -> dict:
    fits = {}
    for key, part in frame.groupby(group, sort=True):
        points = list(zip(part[x].astype(float), part[y].astype(float)))
        if len(points) < MIN_FIT_POINTS:
            continue
        fits[f"{group}={key:g}"] = fit_exponential(sorted(points)).to_dict()
    return fits


def _coa_grid_point(m, metric, curve, p, b, prune_family, scoring, rounding, quant_scope, rotate, seed):
    prune = CompressionOp.prune(p, family=prune_family, scoring=scoring)
    quant = CompressionOp.quant(b, rounding=rounding, scope=quant_scope, rotate=rotate, seed=seed)
    return order_report(m, metric, quant, prune, curve)


@configurable
def run_coa_grid(
    dims,
    seed,
    n_samples,
    metric_kind,
    beta,
    base_value,
    prune_fractions,
    bits,
    prune_family,
    quant_scope,
    rounding,
    rotate,
    scoring,
    trials=1,
    n_jobs=1,
) -> ExperimentResult:
    """
    COA(quant -> prune), performance gap, CER and interference over a pruning x bit-width grid.

    ``interference`` is measured with pruning applied first; ``G1`` is empty when the pair
    lacks disjoint selectivity.
    """
    report = make_report_df("coa_grid", trials=trials, rotate=rotate)
    metric = make_metric(metric_kind, beta, base_value)
    for trial, trial_seed in enumerate(_trial_seeds(seed, trials)):
        m = build_synthetic_model(dims, trial_seed, n_samples)
        curve = build_quant_curve(m, metric, rounding=rounding, scope=quant_scope, seed=trial_seed)
        grid = [(p, b) for p in prune_fractions for b in bits]
        logger.info(f"COA grid of {len(grid)} points on {m.model_id} (seed {trial_seed})")
        reports = _map(
            _coa_grid_point,
            [
                (m, metric, curve, p, b, prune_family, scoring, rounding, quant_scope, rotate, trial_seed)
                for p, b in grid
            ],
            n_jobs=n_jobs,
            desc="coa_grid",
        )
        for (p, b), r in zip(grid, reports):
            values = dict(
                trial=trial,
                p=p,
                B=b,
                rotate=rotate,
                C_P=1.0 / (1.0 - p),
                C_Q=B_ORIG / b,
                CER_P=r.cer_f2.value,
                CER_Q=r.cer_f1.value,
                PG=r.pg,
                COA=r.coa,
                interference=r.interference_backward,
                G1=np.nan if r.partition is None else len(r.partition.g1),
                disjoint=r.disjoint,
            )
            report.loc[len(report.index)] = update_report(report, **values)
    report = report.infer_objects()
    report["cer_diff"] = report["CER_P"] - report["C_Q"]
    fit_frame = report if trials == 1 else report[report["trial"] == 0]
    fit = _fit_series(fit_frame, "p", "cer_diff", "COA")
    return ExperimentResult(report, summary={"points": len(report.index)}, fit=fit or None)


@configurable
def run_cer_curve(
    dims, seed, n_samples, metric_kind, beta, base_value, bits, prune_fractions, prune_family, rounding, quant_scope,
    scoring,
) -> ExperimentResult:
    """Quantization performance curve plus the CER of each configured pruning fraction."""
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    curve_bits = sorted(set(CURVE_BITS) | set(bits), reverse=True)
    curve = build_quant_curve(m, metric, curve_bits, rounding=rounding, scope=quant_scope, seed=seed)
    report = make_report_df("cer_curve")
    for row in curve.to_frame().itertuples(index=False):
        report.loc[len(report.index)] = update_report(
            report, B=row.B, C_Q=row.C_Q, performance=row.performance, envelope=row.envelope
        )
    estimates = {}
    for p in prune_fractions:
        estimate = cer(m, metric, CompressionOp.prune(p, family=prune_family, scoring=scoring), curve)
        estimates[f"{p:g}"] = {
            "value": estimate.value,
            "clamped": estimate.clamped,
            "extrapolated": estimate.extrapolated,
            "ambiguous": estimate.ambiguous,
        }
    return ExperimentResult(report.infer_objects(), summary={"cer_prune": estimates})


def _theorem1_instance(instance_seed, dims, n_samples, metric, prune, bits, rounding, quant_scope):
    m = build_synthetic_model(dims, instance_seed, n_samples)
    quant = CompressionOp.quant(bits, rounding=rounding, scope=quant_scope, seed=instance_seed)
    inst = make_theorem_instance(m, metric, quant, prune)
    return theorem1_check(inst), inst.quant_to_prune_ratio


@configurable
def run_theorem1(
    dims,
    seed,
    n_samples,
    metric_kind,
    beta,
    base_value,
    prune_fractions,
    bits,
    prune_family,
    quant_scope,
    rounding,
    scoring,
    instances=100,
    tolerance=1e-8,
    n_jobs=1,
) -> ExperimentResult:
    """Closed-form COA against direct evaluation on seeded instances (quant first vs prune first)."""
    metric = make_metric(metric_kind, beta, base_value)
    prune = CompressionOp.prune(prune_fractions[0], family=prune_family, scoring=scoring)
    report = make_report_df("theorem1")
    seeds = [seed + k for k in range(instances)]
    outcomes = _map(
        _theorem1_instance,
        [(s, dims, n_samples, metric, prune, bits[0], rounding, quant_scope) for s in seeds],
        n_jobs=n_jobs,
        desc="theorem1",
    )
    for k, (s, (result, ratio)) in enumerate(zip(seeds, outcomes)):
        g1, g2, g3, g4 = result.sizes
        report.loc[len(report.index)] = update_report(
            report,
            instance=k,
            seed=s,
            lhs=result.lhs,
            rhs=result.rhs,
            residual=result.residual,
            G1=g1,
            G2=g2,
            G3=g3,
            G4=g4,
            quant_to_prune=ratio,
        )
    report = report.infer_objects()
    max_residual = float(report["residual"].max())
    passed = max_residual < tolerance
    logger.info(f"theorem1 over {instances} instances: max residual {max_residual:.3e}")
    summary = {
        "instances": instances,
        "max_residual": max_residual,
        "tolerance": tolerance,
        "order_dependent_instances": int((report["G1"] > 0).sum()),
    }
    return ExperimentResult(report, summary=summary, passed=passed)


@configurable
def run_theorem2(
    dims,
    seed,
    n_samples,
    metric_kind,
    beta,
    base_value,
    prune_fractions,
    bits,
    prune_family,
    quant_scope,
    scoring,
    trials=1,
    n_jobs=1,
) -> ExperimentResult:
    """Mean COA(quant -> prune) under stochastic rounding against the CER difference."""
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    prune = CompressionOp.prune(prune_fractions[0], family=prune_family, scoring=scoring)
    result = theorem2_experiment(m, metric, prune, bits, trials=trials, seed=seed, scope=quant_scope, n_jobs=n_jobs)
    report = make_report_df("theorem2")
    for row in result.frame.to_dict(orient="records"):
        report.loc[len(report.index)] = update_report(report, **row)
    report = report.infer_objects()
    fit = None
    if len(report.index) >= MIN_FIT_POINTS:
        fit = {"cer_diff": fit_exponential(list(zip(report["cer_diff"], report["coa_mean"]))).to_dict()}
    summary = {
        "monotone": result.monotone,
        "assumption_violating": result.assumption_violating,
        "quant_to_prune_ratio": result.quant_to_prune_ratio,
        "disjoint": result.disjoint,
    }
    return ExperimentResult(report, summary=summary, fit=fit, passed=result.passed)


@configurable
def run_violation(
    dims,
    seed,
    n_samples,
    metric_kind,
    beta,
    base_value,
    prune_fractions,
    bits,
    prune_family,
    quant_scope,
    rounding,
) -> ExperimentResult:
    """Case 1/2/3 classification of one-unit pruning steps."""
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    quant = CompressionOp.quant(bits[0], rounding=rounding, scope=quant_scope, seed=seed)
    steps = violation_case_explorer(m, metric, prune_fractions, quant, family=prune_family)
    report = make_report_df("violation")
    for step in steps:
        report.loc[len(report.index)] = update_report(
            report, p=step.p, k=step.k, G1=step.g1, case=step.case, COA=step.coa, consistent=step.consistent
        )
    summary = {
        "case3_steps": sum(1 for s in steps if s.case == 3),
        "consistent": all(s.consistent for s in steps),
    }
    return ExperimentResult(report.infer_objects(), summary=summary)


@configurable
def run_multistage(
    dims,
    seed,
    n_samples,
    metric_kind,
    beta,
    base_value,
    total_p,
    splits,
    bits,
    prune_family,
    quant_scope,
    rounding,
) -> ExperimentResult:
    """Two-stage pruning schedules around one quantization step."""
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    quant = CompressionOp.quant(bits[0], rounding=rounding, scope=quant_scope, seed=seed)
    frame = multi_stage(m, metric, total_p, splits, quant, family=prune_family)
    report = make_report_df("multistage")
    for row in frame.to_dict(orient="records"):
        report.loc[len(report.index)] = update_report(report, **row)
    return ExperimentResult(report.infer_objects(), summary={"total_p": total_p})


@configurable
def run_mpq(
    dims, seed, n_samples, metric_kind, beta, base_value, avg_bits, bit_menu, quant_scope, rounding
) -> ExperimentResult:
    """Progressive (high to low bits) against regressive bit-group order for each budget."""
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    report = make_report_df("mpq")
    for avg in avg_bits:
        result = mpq_orderings(m, metric, avg, bit_menu, rounding=rounding, scope=quant_scope)
        report.loc[len(report.index)] = update_report(
            report,
            avg_bits=avg,
            allocation="-".join(str(b) for b in result.allocation),
            progressive_score=result.progressive_score,
            regressive_score=result.regressive_score,
            COA=result.coa,
            disjoint=result.disjoint,
        )
    report = report.infer_objects()
    return ExperimentResult(report, summary={"all_disjoint": bool(report["disjoint"].all())})


@configurable
def run_rotation_prune(
    dims, seed, n_samples, prune_fractions, prune_family, scoring
) -> ExperimentResult:
    """Matrix-wise and element-wise pruning error caused by storing layers in a rotated basis."""
    m = build_synthetic_model(dims, seed, n_samples)
    report = make_report_df("rotation_prune")
    for p in prune_fractions:
        errors = rotation_pruning_error(m, CompressionOp.prune(p, family=prune_family, scoring=scoring))
        report.loc[len(report.index)] = update_report(
            report,
            family=prune_family,
            p=p,
            matrix_wise=errors.matrix_wise,
            element_wise=errors.element_wise,
            total=errors.total,
        )
    return ExperimentResult(report.infer_objects())


@configurable
def run_plan(
    dims, seed, n_samples, metric_kind, beta, base_value, steps, rounding, quant_scope, n_jobs=1
) -> ExperimentResult:
    """Progressive-intensity plan for the configured steps, checked against brute force when feasible."""
    if not steps:
        raise ValueError("The plan experiment needs at least one configured step.")
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    ops = [op_from_dict(step) for step in steps]
    curve = build_quant_curve(m, metric, rounding=rounding, scope=quant_scope, seed=seed)
    plan = progressive_order(m, metric, ops, curve)
    transpositions = adjacent_transposition_check(m, metric, plan)
    diagnostic = intermediate_cer_diagnostic(m, metric, plan, curve)
    report = make_report_df("plan")
    for k, step in enumerate(plan.steps):
        report.loc[len(report.index)] = update_report(
            report,
            rank=k,
            step=step.name,
            CER=plan.predicted_rank[k],
            cer_intermediate=diagnostic["cer_intermediate"].iloc[k],
            coa_next=transpositions["coa"].iloc[k] if k < len(transpositions.index) else np.nan,
        )
    summary = {"plan": plan.to_dict(), "ratio": ratio_report(m, plan)}
    if len(ops) <= MAX_BRUTE_FORCE_OPS:
        best, table = brute_force_order(m, metric, ops, n_jobs=n_jobs)
        summary["brute_force"] = {
            "best": best.names,
            "best_score": best.score,
            "heuristic_score": plan.score,
            "heuristic_is_optimal": plan.score >= best.score,
            "table": frame_records(table),
        }
    return ExperimentResult(report.infer_objects(), summary=summary)


@configurable
def run_share(
    dims, seed, n_samples, metric_kind, beta, base_value, prune_fractions, prune_family, scoring, group_size
) -> ExperimentResult:
    """Pruning against parameter sharing: both orders, COA(prune -> share) and realized ratios."""
    m = build_synthetic_model(dims, seed, n_samples)
    metric = make_metric(metric_kind, beta, base_value)
    share = CompressionOp.share(group_size)
    report = make_report_df("share")
    for p in prune_fractions:
        prune = CompressionOp.prune(p, family=prune_family, scoring=scoring)
        prune_first = run_pipeline([prune, share], m).model
        share_first = run_pipeline([share, prune], m).model
        m_prune_first = evaluate(prune_first, m, metric)
        m_share_first = evaluate(share_first, m, metric)
        report.loc[len(report.index)] = update_report(
            report,
            p=p,
            group_size=group_size,
            M_prune_first=m_prune_first,
            M_share_first=m_share_first,
            COA=m_prune_first - m_share_first,
            ratio_prune_first=compression_ratio(m, prune_first),
            ratio_share_first=compression_ratio(m, share_first),
        )
    return ExperimentResult(report.infer_objects())


experiments = {
    "coa_grid": run_coa_grid,
    "cer_curve": run_cer_curve,
    "theorem1": run_theorem1,
    "theorem2": run_theorem2,
    "violation": run_violation,
    "multistage": run_multistage,
    "mpq": run_mpq,
    "rotation_prune": run_rotation_prune,
    "plan": run_plan,
    "share": run_share,
}

_PARALLEL_KINDS = {"coa_grid", "theorem1", "theorem2", "plan"}


def run(config: ExperimentConfig, out: str | Path | None = None, n_jobs: int = 1) -> tuple[ExperimentResult, dict]:
    """
    Execute the configured experiment and write its artifacts.

    Args:
        config (ExperimentConfig): validated configuration.
        out (str | Path | None): output directory; defaults to ``config.output_dir``.
        n_jobs (int): joblib workers for the kinds that parallelize.

    Returns:
        tuple[ExperimentResult, dict]: the result and the written artifact paths by name.
    """
    if config.kind not in experiments:
        raise NotImplementedError(f"The experiment kind '{config.kind}' is not implemented.")
    runner = experiments[config.kind]
    kwargs = {"n_jobs": n_jobs} if config.kind in _PARALLEL_KINDS else {}
    result = runner(config=config, **kwargs)

    out_dir = Path(config.output_dir if out is None else out)
    paths = {
        "report.csv": write_csv(result.report, out_dir / "report.csv"),
        "report.json": write_json(
            {
                "kind": config.kind,
                "passed": result.passed,
                "summary": result.summary,
                "rows": frame_records(result.report),
            },
            out_dir / "report.json",
        ),
    }
    if result.fit is not None:
        paths["fit.json"] = write_json(result.fit, out_dir / "fit.json")
    paths["manifest.json"] = write_json(
        make_manifest(config, list(paths) + ["manifest.json"]), out_dir / "manifest.json"
    )
    logger.info(f"Wrote {len(paths)} artifacts to {out_dir}")
    return result, paths
