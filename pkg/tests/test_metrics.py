import numpy as np
import pytest

from ordlab.linalg import frob_norm_sq
from ordlab.models import AbstractType
from ordlab.models.compressors import CompressionOp, apply, run_pipeline
from ordlab.models.metrics import (
    CURVE_BITS,
    DisjointnessError,
    QuantCurve,
    build_quant_curve,
    cer,
    check_disjoint,
    coa,
    disjoint_selectivity,
    interference,
    interference_norm_of_sum,
    interference_terms,
    invert_curve,
    order_level,
    order_report,
    partition_units,
    performance_gap,
)
from ordlab.models.model_builder import build_synthetic_model, evaluate, layer_errors


@pytest.fixture()
def unstructured():
    return CompressionOp.prune(0.25, family="prune_unstructured")


class TestInvertCurve:
    curve = QuantCurve.from_points([(2, 70), (4, 60)])

    def test_interpolates(self):
        estimate = invert_curve(self.curve, 65)
        assert estimate.value == 3.0
        assert not estimate.flagged

    def test_clamps_above_best_point(self):
        estimate = invert_curve(self.curve, 75)
        assert estimate.value == 2.0
        assert estimate.clamped and not estimate.flagged

    def test_extrapolates_below_worst_point(self):
        estimate = invert_curve(self.curve, 50)
        assert estimate.value == 6.0
        assert estimate.extrapolated and estimate.flagged

    def test_flat_segment_is_ambiguous(self):
        curve = QuantCurve.from_points([(1, 70), (2, 70), (4, 60)])
        estimate = invert_curve(curve, 70)
        assert estimate.value == 1.5
        assert estimate.ambiguous

    def test_envelope_repairs_noise(self):
        curve = QuantCurve.from_points([(4, 65), (1, 80), (2, 60)])
        assert curve.ratios.tolist() == [1.0, 2.0, 4.0]
        assert curve.raw.tolist() == [80.0, 60.0, 65.0]
        assert curve.envelope.tolist() == [80.0, 60.0, 60.0]

    def test_invalid_curves(self):
        with pytest.raises(ValueError):
            QuantCurve.from_points([(1, 80)])
        with pytest.raises(ValueError):
            QuantCurve.from_points([(1, 80), (1, 70)])


def test_quant_curve(model, metric):
    curve = build_quant_curve(model, metric)
    assert curve.bits == CURVE_BITS
    assert curve.ratios[0] == 1.0 and curve.ratios[-1] == 8.0
    assert curve.envelope[0] == 0.0
    assert list(curve.to_frame().columns) == ["B", "C_Q", "performance", "envelope"]


def test_cer_recovers_quantization_ratios(model, metric):
    curve = build_quant_curve(model, metric)
    for bits in CURVE_BITS:
        estimate = cer(model, metric, CompressionOp.quant(bits), curve)
        assert abs(estimate.value - 16 / bits) < 1e-6


def test_cer_of_pruning_is_finite(model, metric, prune_layer):
    curve = build_quant_curve(model, metric)
    estimate = cer(model, metric, prune_layer, curve)
    assert np.isfinite(estimate.value) and estimate.value >= 1.0


class TestCoa:
    def test_antisymmetric(self, model, metric, quant4, unstructured):
        assert coa(model, metric, quant4, unstructured) == -coa(model, metric, unstructured, quant4)

    def test_same_op(self, model, metric, quant4):
        assert coa(model, metric, quant4, quant4) == 0.0
        assert performance_gap(model, metric, quant4, quant4) == 0.0

    def test_matches_pipelines(self, model, metric, quant4, unstructured):
        forward = evaluate(run_pipeline([quant4, unstructured], model).model, model, metric)
        backward = evaluate(run_pipeline([unstructured, quant4], model).model, model, metric)
        assert coa(model, metric, quant4, unstructured) == forward - backward


class TestDisjointness:
    def test_layer_pruning_and_quantization(self, model, quant4, prune_layer):
        assert order_level(quant4, prune_layer) == AbstractType.LAYER
        assert disjoint_selectivity(model, quant4, prune_layer)

    def test_unstructured_pruning_and_quantization(self, model, quant4, unstructured):
        assert not disjoint_selectivity(model, quant4, unstructured)

    def test_check_disjoint_on_masks(self, model, quant4, prune_layer):
        result = run_pipeline([prune_layer, quant4], model)
        assert check_disjoint(list(result.masks), result.model)
        assert not check_disjoint([result.masks[1]], result.model)
        with pytest.raises(ValueError):
            check_disjoint([], result.model)

    def test_three_masks(self, model):
        ops = [
            CompressionOp.prune(0.25, family="prune_layer"),
            CompressionOp.quant(4, layers=[0, 1, 2, 3]),
            CompressionOp.share(2),
        ]
        result = run_pipeline(ops, model)
        assert not check_disjoint(list(result.masks), result.model)


class TestPartition:
    def test_order_flip(self, flip_model, quant4, prune_layer):
        partition = partition_units(flip_model, quant4, prune_layer)
        assert partition.level == AbstractType.LAYER
        assert partition.sizes == (1, 1, 0, 2)
        assert {u.layer for u in partition.order_dependent} == {
            u.layer for u in partition.g1
        } | {u.layer for u in partition.g2}

    def test_separated_scores(self, separated_model, quant4, prune_layer):
        partition = partition_units(separated_model, quant4, prune_layer)
        assert partition.sizes == (0, 0, 1, 3)
        assert partition.g3[0].layer == 0

    def test_requires_disjoint_selectivity(self, model, quant4, unstructured):
        with pytest.raises(DisjointnessError):
            partition_units(model, quant4, unstructured)


class TestInterference:
    def test_vanishes_for_disjoint_pairs(self, model, quant4, prune_layer):
        assert interference(model, quant4, prune_layer) == 0.0
        assert interference(model, prune_layer, quant4) == 0.0

    def test_matches_layer_errors(self, model, unstructured):
        quant = CompressionOp.quant(3)
        both = run_pipeline([unstructured, quant], model).model
        quantized, _ = apply(quant, model, model)
        expected = sum(
            frob_norm_sq(e12 - e2) for e12, e2 in zip(layer_errors(model, both), layer_errors(model, quantized))
        )
        assert interference(model, unstructured, quant) > 0
        assert np.isclose(interference(model, unstructured, quant), expected, rtol=1e-10)

    def test_pruning_second_adds_nothing(self, model, unstructured, quant4):
        assert interference(model, quant4, unstructured) == 0.0

    def test_grows_with_pruning(self, model):
        quant = CompressionOp.quant(8)
        light = interference(model, CompressionOp.prune(0.05, family="prune_unstructured"), quant)
        heavy = interference(model, CompressionOp.prune(0.4, family="prune_unstructured"), quant)
        assert 0 < light < heavy

    def test_terms_follow_the_second_op(self, model, unstructured, quant4):
        assert len(interference_terms(model, unstructured, quant4)) == model.n_layers
        assert len(interference_terms(model, quant4, unstructured)) == 64

    def test_norm_of_sum(self, model, unstructured):
        quant = CompressionOp.quant(3)
        terms = interference_terms(model, unstructured, quant)
        expected = frob_norm_sq(np.sum(terms, axis=0))
        assert np.isclose(interference_norm_of_sum(model, unstructured, quant), expected)

    def test_norm_of_sum_needs_one_shape(self, unstructured):
        m = build_synthetic_model([8, 16, 8], seed=0)
        with pytest.raises(ValueError):
            interference_norm_of_sum(m, unstructured, CompressionOp.quant(3))


def test_order_report(flip_model, metric, quant4, prune_layer):
    curve = build_quant_curve(flip_model, metric)
    report = order_report(flip_model, metric, quant4, prune_layer, curve)
    assert report.disjoint
    assert report.partition.sizes == (1, 1, 0, 2)
    assert report.coa == coa(flip_model, metric, quant4, prune_layer)
    assert report.coa == report.m_f1_first - report.m_f2_first
    assert report.interference_forward == 0.0
    assert report.interference_backward == 0.0
    row = report.to_row()
    assert row["G1"] == 1 and row["G4"] == 2
    assert row["f1"] == quant4.name
