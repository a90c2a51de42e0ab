import numpy as np
import pytest

from ordlab.linalg import hadamard
from ordlab.models import AbstractType
from ordlab.models.compressors import (
    ApplicationMask,
    CompressionOp,
    apply,
    apply_traced,
    compression_ratio,
    quant_error_stats,
    rotate_model,
    rotation_pruning_error,
    run_pipeline,
)
from ordlab.models.model_builder import Unit, build_synthetic_model, forward_activations, layer_errors


class TestCompressionOp:
    @pytest.mark.parametrize(
        "op, ratio",
        [
            (CompressionOp.prune(0.5), 2.0),
            (CompressionOp.prune(0.25, family="prune_unstructured"), 4 / 3),
            (CompressionOp.quant(4), 4.0),
            (CompressionOp.quant(16), 1.0),
            (CompressionOp.share(2), 2.0),
        ],
    )
    def test_ratio(self, op, ratio):
        assert np.isclose(op.ratio, ratio)

    def test_granularity(self):
        assert CompressionOp.prune(0.5, family="prune_row").granularity == AbstractType.ROW
        assert CompressionOp.quant(4).granularity == AbstractType.LAYER
        assert CompressionOp.quant(4, scope="row").granularity == AbstractType.ROW
        assert CompressionOp.share(2).granularity == AbstractType.LAYER

    def test_name(self):
        assert CompressionOp.quant(4, rotate=True).name == "quant_uniform(B=4,tensor,rot)"
        assert CompressionOp.prune(0.25, layers=[1]).name == "prune_layer(p=0.25)@[1]"

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            CompressionOp.prune(1.0)
        with pytest.raises(ValueError):
            CompressionOp.quant(1)
        with pytest.raises(ValueError):
            CompressionOp.quant(4.5)
        with pytest.raises(ValueError):
            CompressionOp.share(1)
        with pytest.raises(ValueError):
            CompressionOp(family="prune_row", fraction=0.5, rotate=True)
        with pytest.raises(NotImplementedError):
            CompressionOp(family="low_rank")
        with pytest.raises(NotImplementedError):
            CompressionOp.prune(0.5, family="prune_channel")


class TestPrune:
    def test_selects_lowest_scoring_units(self, model, prune_layer):
        compressed, mask, selection = apply_traced(prune_layer, model, model)
        assert len(selection) == 1
        assert mask.count() == 1 and not mask.absorbable
        pruned = selection[0].layer
        scores = [np.sum(e**2) for e in layer_errors(model, model.with_weights([np.zeros_like(w) for w in model.weights]))]
        assert pruned == int(np.argmin(scores))
        assert compressed.layers[pruned].fully_pruned
        assert np.array_equal(compressed.layers[pruned].weight, np.zeros((8, 8)))

    @pytest.mark.parametrize("family, p, k", [("prune_unstructured", 0.25, 64), ("prune_row", 0.3, 10), ("prune_layer", 0.5, 2)])
    def test_unit_count(self, model, family, p, k):
        _, mask = apply(CompressionOp.prune(p, family=family), model, model)
        assert mask.count() == k

    def test_selects_no_units(self, model):
        with pytest.raises(ValueError):
            apply(CompressionOp.prune(0.1, family="prune_layer"), model, model)

    def test_skips_already_pruned_units(self, model, prune_layer):
        result = run_pipeline([prune_layer, prune_layer], model)
        first, second = result.selections
        assert first[0] != second[0]
        assert sum(layer.fully_pruned for layer in result.model.layers) == 2

    def test_already_zero_units_rank_last(self, model):
        quantized, _ = apply(CompressionOp.quant(3), model, model)
        zeros_before = sum(int(np.sum(layer.weight == 0)) for layer in quantized.layers)
        assert zeros_before > 0
        pruned, mask = apply(CompressionOp.prune(0.25, family="prune_unstructured"), quantized, model)
        zeros_after = sum(int(np.sum(layer.weight == 0)) for layer in pruned.layers)
        assert mask.count() == 64
        assert zeros_after == zeros_before + 64

    def test_zero_rows_rank_last(self, model):
        weights = [w.copy() for w in model.weights]
        weights[0][:3] = 0.0
        m = model.with_weights(weights)
        _, _, selection = apply_traced(CompressionOp.prune(0.1, family="prune_row"), m, m)
        assert len(selection) == 3
        assert all(u.layer != 0 or u.row >= 3 for u in selection)

    def test_frozen_selection_replays(self, model):
        op = CompressionOp.prune(0.25, family="prune_unstructured")
        quantized, _ = apply(CompressionOp.quant(3), model, model)
        reference = run_pipeline([op], model)
        replayed = run_pipeline([op], quantized, model, selections=[reference.selections[0]])
        assert np.array_equal(
            [layer.pruned for layer in replayed.model.layers],
            [layer.pruned for layer in reference.model.layers],
        )

    def test_frozen_selection_level_mismatch(self, model, prune_layer):
        with pytest.raises(ValueError):
            apply(prune_layer, model, model, selection=(Unit(0, 0, level=AbstractType.ROW),))

    def test_layer_restriction(self, model):
        _, mask = apply(CompressionOp.prune(0.5, family="prune_row", layers=[2]), model, model)
        assert [int(v.sum()) for v in mask.values] == [0, 0, 4, 0]
        with pytest.raises(ValueError):
            apply(CompressionOp.prune(0.5, family="prune_row", layers=[9]), model, model)


class TestQuant:
    def test_every_layer_is_marked(self, model, quant4):
        compressed, mask = apply(quant4, model, model)
        assert mask.count() == model.n_layers
        assert all(layer.bits == 4 and layer.act_bits == 4 for layer in compressed.layers)

    def test_skips_fully_pruned_layers(self, model, quant4, prune_layer):
        result = run_pipeline([prune_layer, quant4], model)
        dead = result.selections[0][0].layer
        assert result.masks[1].count() == model.n_layers - 1
        assert result.model.layers[dead].bits == 16
        assert np.array_equal(result.model.layers[dead].weight, np.zeros((8, 8)))

    def test_keeps_pruned_entries_at_zero(self, model, quant4):
        result = run_pipeline([CompressionOp.prune(0.3, family="prune_unstructured"), quant4], model)
        for layer in result.model.layers:
            assert np.all(layer.weight[layer.pruned] == 0.0)

    def test_stochastic_rounding_is_seeded(self, model):
        op = CompressionOp.quant(3, rounding="stochastic")
        a, _ = apply(op, model, model)
        b, _ = apply(op, model, model)
        c, _ = apply(op.with_seed(1), model, model)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert not all(np.array_equal(x, y) for x, y in zip(a.weights, c.weights))

    def test_rotation_needs_power_of_two(self):
        m = build_synthetic_model([6, 6, 6], seed=0)
        with pytest.raises(ValueError):
            apply(CompressionOp.quant(4, rotate=True), m, m)

    def test_rejects_frozen_selection(self, model, quant4):
        with pytest.raises(ValueError):
            apply(quant4, model, model, selection=())


class TestShare:
    def test_groups_share_the_mean(self, model):
        compressed, mask = apply(CompressionOp.share(2), model, model)
        assert mask.count() == 4
        mean = (model.weights[0] + model.weights[1]) / 2
        assert np.allclose(compressed.weights[0], mean)
        assert np.array_equal(compressed.weights[0], compressed.weights[1])
        assert [layer.shared_group for layer in compressed.layers] == [0, 0, 1, 1]
        assert compression_ratio(model, compressed) == 2.0

    def test_needs_enough_layers(self, model):
        with pytest.raises(ValueError):
            apply(CompressionOp.share(8), model, model)

    def test_incompatible_shapes(self):
        m = build_synthetic_model([8, 4, 8], seed=0)
        with pytest.raises(ValueError):
            apply(CompressionOp.share(2), m, m)


def test_compression_ratio(model, quant4):
    assert compression_ratio(model, model) == 1.0
    result = run_pipeline([CompressionOp.prune(0.25, family="prune_unstructured"), quant4], model)
    assert np.isclose(compression_ratio(model, result.model), 16 / 3)


def test_pipeline_selections_length(model, quant4):
    with pytest.raises(ValueError):
        run_pipeline([quant4], model, selections=[None, None])
    assert run_pipeline([], model).model is model


class TestApplicationMask:
    def test_lift_and_refine(self, model):
        _, mask = apply(CompressionOp.prune(0.5, family="prune_row", layers=[1]), model, model)
        lifted = mask.at_level(AbstractType.LAYER)
        assert [int(v[0]) for v in lifted.values] == [0, 1, 0, 0]
        refined = lifted.at_level(AbstractType.ELEMENT)
        assert refined.count() == 64
        assert mask.at_level(AbstractType.ELEMENT).count() == 32
        with pytest.raises(ValueError):
            mask.at_level(AbstractType.MODEL)

    def test_absorption(self, model, quant4, prune_layer):
        result = run_pipeline([quant4, prune_layer], model)
        quant_mask, prune_mask = result.lifted_masks(AbstractType.LAYER)
        assert quant_mask.count() == model.n_layers - 1
        assert prune_mask.count() == 1

    def test_indicator(self, model):
        mask = ApplicationMask.empty(model, AbstractType.ROW)
        assert mask.indicator(Unit(0, 3, level=AbstractType.ROW)) == 0
        assert len(mask.as_dict()) == 32
        assert mask.modified_units() == []
        with pytest.raises(ValueError):
            mask.indicator(Unit(0, level=AbstractType.LAYER))


class TestQuantErrorStats:
    def test_statistics(self, model):
        stats = quant_error_stats(CompressionOp.quant(3, rounding="stochastic"), model, trials=8, seed=0)
        assert stats.trials == 8
        assert len(stats.mean) == model.n_layers
        assert stats.mean[0].shape == (8, 128)
        assert stats.variance > 0

    def test_zero_weights_have_no_error(self, model):
        m = model.with_weights([np.zeros_like(w) for w in model.weights])
        stats = quant_error_stats(CompressionOp.quant(3, rounding="stochastic"), m, trials=4, seed=0)
        assert all(np.array_equal(mu, np.zeros_like(mu)) for mu in stats.mean)
        assert stats.variance == 0.0

    def test_is_unbiased(self, model):
        stats = quant_error_stats(CompressionOp.quant(8, rounding="stochastic"), model, trials=200, seed=0)
        mean = np.concatenate([mu.ravel() for mu in stats.mean])
        var = np.concatenate([v.ravel() for v in stats.entry_variance])
        noisy = var > 0
        z = np.abs(mean[noisy]) / np.sqrt(var[noisy] / stats.trials)
        assert np.mean(z < 3.0) >= 0.99

    def test_variance_shrinks_with_bits(self, model):
        variances = [
            quant_error_stats(CompressionOp.quant(b, rounding="stochastic"), model, trials=16, seed=0).variance
            for b in (3, 6, 10, 15)
        ]
        assert all(a > b > 0 for a, b in zip(variances, variances[1:]))

    def test_rejects_nearest_rounding(self, model, quant4):
        with pytest.raises(ValueError):
            quant_error_stats(quant4, model, trials=4, seed=0)
        with pytest.raises(ValueError):
            quant_error_stats(CompressionOp.quant(3, rounding="stochastic"), model, trials=0, seed=0)


class TestRotationPruningError:
    def test_layer_pruning_is_rotation_invariant(self, model, prune_layer):
        error = rotation_pruning_error(model, prune_layer)
        assert error.element_wise == 0.0
        assert error.total < 1e-12

    def test_unstructured_pruning(self, model):
        error = rotation_pruning_error(model, CompressionOp.prune(0.2, family="prune_unstructured"))
        assert error.matrix_wise > 0
        assert error.element_wise >= 0
        assert error.total >= 0

    def test_row_matrix_wise_error_is_the_rotated_footprint(self, model):
        op = CompressionOp.prune(0.25, family="prune_row")
        _, _, selection = apply_traced(op, model, model)
        expected = 0.0
        for i, (w, x) in enumerate(zip(model.weights, forward_activations(model))):
            rows = [1.0 if Unit(i, r, level=AbstractType.ROW) in selection else 0.0 for r in range(w.shape[0])]
            p, h = np.diag(rows), hadamard(w.shape[0])
            expected += np.sum(((p - h.T @ p @ h) @ w @ x) ** 2)
        error = rotation_pruning_error(model, op)
        assert error.matrix_wise > 1e-6
        assert np.isclose(error.matrix_wise, expected, rtol=1e-9)

    def test_needs_pruning(self, model, quant4):
        with pytest.raises(ValueError):
            rotation_pruning_error(model, quant4)

    def test_rotate_model_densifies_pruned_layers(self, model):
        pruned, _ = apply(CompressionOp.prune(0.2, family="prune_unstructured"), model, model)
        rotated = rotate_model(pruned)
        assert not any(layer.pruned.any() for layer in rotated.layers)
