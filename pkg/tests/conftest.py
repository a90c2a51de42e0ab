import json

import pytest

from ordlab.models.compressors import CompressionOp
from ordlab.models.model_builder import Metric, build_synthetic_model
from ordlab.models.theory import find_order_flip, separate_layer_scores

DIMS = [8, 8, 8, 8, 8]


@pytest.fixture()
def model():
    return build_synthetic_model(DIMS, seed=0)


@pytest.fixture()
def other_model():
    return build_synthetic_model(DIMS, seed=1)


@pytest.fixture()
def metric():
    return Metric()


@pytest.fixture()
def accuracy_metric():
    return Metric(kind="task_accuracy")


@pytest.fixture()
def quant4():
    return CompressionOp.quant(4)


@pytest.fixture()
def prune_layer():
    # one of four layers
    return CompressionOp.prune(0.25, family="prune_layer")


@pytest.fixture()
def separated_model(model):
    """Layer scores 1, 10, 100, 1000: pruning picks the same layers under any order."""
    return separate_layer_scores(model, spread=10.0)


@pytest.fixture()
def flip_model(quant4):
    """Quantizing first changes which single layer layer-pruning removes."""
    m, _ = find_order_flip(DIMS, quant4, seeds=range(50))
    return m


@pytest.fixture()
def chain_model(quant4):
    """Layer 0 is always pruned first; the next pruning slot flips with the order."""
    m, _ = find_order_flip(DIMS, quant4, seeds=range(50), below=(0,))
    return m


@pytest.fixture()
def write_config(tmp_path):
    def _write(doc: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc, indent=2))
        return path

    return _write
