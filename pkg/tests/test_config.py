import json

import pytest
import yaml
from jsonschema import Draft7Validator

from ordlab.config import (
    CONFIG_SCHEMA,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    configurable,
    load_config,
)
from ordlab.models.model_builder import build_synthetic_model, make_metric


@configurable
def configurable_method(configurable_kwarg=1, **kwargs):
    msg = kwargs.get("msg", "default")
    return configurable_kwarg, msg


def test_config(tmp_path):
    assert configurable_method() == (1, "default")

    # config dict
    value, msg = configurable_method(config={"configurable_kwarg": 0, "unused": True})
    assert value == 0
    assert msg == "default"

    # explicit keywords win
    value, msg = configurable_method(configurable_kwarg=2, config={"configurable_kwarg": 0}, msg="test")
    assert value == 2
    assert msg == "test"


def test_configurable_library_functions(write_config):
    metric = make_metric(config={"metric_kind": "task_accuracy", "beta": 2.0})
    assert metric.kind == "task_accuracy" and metric.beta == 2.0
    assert make_metric(beta=3.0, config={"beta": 2.0}).beta == 3.0

    config = ExperimentConfig(kind="coa_grid", seed=4, dims=(4, 4, 4), n_samples=16)
    m = build_synthetic_model(config=config)
    assert m.dims == [4, 4, 4] and m.seed == 4

    path = write_config({"kind": "mpq", "seed": 1, "model": {"dims": [4, 2], "n_samples": 8}})
    m = build_synthetic_model(config=path)
    assert m.dims == [4, 2] and m.calib_input.shape == (4, 8)


def test_load_yaml(tmp_path):
    doc = {
        "kind": "plan",
        "seed": 3,
        "model": {"dims": [8, 8, 8]},
        "metric": {"kind": "synthetic_exact", "beta": 0.5},
        "operators": {"steps": [{"family": "quant_uniform", "bits": 4}, {"family": "share", "group_size": 2}]},
    }
    path = tmp_path / "plan.yaml"
    path.write_text(yaml.safe_dump(doc))
    config = load_config(path)
    assert config.kind == "plan"
    assert config.dims == (8, 8, 8)
    assert config.beta == 0.5
    assert config.steps[1] == {"family": "share", "group_size": 2}
    assert config.bits == ExperimentConfig(kind="plan", seed=0).bits


@pytest.mark.parametrize(
    "text, line",
    [
        ("kind: coa_grid\nseed: 0\noperators:\n  bits: [4, 40]\n", 4),
        ("kind: coa_grid\nseed: 0\nmodel:\n  dims: [8]\n", 4),
        ("kind: coa_grid\nseed: 0\nmodel:\n  depth: 3\n", 4),
        ("kind: coa_grid\nseed: 0\noperators:\n  prune_fractions: [0.1, 1.5]\n", 4),
        ("kind: pruning\nseed: 0\n", 1),
        ("kind: coa_grid\nseed: -1\n", 2),
        ("kind: coa_grid\nseed: 0\nmetric:\n  beta: 0\n", 4),
        ("kind: coa_grid\nseed: 0\noperators:\n  steps:\n    - {family: prune_layer, fraction: 2}\n", 5),
        ("kind: coa_grid\nseed: 0\noperators:\n  steps:\n    - {family: low_rank}\n", 5),
        ("kind: coa_grid\nseed: 0\nmodel:\n  dims: [8, 8]\nmetric:\n  kind: accuracy\n", 6),
        ("kind: theorem1\nseed: 0\nmodel:\n  dims: [8, 8, 8]\noperators:\n  prune_fractions: [0.1]\n", 6),
        ("kind: theorem1\nseed: 0\noperators:\n  prune_family: prune_row\n", 4),
        ("kind: theorem2\nseed: 0\nmetric:\n  kind: task_accuracy\n", 4),
        ("kind: plan\nseed: 0\noperators:\n  steps:\n    - family: quant_uniform\n      bits: 4\n    - family: prune_row\n", 7),
    ],
)
def test_errors_point_at_lines(tmp_path, text, line):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == line
    assert f"config.yaml:{line}:" in str(info.value)


def test_json_errors_point_at_lines(write_config):
    with pytest.raises(ConfigError) as info:
        load_config(write_config({"kind": "coa_grid", "seed": 0, "trials": 0}))
    assert info.value.line == 4
    assert "trials" in info.value.message


def test_parse_error(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("kind: coa_grid\nseed: [0\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line is not None


def test_missing_seed(write_config):
    with pytest.raises(ConfigError, match="seed"):
        load_config(write_config({"kind": "coa_grid"}))


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_boolean_is_not_an_integer():
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "coa_grid", "seed": True})


def test_round_trip_and_hash():
    config = config_from_dict(
        {"kind": "theorem2", "seed": 7, "operators": {"bits": [3, 4, 5], "prune_family": "prune_layer"}, "trials": 8}
    )
    assert config_from_dict(config.to_dict()) == config
    assert config_hash(config) == config_hash(config_from_dict(json.loads(json.dumps(config.to_dict()))))
    assert config_hash(config) != config_hash(config.replace(seed=8))
    assert config.replace(trials=2).trials == 2
    with pytest.raises(ConfigError):
        config.replace(unknown=1)


def test_kind_defaults():
    config = config_from_dict({"kind": "theorem1", "seed": 0})
    assert config.prune_family == "prune_layer"
    assert config.prune_fractions == (0.25,)
    explicit = config_from_dict({"kind": "theorem1", "seed": 0, "operators": {"prune_fractions": [0.5]}})
    assert explicit.prune_fractions == (0.5,)
    assert config_from_dict({"kind": "coa_grid", "seed": 0}).prune_family == "prune_unstructured"


def test_schema_is_draft7():
    Draft7Validator.check_schema(CONFIG_SCHEMA)
    validator = Draft7Validator(CONFIG_SCHEMA)
    assert validator.is_valid({"kind": "coa_grid", "seed": 0, "operators": {"steps": [{"family": "share", "group_size": 2}]}})
    assert not validator.is_valid({"kind": "coa_grid", "seed": -1})
    assert not validator.is_valid({"kind": "coa_grid", "seed": 0, "operators": {"avg_bits": [1.5]}})
    assert not validator.is_valid({"kind": "coa_grid", "seed": 0, "operators": {"steps": [{"family": "share", "size": 2}]}})


def test_schema_lists_every_kind():
    assert CONFIG_SCHEMA["required"] == ["kind", "seed"]
    assert "share" in CONFIG_SCHEMA["properties"]["kind"]["enum"]
