import json
import logging

import pytest

from ordlab import logger
from ordlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_ORACLE, EXIT_RUNTIME, main


@pytest.fixture(autouse=True)
def reset_logger():
    yield
    for handler in [h for h in logger.handlers if type(h) is logging.StreamHandler]:
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)


def theorem1_doc(tmp_path, **changes):
    doc = {
        "kind": "theorem1",
        "seed": 0,
        "model": {"dims": [8, 8, 8, 8, 8], "n_samples": 32},
        "operators": {"prune_fractions": [0.25], "prune_family": "prune_layer", "bits": [4]},
        "instances": 3,
        "output_dir": str(tmp_path / "results"),
    }
    doc.update(changes)
    return doc


def test_schema(capsys):
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert schema["required"] == ["kind", "seed"]


def test_validate(write_config, tmp_path, capsys):
    path = write_config(theorem1_doc(tmp_path))
    assert main(["validate", "--config", str(path)]) == EXIT_OK
    assert "valid theorem1 configuration" in capsys.readouterr().out


def test_invalid_config(write_config, tmp_path, capsys):
    path = write_config(theorem1_doc(tmp_path, instances=0))
    assert main(["validate", "--config", str(path)]) == EXIT_CONFIG
    assert "instances" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_invalid_jobs(write_config, tmp_path):
    path = write_config(theorem1_doc(tmp_path))
    assert main(["run", "--config", str(path), "--jobs", "0"]) == EXIT_CONFIG


def test_run(write_config, tmp_path, capsys):
    path = write_config(theorem1_doc(tmp_path))
    assert main(["run", "--config", str(path), "--jobs", "1"]) == EXIT_OK
    out_dir = tmp_path / "results"
    assert sorted(p.name for p in out_dir.iterdir()) == ["manifest.json", "report.csv", "report.json"]
    assert json.loads((out_dir / "report.json").read_text())["passed"] is True
    assert str(out_dir) in capsys.readouterr().out


def test_out_overrides_output_dir(write_config, tmp_path):
    path = write_config(theorem1_doc(tmp_path))
    assert main(["run", "--config", str(path), "--jobs", "1", "--out", str(tmp_path / "elsewhere")]) == EXIT_OK
    assert (tmp_path / "elsewhere" / "report.csv").exists()
    assert not (tmp_path / "results").exists()


def test_default_theorem1_runs(write_config, tmp_path):
    path = write_config({"kind": "theorem1", "seed": 0, "instances": 2, "output_dir": str(tmp_path / "results")})
    assert main(["run", "--config", str(path), "--jobs", "1"]) == EXIT_OK
    assert json.loads((tmp_path / "results" / "report.json").read_text())["passed"] is True


def test_overlapping_theorem1_pair_is_a_config_error(write_config, tmp_path, capsys):
    doc = theorem1_doc(tmp_path)
    doc["operators"]["prune_family"] = "prune_unstructured"
    path = write_config(doc)
    assert main(["run", "--config", str(path), "--jobs", "1"]) == EXIT_CONFIG
    assert "disjoint" in capsys.readouterr().err


def test_runtime_failure(write_config, tmp_path, capsys):
    doc = {
        "kind": "rotation_prune",
        "seed": 0,
        "model": {"dims": [8, 6, 8], "n_samples": 16},
        "operators": {"prune_fractions": [0.25]},
        "output_dir": str(tmp_path / "results"),
    }
    path = write_config(doc)
    assert main(["run", "--config", str(path), "--jobs", "1"]) == EXIT_RUNTIME
    assert "ValueError" in capsys.readouterr().err


def test_failed_acceptance_check(write_config, tmp_path):
    path = write_config(theorem1_doc(tmp_path, tolerance=0))
    assert main(["--verbose", "run", "--config", str(path), "--jobs", "1"]) == EXIT_ORACLE
    assert (tmp_path / "results" / "report.csv").exists()
