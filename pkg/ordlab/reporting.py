import json
import os
import platform
import tempfile
from pathlib import Path

import joblib
import numpy as np
import pandas as pd
import sklearn

from ordlab import __version__, logger
from ordlab.config import ExperimentConfig, config_hash

FLOAT_FORMAT = "%.9g"

report_columns = {
    "coa_grid": [
        "p", "B", "C_P", "C_Q", "CER_P", "CER_Q", "PG", "COA", "interference", "G1", "disjoint",
    ],
    "cer_curve": ["B", "C_Q", "performance", "envelope"],
    "theorem1": ["instance", "seed", "lhs", "rhs", "residual", "G1", "G2", "G3", "G4", "quant_to_prune"],
    "theorem2": ["B", "C_Q", "CER_P", "cer_diff", "coa_mean", "coa_se", "trials"],
    "violation": ["p", "k", "G1", "case", "COA", "consistent"],
    "multistage": ["p1", "p2", "score", "reverse_score", "advantage"],
    "mpq": ["avg_bits", "allocation", "progressive_score", "regressive_score", "COA", "disjoint"],
    "rotation_prune": ["family", "p", "matrix_wise", "element_wise", "total"],
    "plan": ["rank", "step", "CER", "cer_intermediate", "coa_next"],
    "share": ["p", "group_size", "M_prune_first", "M_share_first", "COA", "ratio_prune_first", "ratio_share_first"],
}


def make_report_df(kind: str, trials: int = 1, rotate: bool = False) -> pd.DataFrame:
    """
    Creates an empty dataframe to store the results of one experiment kind.

    Args:
        kind (str): experiment kind.
        trials (int): repetitions; a ``trial`` column is added when above one.
        rotate (bool): adds a ``rotate`` column for grid experiments with rotation.

    Returns:
        pd.DataFrame: empty dataframe with the report columns.
    """
    if kind not in report_columns:
        raise NotImplementedError(f"The experiment kind '{kind}' is not implemented.")
    columns = list(report_columns[kind])
    if rotate and "B" in columns:
        columns.insert(columns.index("B") + 1, "rotate")
    if trials > 1:
        columns.insert(0, "trial")
    return pd.DataFrame(columns=columns)


def update_report(report: pd.DataFrame, **values) -> list:
    """Row for ``report`` in column order; every column must be given."""
    missing = [c for c in report.columns if c not in values]
    if missing:
        raise KeyError(f"Missing report values for columns {missing}.")
    return [values[c] for c in report.columns]


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable.")


def _atomic_write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote {path}")
    return path


def format_csv(report: pd.DataFrame) -> str:
    return report.infer_objects().to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_csv(report: pd.DataFrame, path: str | Path) -> Path:
    """Write a report with 9 significant digits via a temporary file and rename."""
    return _atomic_write(Path(path), format_csv(report))


def write_json(document, path: str | Path) -> Path:
    text = json.dumps(document, indent=2, sort_keys=True, default=_json_default, allow_nan=False)
    return _atomic_write(Path(path), text + "\n")


def frame_records(report: pd.DataFrame) -> list[dict]:
    """Report rows as JSON-ready records; missing values become ``None``."""
    frame = report.infer_objects().astype(object)
    frame = frame.where(pd.notna(frame), None)
    return frame.to_dict(orient="records")


def make_manifest(config: ExperimentConfig, artifacts: list[str]) -> dict:
    """Everything needed to reproduce a run; contains no timestamps."""
    return {
        "kind": config.kind,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "artifacts": sorted(artifacts),
        "versions": {
            "ordlab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "scikit-learn": sklearn.__version__,
            "joblib": joblib.__version__,
        },
    }
