from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LinearRegression

from ordlab import logger

MAX_ITERATIONS = 200
STEP_TOLERANCE = 1e-10


@dataclass(frozen=True)
class TrendFit:
    """Least-squares fit of ``y = a * exp(b * x) + c``."""

    a: float
    b: float
    c: float
    rmse: float
    points: tuple[tuple[float, float], ...]
    converged: bool = True
    iterations: int = 0

    def predict(self, x) -> np.ndarray:
        return self.a * np.exp(self.b * np.asarray(x, dtype=float)) + self.c

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "rmse": self.rmse,
            "converged": self.converged,
            "iterations": self.iterations,
            "points": [list(p) for p in self.points],
        }


def _model(theta, x):
    a, b, c = theta
    with np.errstate(over="ignore", invalid="ignore"):
        return a * np.exp(b * x) + c


def _loss(theta, x, y) -> float:
    r = _model(theta, x) - y
    value = float(r @ r)
    return value if np.isfinite(value) else np.inf


def _initial_guess(x, y, c0, sign) -> np.ndarray | None:
    z = sign * (y - c0)
    keep = z > 0
    if keep.sum() < 2 or np.ptp(x[keep]) == 0:
        return None
    reg = LinearRegression().fit(x[keep, None], np.log(z[keep]))
    return np.array([sign * np.exp(reg.intercept_), reg.coef_[0], c0])


def _gauss_newton(theta, x, y):
    loss = _loss(theta, x, y)
    for iteration in range(1, MAX_ITERATIONS + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.exp(theta[1] * x)
        jacobian = np.column_stack([e, theta[0] * x * e, np.ones_like(x)])
        residual = _model(theta, x) - y
        if not np.all(np.isfinite(jacobian)):
            return theta, loss, False, iteration
        step = np.linalg.lstsq(jacobian, -residual, rcond=None)[0]
        if np.linalg.norm(step) < STEP_TOLERANCE:
            return theta, loss, True, iteration
        scale = 1.0
        while scale > 1e-12:
            candidate = theta + scale * step
            candidate_loss = _loss(candidate, x, y)
            if candidate_loss < loss:
                break
            scale /= 2
        else:
            return theta, loss, False, iteration
        theta, loss = candidate, candidate_loss
        if np.linalg.norm(scale * step) < STEP_TOLERANCE:
            return theta, loss, True, iteration
    return theta, loss, False, MAX_ITERATIONS


def fit_exponential(points) -> TrendFit:
    """
    Fit ``y = a * exp(b * x) + c`` by damped Gauss-Newton with step halving.

    Two starts are tried, one below the data (``c0 = min y``) and one above it
    (``c0 = max y``, decreasing-magnitude branch); ``a`` and ``b`` come from a linear
    regression of ``log|y - c0|`` on ``x``. The start with the lower final error wins.

    Args:
        points (Sequence[tuple[float, float]]): at least 4 finite ``(x, y)`` pairs.

    Returns:
        TrendFit: the fitted parameters and RMSE. ``converged`` is False when the
        iteration budget ran out or no descent step was found; the best iterate is kept.

    Raises:
        ValueError: for fewer than 4 points or non-finite values.

    Example:
        >>> xs = [0, 1, 2, 3, 4]
        >>> fit = fit_exponential([(x, 2 * np.exp(0.5 * x) + 1) for x in xs])
        >>> round(fit.b, 6)
        0.5
    """
    pts = tuple((float(px), float(py)) for px, py in points)
    if len(pts) < 4:
        raise ValueError(f"fit_exponential needs at least 4 points, got {len(pts)}.")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("fit_exponential needs finite points.")
    if np.ptp(y) == 0:
        return TrendFit(0.0, 0.0, float(y[0]), 0.0, pts, True, 0)

    best = None
    for c0, sign in ((y.min(), 1.0), (y.max(), -1.0)):
        start = _initial_guess(x, y, c0, sign)
        if start is None:
            continue
        theta, loss, converged, iterations = _gauss_newton(start, x, y)
        if best is None or loss < best[1]:
            best = (theta, loss, converged, iterations)
    if best is None:
        raise ValueError("fit_exponential needs at least two distinct x values.")
    theta, loss, converged, iterations = best
    if not converged:
        logger.warning(f"Exponential fit did not converge after {iterations} iterations")
    rmse = float(np.sqrt(loss / len(x)))
    return TrendFit(float(theta[0]), float(theta[1]), float(theta[2]), rmse, pts, converged, iterations)
