"""Monte-Carlo checks of the structural properties the solvers must satisfy.

Every check returns a CheckResult (name, statistic, threshold, passed) so the
CLI report and the tests consume the same objects.  Z-scores use a standard
error floor of SE_FLOOR: increments that vanish up to roundoff have no
sampling noise to compare against and count as exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .information import InformationModel
from .market import PathEnsemble

Z_LIMIT = 3.0
SE_FLOOR = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    statistic: float
    threshold: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "statistic": float(self.statistic),
            "threshold": float(self.threshold),
            "pass": bool(self.passed),
        }


def at_most(name: str, statistic: float, threshold: float) -> CheckResult:
    return CheckResult(name, float(statistic), float(threshold), bool(statistic <= threshold))


def at_least(name: str, statistic: float, threshold: float) -> CheckResult:
    return CheckResult(name, float(statistic), float(threshold), bool(statistic >= threshold))


def zscore(sample: np.ndarray) -> float:
    """Mean over the first axis divided by its standard error."""
    sample = np.asarray(sample, dtype=float)
    n = sample.shape[0]
    if n < 2:
        return 0.0
    se = sample.std(ddof=1) / np.sqrt(n)
    return float(sample.mean() / max(se, SE_FLOOR))


def zscores(samples: np.ndarray) -> np.ndarray:
    """Column-wise zscore of an (n, k) array."""
    n = samples.shape[0]
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    return samples.mean(axis=0) / np.maximum(se, SE_FLOOR)


def rms(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


# market


def martingale_zscores(ensemble: PathEnsemble) -> np.ndarray:
    """Per-step z-scores of the mean of dM."""
    return zscores(ensemble.dM)


def bracket_zscores(ensemble: PathEnsemble) -> np.ndarray:
    """Per-step z-scores of the mean of dM^2 - d<M>."""
    return zscores(ensemble.dM**2 - ensemble.d_bracket)


def structure_condition_error(ensemble: PathEnsemble) -> float:
    """max |S_{i+1} - (S_i + (dM_i + alpha_i d<M>_i))|; zero by construction."""
    S = ensemble.S
    rhs = S[:, :-1] + (ensemble.dM + ensemble.alpha * ensemble.d_bracket)
    return float(np.max(np.abs(S[:, 1:] - rhs)))


def market_checks(ensemble: PathEnsemble) -> list[CheckResult]:
    from .market import tradeoff_bound, tradeoff_process

    K = tradeoff_process(ensemble)
    dbr = ensemble.d_bracket
    C = ensemble.config.bracket_constant * ensemble.grid.dt
    return [
        at_most("market.martingale_increments", np.max(np.abs(martingale_zscores(ensemble))), Z_LIMIT),
        at_most("market.bracket_compensation", np.max(np.abs(bracket_zscores(ensemble))), Z_LIMIT),
        at_most("market.bracket_bound", float(np.max(dbr) - C), 1e-15),
        at_most("market.structure_condition", structure_condition_error(ensemble), 0.0),
        at_most("market.tradeoff_monotone", float(-np.min(np.diff(K, axis=1))), 0.0),
        at_most("market.tradeoff_bound", float(K[:, -1].max() - tradeoff_bound(ensemble)), 1e-12),
    ]


# orthogonality


def h_test_processes(ensemble: PathEnsemble, info: InformationModel) -> dict[str, np.ndarray]:
    """Bounded-moment H-predictable test integrands phi, each of shape (P, N)."""
    grid = ensemble.grid
    N = grid.n_steps
    s = np.array([info.state_step(grid, i) for i in range(N)])
    m = ensemble.M[:, s] - ensemble.config.m0
    scale = np.sqrt(max(ensemble.config.bracket_rate * grid.horizon, 1e-300))
    x = m / scale
    t = grid.times[:-1]
    return {
        "constant": np.ones_like(x),
        "lagged_M": x,
        "lagged_M_sq": x * x,
        "lagged_M_cube": x**3,
        "indicator_lagged_M_pos": (x > 0).astype(float),
        "indicator_lagged_M_large": (np.abs(x) > 0.5).astype(float),
        "first_half": np.broadcast_to((t < grid.horizon / 2).astype(float), x.shape),
        "cos_lagged_M": np.cos(2.0 * x),
    }


def orthogonality_zscores(
    ensemble: PathEnsemble, info: InformationModel, dO: np.ndarray
) -> dict[str, float]:
    """z-scores of E[O_T sum_i phi_i dM_i] over the phi battery."""
    O_T = np.asarray(dO).sum(axis=1)
    out = {}
    for name, phi in h_test_processes(ensemble, info).items():
        out[name] = zscore(O_T * np.sum(phi * ensemble.dM, axis=1))
    return out


def orthogonality_check(
    ensemble: PathEnsemble, info: InformationModel, dO: np.ndarray, prefix: str
) -> CheckResult:
    z = orthogonality_zscores(ensemble, info, dO)
    return at_most(f"{prefix}.weak_orthogonality", max(abs(v) for v in z.values()), Z_LIMIT)


# conditional means given F


def f_test_functions(ensemble: PathEnsemble, step: int) -> np.ndarray:
    """Test functions h(X_i) of the full state, shape (P, k).

    Residuals fitted in-sample are orthogonal to the regression basis, so
    the constant has no power; the bounded indicators and x^4 probe
    directions outside the span of low-degree polynomials.
    """
    m = ensemble.M[:, step]
    mu, sd = m.mean(), m.std()
    x = (m - mu) / sd if sd > 0 else np.zeros_like(m)
    cols = [
        np.ones_like(m),
        np.sign(x),
        (np.abs(x) > 1.0).astype(float),
        x**4,
    ]
    return np.column_stack(cols)


def conditional_mean_zscores(ensemble: PathEnsemble, increments: np.ndarray) -> np.ndarray:
    """(N, k) z-scores of E[h(X_i) dX_i] for the F-test functions h."""
    increments = np.asarray(increments, dtype=float)
    N = increments.shape[1]
    out = []
    for i in range(N):
        h = f_test_functions(ensemble, i)
        out.append(zscores(h * increments[:, i : i + 1]))
    return np.array(out)


def martingale_increment_check(
    ensemble: PathEnsemble, increments: np.ndarray, name: str
) -> CheckResult:
    z = conditional_mean_zscores(ensemble, increments)
    return at_most(name, float(np.max(np.abs(z))), Z_LIMIT)
