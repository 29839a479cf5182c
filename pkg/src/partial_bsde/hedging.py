"""Locally risk-minimizing hedging under delayed information.

Strategies hold theta (H-predictable) units of S over (t_i, t_{i+1}] and the
rest in the riskless asset.  Value, cost and remaining-risk processes follow
the usual quadratic-hedging definitions; the optimal strategy is read off the
FS decomposition.  Also here: the minimal martingale measure density and
price, and the local-risk quotient used to falsify non-optimal strategies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bsde import Claim, _sweep
from .decomposition import Decomposition, fs_decompose
from .information import InformationModel, cond_expect, joint_fit
from .market import PathEnsemble

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Strategy:
    """Psi = (theta, eta) with value V = theta S + eta and cost C.

    theta has shape (P, N): theta_i is held over (t_i, t_{i+1}].  eta, V and C
    have shape (P, N + 1); eta_N carries theta_{N-1} into T.
    """

    theta: np.ndarray
    eta: np.ndarray
    value: np.ndarray
    cost: np.ndarray
    gains: np.ndarray
    info: InformationModel
    xi: np.ndarray

    @property
    def d_cost(self) -> np.ndarray:
        return np.diff(self.cost, axis=1)

    def replication_error(self) -> float:
        return float(np.max(np.abs(self.value[:, -1] - self.xi)))

    def cost_identity_error(self) -> float:
        return float(np.max(np.abs(self.cost - (self.value - self.gains))))


def _gains(theta: np.ndarray, dS: np.ndarray) -> np.ndarray:
    G = np.zeros((theta.shape[0], theta.shape[1] + 1))
    np.cumsum(theta * dS, axis=1, out=G[:, 1:])
    return G


def _strategy(ensemble, info, theta, value, xi) -> Strategy:
    theta = np.array(theta, dtype=float)
    value = np.array(value, dtype=float)
    G = _gains(theta, ensemble.dS)
    cost = value - G
    hold = np.concatenate([theta, theta[:, -1:]], axis=1)
    eta = value - hold * ensemble.S
    for a in (theta, value, G, cost, eta):
        a.setflags(write=False)
    return Strategy(theta, eta, value, cost, G, info, np.asarray(xi))


def optimal_strategy(
    ensemble: PathEnsemble,
    info: InformationModel,
    claim: Claim,
    tol: float = 1e-3,
    max_iter: int = 20,
    scheme: str = "joint",
    decomposition: Decomposition | None = None,
) -> Strategy:
    """theta = beta (the FS integrand), V = Y; C = V - int theta dS = Y0 + O."""
    dec = decomposition or fs_decompose(ensemble, info, claim, tol, max_iter, scheme)
    if dec.kind != "FS":
        raise ValueError("optimal_strategy needs an FS decomposition")
    sol = dec.solution
    return _strategy(ensemble, info, sol.Z, sol.Y, sol.xi)


def mean_self_financing_strategy(
    ensemble: PathEnsemble,
    info: InformationModel,
    claim: Claim,
    theta: np.ndarray,
) -> Strategy:
    """The mean-self-financing strategy with risky holding ``theta``.

    V_i = E[xi - sum_{j>=i} theta_j dS_j | F_i], so the cost is an F-martingale;
    only the drift part theta alpha d<M> survives the conditioning.
    """
    P, N = ensemble.dM.shape
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (P, N):
        raise ValueError(f"theta must have shape {(P, N)}")
    xi = claim.evaluate(ensemble)
    g = -theta * ensemble.alpha * ensemble.d_bracket
    L = info.lag_steps(ensemble.grid)
    j = np.arange(N)
    known_at = np.maximum(j - L, 0) if ensemble.config.alpha.is_deterministic else j
    full = info.as_full()
    V, _, _ = _sweep(ensemble, xi, g, known_at, lambda i, t: joint_fit(ensemble, i, full, t))
    return _strategy(ensemble, info, theta, V, xi)


def cost_process(strategy: Strategy) -> np.ndarray:
    """C_i = V_i - sum_{j<i} theta_j dS_j."""
    return strategy.cost


@dataclass(frozen=True)
class RiskProcess:
    values: np.ndarray
    clipped: int
    min_raw: float


def risk_process(strategy: Strategy, ensemble: PathEnsemble, info: InformationModel) -> RiskProcess:
    """R^H_i = E[(C_N - C_i)^2 | H_i], clipped at 0."""
    C = strategy.cost
    P, N1 = C.shape
    R = np.zeros((P, N1))
    clipped = 0
    lowest = 0.0
    for i in range(N1 - 1):
        raw = cond_expect(ensemble, i, info, (C[:, -1] - C[:, i]) ** 2).values
        neg = raw < 0
        clipped += int(neg.sum())
        lowest = min(lowest, float(raw.min()))
        R[:, i] = np.where(neg, 0.0, raw)
    if clipped:
        log.info("risk process: %d negative regression values clipped", clipped)
    R.setflags(write=False)
    return RiskProcess(R, clipped, lowest)


@dataclass(frozen=True)
class RiskQuotient:
    """Per-cell local-risk quotients for one perturbation."""

    cells: tuple[tuple[int, int], ...]
    values: np.ndarray
    se: np.ndarray
    skipped: np.ndarray

    @property
    def pooled_se(self) -> float:
        ok = ~self.skipped
        return float(np.sqrt(np.mean(self.se[ok] ** 2))) if ok.any() else 0.0

    @property
    def min_value(self) -> float:
        ok = ~self.skipped
        return float(self.values[ok].min()) if ok.any() else 0.0


def _check_partition(partition, n_steps: int) -> tuple[int, ...]:
    p = tuple(int(x) for x in partition)
    if len(p) < 2 or any(b <= a for a, b in zip(p, p[1:])) or p[0] < 0 or p[-1] > n_steps:
        raise ValueError("partition must be a strictly increasing sub-grid of 0..N")
    return p


def _check_perturbation(delta, P: int, N: int) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if delta.shape == (P, N + 1):
        if np.any(delta[:, -1] != 0):
            raise ValueError("perturbation must vanish at T")
        delta = delta[:, :-1]
    if delta.shape != (P, N):
        raise ValueError(f"perturbation must have shape {(P, N)}")
    if not np.all(np.isfinite(delta)):
        raise ValueError("perturbation must be bounded")
    return delta


def _conditional_cell_sum(ensemble, g, a, b, lag, deterministic, full):
    """E[sum_{a<=k<b} g_k | F_a] by backward F-projections with known parts."""
    k = np.arange(a, b)
    known_at = np.maximum(k - lag, a) if deterministic else k
    local = g[:, a:b]
    rest = np.zeros(ensemble.n_paths)
    for i in range(b - 1, a - 1, -1):
        target = rest + local[:, known_at == i + 1].sum(axis=1)
        rest = cond_expect(ensemble, i, full, target).values
    return rest + local[:, known_at == a].sum(axis=1)


def risk_quotient(
    strategy: Strategy,
    ensemble: PathEnsemble,
    info: InformationModel,
    delta: np.ndarray,
    partition,
    eps: float = 1e-12,
) -> RiskQuotient:
    """[R^H_a(theta + delta 1_cell) - R^H_a(theta)] / E[<M>_b - <M>_a | H_a] per cell (a, b].

    The perturbed cost over [a, N] is (C_N - C_a) - X with
    X = sum_cell delta dS - E[sum_cell delta dS | F_a], so the numerator is
    E[X^2 - 2 (C_N - C_a) X | H_a].  The reported value is its path average
    divided by the bracket estimate; se is the matching standard error.
    Cells where delta vanishes or the bracket estimate is below ``eps`` are
    marked skipped.
    """
    P, N = ensemble.dM.shape
    cells = _check_partition(partition, N)
    delta = _check_perturbation(delta, P, N)
    C = strategy.cost
    dS = ensemble.dS
    drift = delta * ensemble.alpha * ensemble.d_bracket
    lag = info.lag_steps(ensemble.grid)
    det = ensemble.config.alpha.is_deterministic
    pairs = tuple(zip(cells, cells[1:]))
    vals = np.zeros(len(pairs))
    ses = np.zeros(len(pairs))
    skipped = np.zeros(len(pairs), dtype=bool)
    for c, (a, b) in enumerate(pairs):
        if not np.any(delta[:, a:b]):
            skipped[c] = True
            continue
        den = cond_expect(ensemble, a, info, ensemble.d_bracket[:, a:b].sum(axis=1)).values
        if np.any(np.abs(den) <= eps):
            skipped[c] = True
            continue
        X = (delta[:, a:b] * dS[:, a:b]).sum(axis=1)
        if np.any(drift[:, a:b]):
            X = X - _conditional_cell_sum(ensemble, drift, a, b, lag, det, info.as_full())
        A = C[:, -1] - C[:, a]
        D = X * X - 2.0 * A * X
        q = D / den
        vals[c] = float(q.mean())
        ses[c] = float(q.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return RiskQuotient(pairs, vals, ses, skipped)


def perturbation_battery(
    ensemble: PathEnsemble, info: InformationModel, partition, scale: float = 1.0
) -> dict[str, np.ndarray]:
    """Bounded H-predictable test perturbations: constant, sign of lagged M,
    and single-cell bumps on the first, middle and last partition cells."""
    P, N = ensemble.dM.shape
    cells = _check_partition(partition, N)
    L = info.lag_steps(ensemble.grid)
    lagged = np.stack([ensemble.M[:, max(i - L, 0)] for i in range(N)], axis=1)
    out = {
        "constant": np.full((P, N), scale),
        "sign_lagged_M": scale * np.where(lagged >= ensemble.config.m0, 1.0, -1.0),
    }
    n_cells = len(cells) - 1
    for k in sorted({0, n_cells // 2, n_cells - 1}):
        bump = np.zeros((P, N))
        bump[:, cells[k]:cells[k + 1]] = scale
        out[f"bump_cell_{k}"] = bump
    return out


@dataclass(frozen=True)
class MmmWeights:
    density: np.ndarray
    valid: np.ndarray

    @property
    def n_invalid(self) -> int:
        return int((~self.valid).sum())


def mmm_density(ensemble: PathEnsemble, max_invalid_fraction: float = 0.0) -> MmmWeights:
    """Discrete stochastic exponential L_{i+1} = L_i (1 - alpha_i dM_i).

    Paths with a non-positive factor are invalid; more than
    ``max_invalid_fraction`` of them aborts.
    """
    factors = 1.0 - ensemble.alpha * ensemble.dM
    valid = np.all(factors > 0, axis=1)
    frac = 1.0 - valid.mean()
    if frac > max_invalid_fraction:
        raise ValueError(
            f"1 - alpha dM <= 0 on {int((~valid).sum())} of {valid.size} paths; "
            "the minimal martingale measure is not equivalent"
        )
    L = np.ones(ensemble.M.shape)
    np.cumprod(factors, axis=1, out=L[:, 1:])
    L.setflags(write=False)
    return MmmWeights(L, valid)


def mmm_price(
    ensemble: PathEnsemble,
    claim: Claim,
    step: int | None = None,
    weights: MmmWeights | None = None,
    info: InformationModel | None = None,
) -> np.ndarray:
    """E*[xi | F_i] = E[(L_N / L_i) xi | F_i] / E[L_N / L_i | F_i].

    Full information only.  ``step=None`` returns every step, shape (P, N+1).
    """
    if info is not None and not info.is_full:
        raise ValueError("the minimal-martingale-measure price is a full-information object")
    info = info or InformationModel.full()
    if weights is None:
        mmm_density(ensemble)
    xi = claim.evaluate(ensemble)
    P, N = ensemble.dM.shape
    factors = 1.0 - ensemble.alpha * ensemble.dM
    # forward density ratios L_N / L_i, accumulated from the end
    ratio = np.ones((P, N + 1))
    for i in range(N - 1, -1, -1):
        ratio[:, i] = ratio[:, i + 1] * factors[:, i]
    steps = range(N + 1) if step is None else [step]
    out = np.empty((P, len(steps)))
    for c, i in enumerate(steps):
        if i == N:
            out[:, c] = xi
            continue
        num = cond_expect(ensemble, i, info, ratio[:, i] * xi).values
        den = cond_expect(ensemble, i, info, ratio[:, i]).values
        if np.any(den <= 0):
            raise FloatingPointError(f"non-positive density estimate at step {i}")
        out[:, c] = num / den
    return out if step is None else out[:, 0]
