"""GKW and Föllmer-Schweizer decompositions under full or delayed information.

Both are read off BSDE solutions: GKW is the zero-driver solution, FS the
solution with driver f(t, y, z) = -alpha_t z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BsdeSolution, Claim, Driver, picard_step, solve_bsde_partial
from .information import InformationModel
from .market import PathEnsemble, tradeoff_bound, tradeoff_process


@dataclass(frozen=True, eq=False)
class Decomposition:
    """xi = U0 + sum_i integrand_i * dX_i + sum_i dA_i with X = M (GKW) or S (FS).

    ``value`` holds the levels U0 + sum_{j<i}(integrand dX + dA), built
    backwards from xi so that value_i = (value_{i+1} - integrand_i dX_i) - dA_i
    holds bitwise and value_0 = U0.
    """

    kind: str
    info: InformationModel
    U0: float
    integrand: np.ndarray
    dA: np.ndarray
    value: np.ndarray
    solution: BsdeSolution

    @property
    def A(self) -> np.ndarray:
        out = np.zeros(self.value.shape)
        np.cumsum(self.dA, axis=1, out=out[:, 1:])
        return out

    def integrator(self, ensemble: PathEnsemble) -> np.ndarray:
        return ensemble.dM if self.kind == "GKW" else ensemble.dS

    def reconstruction_error(self, ensemble: PathEnsemble) -> float:
        """max |R_0 - U0| for R_N = xi, R_i = (R_{i+1} - integrand_i dX_i) - dA_i."""
        dX = self.integrator(ensemble)
        R = self.solution.xi
        for i in range(dX.shape[1] - 1, -1, -1):
            R = (R - self.integrand[:, i] * dX[:, i]) - self.dA[:, i]
        return float(np.max(np.abs(R - self.U0)))

    def forward_sum(self, ensemble: PathEnsemble) -> np.ndarray:
        """Left-to-right partial sums U0 + sum_{j<i} (integrand_j dX_j + dA_j)."""
        dX = self.integrator(ensemble)
        P, N = dX.shape
        R = np.empty((P, N + 1))
        R[:, 0] = self.U0
        for i in range(N):
            R[:, i + 1] = (R[:, i] + self.integrand[:, i] * dX[:, i]) + self.dA[:, i]
        return R

    def forward_error(self, ensemble: PathEnsemble) -> float:
        return float(np.max(np.abs(self.forward_sum(ensemble)[:, -1] - self.solution.xi)))

    def roundoff_bound(self, ensemble: PathEnsemble) -> float:
        """Floating-point bound for the forward sum: 4 (N + 2) eps times
        the largest per-path sum of absolute terms."""
        dX = self.integrator(ensemble)
        scale = (
            abs(self.U0)
            + np.sum(np.abs(self.integrand * dX), axis=1)
            + np.sum(np.abs(self.dA), axis=1)
            + np.abs(self.solution.xi)
        )
        N = dX.shape[1]
        return float(4 * (N + 2) * np.finfo(float).eps * scale.max())


def _land_on(s: np.ndarray, target: float) -> np.ndarray:
    """d with s - d == target bitwise where a nearby double allows it."""
    d = s - target
    miss = (s - d) != target
    for _ in range(4):
        if not miss.any():
            break
        for direction in (np.inf, -np.inf):
            trial = np.nextafter(d, direction)
            hit = miss & ((s - trial) == target)
            d = np.where(hit, trial, d)
            miss &= ~hit
    return d


def _build(kind, info, ensemble, sol: BsdeSolution, U0: float) -> Decomposition:
    dX = ensemble.dM if kind == "GKW" else ensemble.dS
    Z = sol.Z
    P, N = Z.shape
    level = np.empty((P, N + 1))
    dA = np.empty((P, N))
    level[:, N] = sol.xi
    for i in range(N - 1, -1, -1):
        s = level[:, i + 1] - Z[:, i] * dX[:, i]
        dA[:, i] = _land_on(s, U0) if i == 0 else s - sol.Y[:, i]
        level[:, i] = s - dA[:, i]
    dA.setflags(write=False)
    level.setflags(write=False)
    return Decomposition(kind, info, U0, Z, dA, level, sol)


def gkw_decompose(ensemble: PathEnsemble, info: InformationModel, claim: Claim,
                  scheme: str = "joint") -> Decomposition:
    """xi = U0 + sum H dM + A_T with H at the information level and A weakly
    orthogonal to M.

    U0 is the step-0 regression value: the sample mean of xi corrected by
    the martingale control sum H_0 dM_0, which keeps dA_0 centred in-sample.
    """
    sol = picard_step(ensemble, info, Driver.zero(), claim, scheme=scheme)
    U0 = float(np.mean(sol.Y[:, 0]))
    return _build("GKW", info, ensemble, sol, U0)


def fs_decompose(
    ensemble: PathEnsemble,
    info: InformationModel,
    claim: Claim,
    tol: float = 1e-3,
    max_iter: int = 20,
    scheme: str = "joint",
) -> Decomposition:
    """xi = U0 + sum beta dS + A_T through the BSDE with driver -alpha z."""
    K = tradeoff_process(ensemble)
    bound = tradeoff_bound(ensemble)
    if K[:, -1].max() > bound * (1 + 1e-12) + 1e-15:
        raise ValueError(
            f"mean-variance tradeoff {K[:, -1].max():.6g} exceeds K^2 C T = {bound:.6g}"
        )
    alpha = ensemble.config.alpha
    driver = Driver.follmer_schweizer(alpha.declared_bound, alpha.is_deterministic)
    sol = solve_bsde_partial(ensemble, info, driver, claim, tol, max_iter, scheme)
    U0 = float(np.mean(sol.Y[:, 0]))
    return _build("FS", info, ensemble, sol, U0)
