"""Information structures and regression-based conditional expectations.

Two filtrations live on the grid: the full one F (state X_i at step i) and
the investor's H.  Delayed information H_t = F_{(t - tau)+} is represented
by the lagged state X_{(i - L)+} with L = tau / dt.  Conditional
expectations are least-squares projections onto a total-degree polynomial
basis of the (standardized, de-duplicated) state.
"""

from __future__ import annotations

import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .market import PathEnsemble

log = logging.getLogger(__name__)

# Gram matrices whose eigenvalue spread exceeds this get a small ridge.
COND_LIMIT = 1e12
RIDGE_SCALE = 1e-8
BASIS_CACHE_BYTES = 256 * 2**20


@dataclass(frozen=True)
class InformationModel:
    kind: str = "full"
    tau: float = 0.0
    basis_degree: int = 3
    state_columns: tuple[str, ...] | None = None
    basis_knots: int = 0

    def __post_init__(self):
        if self.kind not in ("full", "delayed"):
            raise ValueError(f"unknown information kind {self.kind!r}")
        if self.kind == "full" and self.tau != 0:
            raise ValueError("full information has tau = 0")
        if self.kind == "delayed" and not self.tau > 0:
            raise ValueError(f"delayed information needs tau > 0, got {self.tau}")
        if int(self.basis_degree) != self.basis_degree or self.basis_degree < 1:
            raise ValueError("basis_degree must be an integer >= 1")
        if int(self.basis_knots) != self.basis_knots or self.basis_knots < 0:
            raise ValueError("basis_knots must be an integer >= 0")

    @classmethod
    def full(cls, basis_degree: int = 3, basis_knots: int = 0) -> "InformationModel":
        return cls("full", 0.0, basis_degree, basis_knots=basis_knots)

    @classmethod
    def delayed(cls, tau: float, basis_degree: int = 3, basis_knots: int = 0) -> "InformationModel":
        return cls("delayed", float(tau), basis_degree, basis_knots=basis_knots)

    @property
    def is_full(self) -> bool:
        return self.kind == "full"

    def as_full(self) -> "InformationModel":
        return InformationModel("full", 0.0, self.basis_degree, self.state_columns, self.basis_knots)

    def lag_steps(self, grid) -> int:
        if self.is_full:
            return 0
        if self.tau >= grid.horizon:
            raise ValueError(f"tau = {self.tau} must be smaller than T = {grid.horizon}")
        return grid.steps_in(self.tau)

    def state_step(self, grid, step: int) -> int:
        """Index of the F-state generating H at ``step``."""
        return max(step - self.lag_steps(grid), 0)


@dataclass(frozen=True)
class ConditionalEstimate:
    values: np.ndarray
    step: int
    state_step: int
    basis_size: int
    residual_rms: float
    ridge: float


class _StateBasis:
    """Polynomial basis in the standardized state at one grid index.

    A column taking only v distinct values contributes powers up to v - 1;
    higher powers are exact linear combinations of the lower ones.  With
    ``knots`` > 0, hinge terms (z - q)+ at empirical quantiles of the lead
    column are appended so kinked conditional expectations can be fitted.
    """

    def __init__(self, X: np.ndarray, degree: int, knots: int = 0):
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        keep = []
        caps = []
        q = []  # orthonormal directions of kept standardized columns
        for c in range(X.shape[1]):
            if not sd[c] > 1e-10 * (1.0 + abs(mu[c])):
                continue
            v = (X[:, c] - mu[c]) / sd[c]
            r = v.copy()
            for u in q:
                r -= (u @ v) * u
            nr = np.linalg.norm(r)
            if nr <= 1e-6 * np.linalg.norm(v):
                continue
            keep.append(c)
            q.append(r / nr)
            caps.append(_distinct_cap(X[:, c], degree))
        self.columns = keep
        self.mu = mu[keep]
        self.sd = sd[keep]
        d = len(keep)
        self.exponents = [()]
        for k in range(1, degree + 1 if d else 1):
            for e in itertools.combinations_with_replacement(range(d), k):
                if all(e.count(c) <= caps[c] for c in set(e)):
                    self.exponents.append(e)
        self.knots = np.empty(0)
        if knots and d:
            z0 = (X[:, keep[0]] - self.mu[0]) / self.sd[0]
            qs = np.quantile(z0, np.arange(1, knots + 1) / (knots + 1))
            self.knots = np.unique(qs)
        self.values = self.evaluate(X)

    @property
    def size(self) -> int:
        return len(self.exponents) + len(self.knots)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        Z = (X[:, self.columns] - self.mu) / self.sd
        B = np.empty((X.shape[0], self.size))
        B[:, 0] = 1.0
        lookup = {(): 0}
        for k, e in enumerate(self.exponents[1:], start=1):
            B[:, k] = B[:, lookup[e[:-1]]] * Z[:, e[-1]]
            lookup[e] = k
        n = len(self.exponents)
        for j, kt in enumerate(self.knots):
            B[:, n + j] = np.maximum(Z[:, 0] - kt, 0.0)
        return B


def _distinct_cap(col: np.ndarray, degree: int) -> int:
    """Number of distinct values minus one, capped at ``degree``."""
    u = np.unique(col)
    return min(degree, len(u) - 1)


def _solve_normal(G: np.ndarray) -> tuple[np.ndarray, float]:
    """Return a (possibly ridged) Gram matrix and the ridge used.

    The ridge is relative to each diagonal entry, i.e. a uniform ridge on
    unit-norm columns, so large high-power columns do not swamp the rest.
    Column 0 is the intercept and is not penalized, so constants are still
    reproduced exactly.
    """
    d = np.sqrt(np.diag(G))
    d[d == 0] = 1.0
    ev = np.linalg.eigvalsh(G / np.outer(d, d))
    if ev[0] > ev[-1] / COND_LIMIT:
        return G, 0.0
    pen = d * d
    pen[0] = 0.0
    return G + RIDGE_SCALE * np.diag(pen), float(RIDGE_SCALE)


@dataclass(frozen=True)
class JointFit:
    """target = mean + integrand * dM + residual, fitted at one step."""

    mean: np.ndarray
    integrand: np.ndarray
    residual: np.ndarray
    ridge: float


class Projector:
    """Caches bases and Gram matrices for one ensemble and basis choice."""

    def __init__(self, ensemble: PathEnsemble, degree: int, columns, knots: int = 0):
        self.ensemble = ensemble
        self.degree = degree
        self.knots = knots
        self.columns = columns
        self._bases: OrderedDict[int, _StateBasis] = OrderedDict()
        self._bytes = 0
        self._gram: dict = {}

    def basis(self, step: int) -> _StateBasis:
        b = self._bases.get(step)
        if b is not None:
            self._bases.move_to_end(step)
            return b
        b = _StateBasis(self.ensemble.state(step, self.columns), self.degree, self.knots)
        self._bases[step] = b
        self._bytes += b.values.nbytes
        while self._bytes > BASIS_CACHE_BYTES and len(self._bases) > 2:
            _, old = self._bases.popitem(last=False)
            self._bytes -= old.values.nbytes
        return b

    def project(self, step: int, target: np.ndarray) -> tuple[np.ndarray, float, float]:
        """Least-squares fit of ``target`` on the basis at ``step``."""
        B = self.basis(step).values
        P = B.shape[0]
        key = ("F", step)
        if key not in self._gram:
            self._gram[key] = _solve_normal(B.T @ B / P)
        G, lam = self._gram[key]
        coef = np.linalg.solve(G, B.T @ target / P)
        fitted = B @ coef
        return fitted, lam, B.shape[1]

    def joint(self, step: int, h_step: int, target: np.ndarray) -> JointFit:
        """Fit target ~ b_F(X_step) + b_H(X_h_step) * dM_step."""
        dM = self.ensemble.dM[:, step]
        BF = self.basis(step).values
        P = BF.shape[0]
        if not np.any(dM):
            mean, lam, _ = self.project(step, target)
            return JointFit(mean, np.zeros(P), target - mean, lam)
        BH = self.basis(h_step).values * dM[:, None]
        B = np.concatenate([BF, BH], axis=1)
        key = ("J", step, h_step)
        if key not in self._gram:
            self._gram[key] = _solve_normal(B.T @ B / P)
        G, lam = self._gram[key]
        coef = np.linalg.solve(G, B.T @ target / P)
        kF = BF.shape[1]
        mean = BF @ coef[:kF]
        z = self.basis(h_step).values @ coef[kF:]
        return JointFit(mean, z, target - mean - z * dM, lam)


def projector(ensemble: PathEnsemble, info: InformationModel) -> Projector:
    key = ("projector", info.basis_degree, info.state_columns, info.basis_knots)
    p = ensemble._cache.get(key)
    if p is None:
        p = Projector(ensemble, info.basis_degree, info.state_columns, info.basis_knots)
        ensemble._cache[key] = p
    return p


def cond_expect(
    ensemble: PathEnsemble, step: int, info: InformationModel, target: np.ndarray
) -> ConditionalEstimate:
    """Regression estimate of E[target | H_step] (F_step under full info)."""
    target = np.asarray(target, dtype=float)
    P = ensemble.n_paths
    if target.shape[0] != P:
        raise ValueError(f"target has {target.shape[0]} rows, ensemble has {P} paths")
    if not np.all(np.isfinite(target)):
        raise ValueError("target contains non-finite values")
    if not 0 <= step <= ensemble.n_steps:
        raise IndexError(f"step {step} outside 0..{ensemble.n_steps}")
    s = info.state_step(ensemble.grid, step)
    fitted, lam, k = projector(ensemble, info).project(s, target)
    if lam:
        log.debug("ridge %.3g used at state step %d", lam, s)
    rms = float(np.sqrt(np.mean((target - fitted) ** 2)))
    return ConditionalEstimate(fitted, step, s, k, rms, lam)


def joint_fit(
    ensemble: PathEnsemble, step: int, info: InformationModel, target: np.ndarray
) -> JointFit:
    """Split ``target`` (known at step+1) into an F_step-measurable part,
    an H_step-measurable multiple of dM_step and a residual orthogonal to both."""
    h = info.state_step(ensemble.grid, step)
    return projector(ensemble, info).joint(step, h, np.asarray(target, dtype=float))


@dataclass(frozen=True)
class DualProjection:
    values: np.ndarray
    null_cells: np.ndarray
    max_ridge: float


def _ratio_step(ensemble, step, info, num_col, den_col, eps):
    P = ensemble.n_paths
    num = cond_expect(ensemble, step, info, num_col)
    ridge = num.ridge
    if np.all(den_col == den_col[0]):
        den = np.full(P, den_col[0])
    else:
        est = cond_expect(ensemble, step, info, den_col)
        den = est.values
        ridge = max(ridge, est.ridge)
    small = np.abs(den) <= eps
    values = np.where(small, 0.0, num.values / np.where(small, 1.0, den))
    return values, small, ridge


def ratio_fit(
    ensemble: PathEnsemble,
    step: int,
    info: InformationModel,
    target: np.ndarray,
    eps: float = 1e-12,
) -> JointFit:
    """Two-stage split of ``target``: F-projection for the mean, then the
    H-density of the one-step covariation with M against the bracket."""
    target = np.asarray(target, dtype=float)
    mean = cond_expect(ensemble, step, info.as_full(), target)
    dM = ensemble.dM[:, step]
    z, _, ridge = _ratio_step(
        ensemble, step, info, (target - mean.values) * dM, ensemble.d_bracket[:, step], eps
    )
    residual = target - mean.values - z * dM
    return JointFit(mean.values, z, residual, max(ridge, mean.ridge))


def dual_project(
    ensemble: PathEnsemble,
    info: InformationModel,
    numerator: np.ndarray,
    denominator: np.ndarray | None = None,
    eps: float = 1e-12,
) -> DualProjection:
    """Per-step ratio E[numerator_i | H_i] / E[denominator_i | H_i].

    ``numerator`` holds increments of an increasing (or finite-variation)
    process, ``denominator`` those of <M> (default).  Cells with a
    vanishing denominator are set to zero and flagged.
    """
    numerator = np.asarray(numerator, dtype=float)
    if denominator is None:
        denominator = ensemble.d_bracket
    denominator = np.asarray(denominator, dtype=float)
    P, N = ensemble.dM.shape
    if numerator.shape != (P, N) or denominator.shape != (P, N):
        raise ValueError("numerator and denominator must have shape (n_paths, n_steps)")
    out = np.zeros((P, N))
    null = np.zeros((P, N), dtype=bool)
    ridge = 0.0
    if np.any(denominator < 0):
        raise ValueError("denominator increments must be >= 0")
    for i in range(N):
        out[:, i], null[:, i], r = _ratio_step(
            ensemble, i, info, numerator[:, i], denominator[:, i], eps
        )
        ridge = max(ridge, r)
    if null.any():
        log.info("dual projection: %d null cells set to zero", int(null.sum()))
    return DualProjection(out, null, ridge)
