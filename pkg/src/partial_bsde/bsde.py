"""BSDE solvers under full and partial (delayed) information.

The equation on the grid is

    Y_i = Y_{i+1} + f(t_i, Y_i, Z_i) d<M>_i - Z_i dM_i - dO_i,   Y_N = xi,

with Z measurable at the information level and O an F-martingale weakly
orthogonal to M with respect to H-predictable integrands.  O is defined
as the pathwise residual, so the recursion holds exactly and orthogonality
is what the statistical checks test.

Backward sweeps split every conditional expectation into a regression part
and a part already known at the current step: a driver increment
g_j = f(...) d<M>_j is known at step m_j = (j - L)+ when it depends only on
an H-measurable Z and deterministic coefficients, and at m_j = j otherwise.
Known parts are added outside the regression, which keeps the Markov
regression exact for delayed information.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .information import (
    InformationModel,
    JointFit,
    cond_expect,
    dual_project,
    joint_fit,
    ratio_fit,
)
from .market import Grid, PathEnsemble

log = logging.getLogger(__name__)

SCHEMES = ("joint", "ratio")
MAX_BLOCKS = 128


@dataclass(frozen=True)
class DriverContext:
    step: int
    alpha: np.ndarray


@dataclass(frozen=True)
class Driver:
    """f(t, y, z) of the BSDE, with the declared constants it is checked against.

    ``func(t, y, z, ctx)`` receives per-path arrays and a DriverContext
    carrying the step index and the per-path alpha of the structure condition.
    """

    func: Callable[[float, np.ndarray, np.ndarray, DriverContext], np.ndarray]
    lipschitz: float
    depends_on_y: bool = True
    depends_on_z: bool = True
    random_coefficients: bool = False
    growth: float | None = None
    name: str = "custom"

    def __post_init__(self):
        if not (math.isfinite(self.lipschitz) and self.lipschitz >= 0):
            raise ValueError("lipschitz constant must be finite and >= 0")

    def __call__(self, t: float, y, z, ctx: DriverContext) -> np.ndarray:
        out = np.asarray(self.func(t, y, z, ctx), dtype=float)
        return np.broadcast_to(out, np.shape(ctx.alpha)).copy()

    @property
    def is_constant(self) -> bool:
        return not (self.depends_on_y or self.depends_on_z)

    # factories

    @classmethod
    def zero(cls) -> "Driver":
        return cls(lambda t, y, z, c: 0.0, 0.0, False, False, growth=0.0, name="zero")

    @classmethod
    def constant(cls, c: float) -> "Driver":
        c = float(c)
        return cls(lambda t, y, z, ctx: c, 0.0, False, False, growth=c * c, name="constant")

    @classmethod
    def discount(cls, rate: float) -> "Driver":
        """f = -r y."""
        r = float(rate)
        return cls(lambda t, y, z, c: -r * y, abs(r), True, False, name="discount")

    @classmethod
    def linear(cls, a: float, b: float, c: float = 0.0) -> "Driver":
        """f = a y + b z + c."""
        a, b, c = float(a), float(b), float(c)
        return cls(
            lambda t, y, z, ctx: a * y + b * z + c,
            max(abs(a), abs(b)),
            a != 0.0,
            b != 0.0,
            growth=None if a else 2 * max(b * b, c * c),
            name="linear",
        )

    @classmethod
    def lipschitz_z(cls, scale: float) -> "Driver":
        """f = scale * sin(z): bounded, z-only, sublinear growth."""
        k = float(scale)
        return cls(
            lambda t, y, z, c: k * np.sin(z), abs(k), False, True, growth=k * k, name="sin_z"
        )

    @classmethod
    def follmer_schweizer(cls, alpha_bound: float, deterministic_alpha: bool) -> "Driver":
        """f = -alpha z, whose solution is the FS decomposition."""
        return cls(
            lambda t, y, z, ctx: -ctx.alpha * z,
            float(alpha_bound),
            False,
            True,
            random_coefficients=not deterministic_alpha,
            growth=float(alpha_bound) ** 2,
            name="follmer_schweizer",
        )

    # declared-property checks

    def lipschitz_ratio(self, seed: int = 0, n: int = 4096, alpha_bound: float = 1.0) -> float:
        """Largest |f(y,z) - f(y',z')| / (|y-y'| + |z-z'|) on random pairs."""
        rng = np.random.default_rng(seed)
        y1, y2, z1, z2 = rng.normal(0.0, 5.0, (4, n))
        ctx = DriverContext(0, rng.uniform(-alpha_bound, alpha_bound, n))
        num = np.abs(self(0.0, y1, z1, ctx) - self(0.0, y2, z2, ctx))
        den = np.abs(y1 - y2) + np.abs(z1 - z2)
        return float(np.max(num / den))

    def check_lipschitz(self, alpha_bound: float = 1.0) -> None:
        ratio = self.lipschitz_ratio(alpha_bound=alpha_bound)
        if ratio > self.lipschitz * (1 + 1e-9) + 1e-12:
            raise ValueError(
                f"driver {self.name!r}: observed Lipschitz ratio {ratio:.4g} exceeds "
                f"declared K = {self.lipschitz}"
            )

    def check_growth(self, alpha_bound: float = 1.0, seed: int = 1, n: int = 4096) -> None:
        if self.depends_on_y:
            raise ValueError(f"driver {self.name!r} depends on y; a z-only driver is required")
        if self.growth is None:
            raise ValueError(f"driver {self.name!r} declares no growth constant")
        rng = np.random.default_rng(seed)
        z = rng.normal(0.0, 10.0, n)
        ctx = DriverContext(0, rng.uniform(-alpha_bound, alpha_bound, n))
        f = self(0.0, np.zeros(n), z, ctx)
        if np.any(f * f > self.growth * (1 + z * z) * (1 + 1e-9)):
            raise ValueError(f"driver {self.name!r} violates |f|^2 <= C (1 + z^2)")

    def integrability(self, ensemble: PathEnsemble) -> float:
        """Empirical E[sum_i f(t_i, 0, 0)^2 d<M>_i]."""
        P, N = ensemble.dM.shape
        total = np.zeros(P)
        t = ensemble.grid.times
        zero = np.zeros(P)
        for i in range(N):
            f0 = self(t[i], zero, zero, DriverContext(i, ensemble.alpha[:, i]))
            total += f0 * f0 * ensemble.d_bracket[:, i]
        value = float(total.mean())
        if not math.isfinite(value):
            raise ValueError(f"driver {self.name!r}: f(t, 0, 0) is not square-integrable")
        return value


@dataclass(frozen=True)
class Claim:
    """Terminal condition xi as a function of the ensemble's terminal state."""

    name: str
    payoff: Callable[[PathEnsemble], np.ndarray] = field(compare=False)
    params: tuple = ()

    def evaluate(self, ensemble: PathEnsemble) -> np.ndarray:
        xi = np.array(self.payoff(ensemble), dtype=float)
        if xi.shape != (ensemble.n_paths,):
            raise ValueError(f"claim {self.name!r} returned shape {xi.shape}")
        if not np.all(np.isfinite(xi)):
            raise ValueError(f"claim {self.name!r} is not finite on every path")
        return xi

    def second_moment(self, ensemble: PathEnsemble) -> float:
        xi = self.evaluate(ensemble)
        return float(np.mean(xi * xi))

    @staticmethod
    def _terminal(underlying: str):
        if underlying == "S":
            return lambda e: e.S[:, -1]
        if underlying == "M":
            return lambda e: e.M[:, -1]
        if underlying == "W":
            return lambda e: e.dW.sum(axis=1)
        raise ValueError(f"unknown underlying {underlying!r}; use S, M or W")

    @classmethod
    def constant(cls, c: float) -> "Claim":
        c = float(c)
        return cls("constant", lambda e: np.full(e.n_paths, c), (c,))

    @classmethod
    def identity(cls, underlying: str = "S") -> "Claim":
        x = cls._terminal(underlying)
        return cls("identity", x, (underlying,))

    @classmethod
    def power(cls, exponent: float, underlying: str = "M") -> "Claim":
        x = cls._terminal(underlying)
        p = float(exponent)
        return cls("power", lambda e: x(e) ** p, (p, underlying))

    @classmethod
    def call(cls, strike: float, underlying: str = "S") -> "Claim":
        x = cls._terminal(underlying)
        k = float(strike)
        return cls("call", lambda e: np.maximum(x(e) - k, 0.0), (k, underlying))

    @classmethod
    def put(cls, strike: float, underlying: str = "S") -> "Claim":
        x = cls._terminal(underlying)
        k = float(strike)
        return cls("put", lambda e: np.maximum(k - x(e), 0.0), (k, underlying))


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """(Y, Z, O) on the grid.  ``g`` holds the driver increments f(...) d<M>
    that the stored recursion uses, so the pathwise identity can be re-checked."""

    Y: np.ndarray
    Z: np.ndarray
    dO: np.ndarray
    g: np.ndarray
    xi: np.ndarray
    info: InformationModel
    driver_name: str = "zero"
    driver_depends_on_z: bool = False
    scheme: str = "joint"
    iterations: int = 1
    converged: bool = True
    pnorm_history: tuple[float, ...] = ()
    ratio_history: tuple[float, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def O(self) -> np.ndarray:
        out = np.zeros(self.Y.shape)
        np.cumsum(self.dO, axis=1, out=out[:, 1:])
        return out

    def recursion_residual(self, ensemble: PathEnsemble) -> np.ndarray:
        rhs = self.Y[:, 1:] + self.g - self.Z * ensemble.dM - self.dO
        return self.Y[:, :-1] - rhs

    def recursion_error(self, ensemble: PathEnsemble) -> float:
        return float(np.max(np.abs(self.recursion_residual(ensemble))))

    def terminal_error(self) -> float:
        return float(np.max(np.abs(self.Y[:, -1] - self.xi)))


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _close_recursion(xi, g, Z, dM, Y_pre):
    """Turn a swept Y into an exact solution of the stored recursion.

    dO is the pathwise residual against Y_pre; Y is then rebuilt backwards
    from xi with the same floating-point operations the identity check uses.
    """
    P, N = Z.shape
    dO = (Y_pre[:, 1:] + g - Z * dM) - Y_pre[:, :-1]
    Y = np.empty((P, N + 1))
    Y[:, N] = xi
    for i in range(N - 1, -1, -1):
        Y[:, i] = Y[:, i + 1] + g[:, i] - Z[:, i] * dM[:, i] - dO[:, i]
    return Y, dO


def _known_steps(driver: Driver, lag: int, n_steps: int) -> np.ndarray:
    j = np.arange(n_steps)
    if driver.depends_on_y or driver.random_coefficients:
        return j
    return np.maximum(j - lag, 0)


def _known_sum(g: np.ndarray, known_at: np.ndarray, i: int) -> np.ndarray:
    """sum of g_j over j >= i already known at step i."""
    j = np.arange(g.shape[1])
    cols = np.nonzero((j >= i) & (known_at <= i))[0]
    return g[:, cols].sum(axis=1)


def _fitter(ensemble, info, scheme):
    if scheme == "joint":
        return lambda i, target: joint_fit(ensemble, i, info, target)
    if scheme == "ratio":
        return lambda i, target: ratio_fit(ensemble, i, info, target)
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def _sweep(ensemble, xi, g, known_at, fit: Callable[[int, np.ndarray], JointFit]):
    """Backward induction Y_i = E[xi + sum_{j>=i} g_j | F_i] with Z from ``fit``."""
    P, N = g.shape
    new_known = np.zeros((P, N + 1))
    for j in range(N):
        new_known[:, known_at[j]] += g[:, j]
    Y = np.empty((P, N + 1))
    Z = np.empty((P, N))
    Y[:, N] = xi
    rest = xi
    ridge = 0.0
    for i in range(N - 1, -1, -1):
        res = fit(i, rest + new_known[:, i + 1])
        rest = res.mean
        Z[:, i] = res.integrand
        Y[:, i] = rest + _known_sum(g, known_at, i)
        ridge = max(ridge, res.ridge)
        if not (np.all(np.isfinite(Y[:, i])) and np.all(np.isfinite(Z[:, i]))):
            raise FloatingPointError(f"non-finite solution at step {i}")
    return Y, Z, ridge


def _driver_increments(ensemble, driver, U, V):
    P, N = ensemble.dM.shape
    t = ensemble.grid.times
    g = np.empty((P, N))
    for i in range(N):
        f = driver(t[i], U[:, i], V[:, i], DriverContext(i, ensemble.alpha[:, i]))
        g[:, i] = f * ensemble.d_bracket[:, i]
    if not np.all(np.isfinite(g)):
        bad = int(np.argmax(~np.all(np.isfinite(g), axis=0)))
        raise FloatingPointError(f"driver {driver.name!r} is non-finite at step {bad}")
    return g


def picard_step(
    ensemble: PathEnsemble,
    info: InformationModel,
    driver: Driver,
    claim: Claim | np.ndarray,
    prev: tuple[np.ndarray, np.ndarray] | None = None,
    scheme: str = "joint",
) -> BsdeSolution:
    """One application of the frozen-driver map (U, V) -> (Y, Z, O).

    Y_i = E[xi + sum_{j>=i} f(t_j, U_j, V_j) d<M>_j | F_i]; Z and O come
    from the partial-information GKW split of each one-step target.
    """
    xi = claim.evaluate(ensemble) if isinstance(claim, Claim) else np.asarray(claim, float)
    P, N = ensemble.dM.shape
    if prev is None:
        U, V = np.zeros((P, N + 1)), np.zeros((P, N))
    else:
        U, V = prev
        if U.shape != (P, N + 1) or V.shape != (P, N):
            raise ValueError("prev must be (U, V) with shapes (P, N+1) and (P, N)")
    g = _driver_increments(ensemble, driver, U, V)
    known_at = _known_steps(driver, info.lag_steps(ensemble.grid), N)
    Y_pre, Z, ridge = _sweep(ensemble, xi, g, known_at, _fitter(ensemble, info, scheme))
    Y, dO = _close_recursion(xi, g, Z, ensemble.dM, Y_pre)
    _freeze(Y, Z, dO, g)
    return BsdeSolution(
        Y, Z, dO, g, xi, info, driver.name, driver.depends_on_z, scheme,
        diagnostics={"max_ridge": ridge},
    )


@dataclass(frozen=True)
class SolutionDelta:
    Y: np.ndarray
    Z: np.ndarray
    dO: np.ndarray
    d_bracket: np.ndarray


def solution_delta(a: BsdeSolution, b: BsdeSolution | None, ensemble: PathEnsemble) -> SolutionDelta:
    if b is None:
        return SolutionDelta(a.Y, a.Z, a.dO, ensemble.d_bracket)
    return SolutionDelta(a.Y - b.Y, a.Z - b.Z, a.dO - b.dO, ensemble.d_bracket)


def block_count(horizon: float, lipschitz_K: float, rho) -> int:
    """m-hat = floor(T / r0) + 1 with 42 K^2 max(rho(r0)^2, rho(r0)) = 1/6.

    ``rho`` is a nondecreasing function or a constant C (meaning rho(r) = C r).
    """
    if lipschitz_K == 0:
        return 1
    rho_fn = rho if callable(rho) else (lambda r, c=float(rho): c * r)

    def c(r):
        p = rho_fn(r)
        return 42.0 * lipschitz_K**2 * max(p * p, p)

    if c(horizon) <= 1.0 / 6.0:
        return 1
    lo, hi = 0.0, horizon
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if c(mid) <= 1.0 / 6.0:
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise ValueError("no r0 > 0 satisfies the block condition")
    return int(math.floor(horizon / lo)) + 1


def _block_index(grid: Grid, m_hat: int) -> np.ndarray:
    """Block of each step's left endpoint; blocks are [kT/m, (k+1)T/m)."""
    k = np.floor(grid.times[:-1] * m_hat / grid.horizon + 1e-9).astype(int)
    return np.minimum(k, m_hat - 1)


def classical_norm(delta: SolutionDelta) -> float:
    """E[max_i |dY_i|^2] + E[sum |dZ|^2 d<M>] + E[sum (d dO)^2]."""
    return float(
        np.mean(np.max(delta.Y**2, axis=1))
        + np.mean(np.sum(delta.Z**2 * delta.d_bracket, axis=1))
        + np.mean(np.sum(delta.dO**2, axis=1))
    )


def p_norm(delta: SolutionDelta, grid: Grid, lipschitz_K: float, rho) -> float:
    """Weighted block norm sum_k 210^k E[sup_{I_k}|dY|^2 + sum_{I_k}(...)] (squared)."""
    m_hat = block_count(grid.horizon, lipschitz_K, rho)
    if m_hat > MAX_BLOCKS:
        raise OverflowError(
            f"{m_hat} blocks: weights 210^(m-1) overflow; reduce K or the horizon"
        )
    blk = _block_index(grid, m_hat)
    t = grid.times
    total = 0.0
    for k in range(m_hat):
        lo, hi = k * grid.horizon / m_hat, (k + 1) * grid.horizon / m_hat
        pts = np.nonzero((t >= lo - 1e-12) & (t <= hi + 1e-12))[0]
        steps = np.nonzero(blk == k)[0]
        term = 0.0
        if pts.size:
            term += float(np.mean(np.max(delta.Y[:, pts] ** 2, axis=1)))
        if steps.size:
            term += float(np.mean(np.sum(delta.Z[:, steps] ** 2 * delta.d_bracket[:, steps], axis=1)))
            term += float(np.mean(np.sum(delta.dO[:, steps] ** 2, axis=1)))
        total += 210.0**k * term
    return total


def _finalize(ensemble, driver, sol: BsdeSolution, **meta) -> BsdeSolution:
    """Re-evaluate the driver at the solution's own (Y, Z) and close the recursion."""
    g = _driver_increments(ensemble, driver, sol.Y, sol.Z)
    Y, dO = _close_recursion(sol.xi, g, sol.Z, ensemble.dM, sol.Y)
    _freeze(Y, dO, g)
    return BsdeSolution(
        Y, sol.Z, dO, g, sol.xi, sol.info, driver.name, driver.depends_on_z, sol.scheme,
        diagnostics=dict(sol.diagnostics), **meta,
    )


def solve_bsde_partial(
    ensemble: PathEnsemble,
    info: InformationModel,
    driver: Driver,
    claim: Claim,
    tol: float = 1e-3,
    max_iter: int = 20,
    scheme: str = "joint",
) -> BsdeSolution:
    """Picard iteration from (U, V) = (0, 0) until the relative p-norm of
    successive deltas drops below ``tol``.

    The p-norm weights grow like 210^k over the blocks, so with many blocks
    it barely sees the early part of the horizon; the relative classical
    norm of the delta must also be below ``tol``.  Non-convergence returns
    the last iterate with ``converged=False``.

    Regressions use the current state X_i only.  Under delayed information
    a driver that depends on both y and z makes Y_i a function of the
    whole lag window of the path, which that basis cannot represent; the
    orthogonality battery flags the resulting bias at desk scale.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    driver.check_lipschitz(ensemble.config.alpha.declared_bound)
    driver.integrability(ensemble)
    xi = claim.evaluate(ensemble)
    rho = ensemble.config.bracket_constant
    K = driver.lipschitz
    grid = ensemble.grid

    prev: BsdeSolution | None = None
    norms: list[float] = []
    ratios: list[float] = []
    classical: list[float] = []
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        frozen = None if prev is None else (prev.Y, prev.Z)
        sol = picard_step(ensemble, info, driver, xi, frozen, scheme)
        delta = solution_delta(sol, prev, ensemble)
        d = math.sqrt(p_norm(delta, grid, K, rho))
        dc = math.sqrt(classical_norm(delta))
        classical.append(dc)
        if norms:
            ratios.append(d / norms[-1] if norms[-1] > 0 else 0.0)
        norms.append(d)
        log.debug("picard %d: |delta|_p = %.4g", k, d)
        prev = sol
        if driver.is_constant:
            converged = True
            break
        if k >= 2:
            whole = solution_delta(sol, None, ensemble)
            size = math.sqrt(p_norm(whole, grid, K, rho))
            size_c = math.sqrt(classical_norm(whole))
            if d <= tol * max(size, 1e-300) and dc <= tol * max(size_c, 1e-300):
                converged = True
                break
    if not converged:
        log.warning("Picard iteration did not converge in %d iterations", max_iter)
    out = _finalize(
        ensemble, driver, prev,
        iterations=k, converged=converged,
        pnorm_history=tuple(norms), ratio_history=tuple(ratios),
    )
    out.diagnostics["m_hat"] = block_count(grid.horizon, K, rho)
    out.diagnostics["classical_history"] = tuple(classical)
    return out


def solve_bsde_full(
    ensemble: PathEnsemble,
    driver: Driver,
    claim: Claim,
    basis_degree: int = 3,
    info: InformationModel | None = None,
) -> BsdeSolution:
    """Explicit one-pass scheme under full information.

    Yhat_i = E[Y_{i+1} | F_i], Z_i = E[(Y_{i+1} - Yhat_i) dM_i | F_i] / d<M>_i,
    Y_i = Yhat_i + f(t_i, Yhat_i, Z_i) d<M>_i.  No Picard loop and no known-part
    bookkeeping, so it serves as an independent route for cross-checks.
    When ``info`` is given its basis settings are used and basis_degree is
    ignored.
    """
    info = info.as_full() if info is not None else InformationModel.full(basis_degree)
    xi = claim.evaluate(ensemble)
    P, N = ensemble.dM.shape
    t = ensemble.grid.times
    Y = np.empty((P, N + 1))
    Z = np.empty((P, N))
    g = np.empty((P, N))
    Y[:, N] = xi
    for i in range(N - 1, -1, -1):
        fit = ratio_fit(ensemble, i, info, Y[:, i + 1])
        Z[:, i] = fit.integrand
        f = driver(t[i], fit.mean, fit.integrand, DriverContext(i, ensemble.alpha[:, i]))
        g[:, i] = f * ensemble.d_bracket[:, i]
        Y[:, i] = fit.mean + g[:, i]
        if not np.all(np.isfinite(Y[:, i])):
            raise FloatingPointError(f"non-finite solution at step {i}")
    Yc, dO = _close_recursion(xi, g, Z, ensemble.dM, Y)
    _freeze(Yc, Z, dO, g)
    return BsdeSolution(Yc, Z, dO, g, xi, info, driver.name, driver.depends_on_z, "explicit")


def reduce_full_to_partial(
    full_solution: BsdeSolution, ensemble: PathEnsemble, info: InformationModel
) -> BsdeSolution:
    """(Y, Z, O) = (Y~, Zhat, O~ + B) with Zhat the H-dual-projection density of
    Z~ against <M> and dB = (Z~ - Zhat) dM."""
    P, N = ensemble.dM.shape
    if full_solution.Z.shape != (P, N) or full_solution.Y.shape != (P, N + 1):
        raise ValueError("full solution does not live on this ensemble's grid")
    if not full_solution.info.is_full:
        raise ValueError("reduce_full_to_partial expects a full-information solution")
    if full_solution.driver_depends_on_z:
        raise NotImplementedError(
            "z-dependent drivers couple Zhat into the full equation; use "
            "solve_bsde_partial or solve_bsde_delayed_blocks"
        )
    Zt = full_solution.Z
    dbr = ensemble.d_bracket
    proj = dual_project(ensemble, info, Zt * dbr, dbr)
    Zh = proj.values
    norm_h = float(np.mean(np.sum(Zh**2 * dbr, axis=1)))
    norm_t = float(np.mean(np.sum(Zt**2 * dbr, axis=1)))
    if norm_h > norm_t * (1 + 1e-9) + 1e-15:
        raise RuntimeError(f"projected integrand norm {norm_h:.6g} exceeds {norm_t:.6g}")
    Y, dO = _close_recursion(full_solution.xi, full_solution.g, Zh, ensemble.dM, full_solution.Y)
    Zh = Zh.copy()
    _freeze(Y, Zh, dO)
    diag = dict(full_solution.diagnostics)
    diag.update(z_norm_full=norm_t, z_norm_projected=norm_h, null_cells=int(proj.null_cells.sum()))
    return BsdeSolution(
        Y, Zh, dO, full_solution.g, full_solution.xi, info,
        full_solution.driver_name, False, full_solution.scheme,
        full_solution.iterations, full_solution.converged,
        full_solution.pnorm_history, full_solution.ratio_history, diag,
    )


def solve_bsde_delayed_blocks(
    ensemble: PathEnsemble,
    info: InformationModel,
    driver: Driver,
    claim: Claim,
) -> BsdeSolution:
    """Block-by-block solver for delayed information and a z-only driver.

    On each block [(j-1) tau, j tau], taken backwards, the terminal value is
    the solution at j tau; the full-information GKW split gives Z~, the driver
    is evaluated at the H-projection pZ~, and Z = pZ~.  Because the bracket is
    deterministic, pZ~ is the regression of Z~ on the lagged state.  Driver
    increments on a block are known at the block's left end, so they enter
    the earlier blocks as known terms.
    """
    if info.is_full:
        raise ValueError("the block solver needs delayed information")
    grid = ensemble.grid
    L = info.lag_steps(grid)
    N = grid.n_steps
    n_blocks = round(grid.horizon / info.tau)
    if abs(n_blocks * info.tau - grid.horizon) > 1e-9 * grid.horizon or N % L:
        raise ValueError(f"T = {grid.horizon} is not an integer multiple of tau = {info.tau}")
    if driver.random_coefficients:
        raise ValueError("the block solver needs deterministic driver coefficients")
    driver.check_growth(ensemble.config.alpha.declared_bound)
    driver.integrability(ensemble)

    xi = claim.evaluate(ensemble)
    P = ensemble.n_paths
    full = info.as_full()
    t = grid.times
    known_at = np.maximum(np.arange(N) - L, 0)
    g = np.zeros((P, N))
    Zt = np.empty((P, N))
    Zp = np.empty((P, N))
    rest_mean = np.empty((P, N + 1))
    rest_mean[:, N] = xi
    new_known = np.zeros((P, N + 1))
    rest = xi
    zero = np.zeros(P)
    for b in range(n_blocks, 0, -1):
        a, e = (b - 1) * L, b * L
        for i in range(e - 1, a - 1, -1):
            # driver terms of this block have known_at < a, so only later
            # blocks contribute to the regression target here
            res = joint_fit(ensemble, i, full, rest + new_known[:, i + 1])
            rest = res.mean
            rest_mean[:, i] = rest
            Zt[:, i] = res.integrand
        for i in range(a, e):
            Zp[:, i] = cond_expect(ensemble, i, info, Zt[:, i]).values
            f = driver(t[i], zero, Zp[:, i], DriverContext(i, ensemble.alpha[:, i]))
            g[:, i] = f * ensemble.d_bracket[:, i]
            new_known[:, known_at[i]] += g[:, i]
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite driver increments in block solver")
    Y_pre = np.empty((P, N + 1))
    Y_pre[:, N] = xi
    for i in range(N):
        Y_pre[:, i] = rest_mean[:, i] + _known_sum(g, known_at, i)
    Y, dO = _close_recursion(xi, g, Zp, ensemble.dM, Y_pre)
    _freeze(Y, Zp, dO, g)
    return BsdeSolution(
        Y, Zp, dO, g, xi, info, driver.name, driver.depends_on_z, "blocks",
        diagnostics={"n_blocks": n_blocks, "z_tilde_rms": float(np.sqrt(np.mean(Zt**2)))},
    )
