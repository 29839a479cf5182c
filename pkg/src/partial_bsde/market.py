"""Jump-diffusion martingale and structure-condition price simulation.

The driving martingale is

    M_t = M0 + sigma_bar * W_t + sum_{k <= N_t} xi_k - lambda * E[xi] * t

with W a Brownian motion, N a Poisson process of intensity lambda and
i.i.d. square-integrable marks xi_k.  Its predictable bracket is
deterministic, d<M>_t = (sigma_bar^2 + lambda * E[xi^2]) dt, and the price
follows the structure condition dS = dM + alpha d<M>.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BLOCK_PATHS = 1024
THREADS_ENV = "PARTIAL_BSDE_THREADS"
STATE_NAMES = ("M", "S", "jumps")


@dataclass(frozen=True)
class Grid:
    """Uniform time grid 0 = t_0 < ... < t_N = T."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be an integer >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def steps_in(self, duration: float) -> int:
        """Number of grid steps spanned by ``duration``; rejects misaligned values."""
        ratio = duration / self.dt
        k = int(round(ratio))
        if abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise ValueError(
                f"duration {duration} is not an integer multiple of dt = {self.dt}"
            )
        return k


@dataclass(frozen=True)
class MarkDistribution:
    """Distribution of the jump marks (finite second moment required)."""

    kind: str = "constant"
    params: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.kind not in ("constant", "normal", "uniform"):
            raise ValueError(f"unknown mark distribution {self.kind!r}")
        n = {"constant": 1, "normal": 2, "uniform": 2}[self.kind]
        if len(self.params) != n:
            raise ValueError(f"{self.kind} marks take {n} parameter(s)")
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError("mark parameters must be finite")
        if self.kind == "normal" and self.params[1] < 0:
            raise ValueError("normal mark std must be >= 0")
        if self.kind == "uniform" and self.params[1] < self.params[0]:
            raise ValueError("uniform marks need low <= high")

    @classmethod
    def constant(cls, value: float) -> "MarkDistribution":
        return cls("constant", (float(value),))

    @classmethod
    def normal(cls, mean: float, std: float) -> "MarkDistribution":
        return cls("normal", (float(mean), float(std)))

    @classmethod
    def uniform(cls, low: float, high: float) -> "MarkDistribution":
        return cls("uniform", (float(low), float(high)))

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "normal":
            return self.params[0]
        lo, hi = self.params
        return 0.5 * (lo + hi)

    @property
    def second_moment(self) -> float:
        if self.kind == "constant":
            return self.params[0] ** 2
        if self.kind == "normal":
            m, s = self.params
            return m * m + s * s
        lo, hi = self.params
        return (lo * lo + lo * hi + hi * hi) / 3.0

    @property
    def bound(self) -> float:
        """Sup of |mark|; infinite for unbounded marks."""
        if self.kind == "constant":
            return abs(self.params[0])
        if self.kind == "normal":
            return abs(self.params[0]) if self.params[1] == 0 else math.inf
        return max(abs(self.params[0]), abs(self.params[1]))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(size, self.params[0])
        if self.kind == "normal":
            return rng.normal(self.params[0], self.params[1], size)
        return rng.uniform(self.params[0], self.params[1], size)


@dataclass(frozen=True)
class DriftLoading:
    """The alpha of the structure condition, evaluated at the left grid point.

    ``kind='constant'`` uses ``value``; ``kind='tanh'`` uses
    ``value * tanh((M - M0) / scale)``; ``kind='callable'`` calls
    ``func(t, M, S)``.  ``bound`` is the declared constant with |alpha| <= bound.
    """

    kind: str = "constant"
    value: float = 0.0
    scale: float = 1.0
    bound: float | None = None
    func: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = field(
        default=None, compare=False
    )

    def __post_init__(self):
        if self.kind not in ("constant", "tanh", "callable"):
            raise ValueError(f"unknown alpha kind {self.kind!r}")
        if self.kind == "callable" and (self.func is None or self.bound is None):
            raise ValueError("callable alpha needs func and an explicit bound")
        if self.kind == "tanh" and not self.scale > 0:
            raise ValueError("tanh alpha needs scale > 0")

    @classmethod
    def constant(cls, value: float) -> "DriftLoading":
        return cls("constant", float(value))

    @property
    def declared_bound(self) -> float:
        if self.bound is not None:
            return float(self.bound)
        return abs(self.value)

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "constant"

    def __call__(self, t: float, m: np.ndarray, s: np.ndarray, m0: float) -> np.ndarray:
        if self.kind == "constant":
            return np.full(m.shape, self.value)
        if self.kind == "tanh":
            return self.value * np.tanh((m - m0) / self.scale)
        return np.asarray(self.func(t, m, s), dtype=float) * np.ones(m.shape)


@dataclass(frozen=True)
class MarketConfig:
    sigma_bar: float = 1.0
    jump_intensity: float = 0.0
    jump_marks: MarkDistribution = MarkDistribution()
    alpha: DriftLoading = DriftLoading()
    s0: float = 1.0
    m0: float = 0.0
    seed: int = 0
    n_paths: int = 1000
    bracket_bound: float | None = None
    state: tuple[str, ...] = STATE_NAMES

    def __post_init__(self):
        if not (math.isfinite(self.sigma_bar) and self.sigma_bar >= 0):
            raise ValueError(f"sigma_bar must be >= 0, got {self.sigma_bar}")
        if not (math.isfinite(self.jump_intensity) and self.jump_intensity >= 0):
            raise ValueError(f"jump intensity must be >= 0, got {self.jump_intensity}")
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError(f"n_paths must be an integer >= 1, got {self.n_paths}")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 unsigned bits")
        if not (math.isfinite(self.s0) and math.isfinite(self.m0)):
            raise ValueError("S0 and M0 must be finite")
        unknown = set(self.state) - set(STATE_NAMES)
        if unknown or not self.state:
            raise ValueError(f"state must be a non-empty subset of {STATE_NAMES}")
        if self.bracket_bound is not None and self.bracket_rate > self.bracket_bound * (1 + 1e-12):
            raise ValueError(
                f"sigma_bar^2 + lambda E[mark^2] = {self.bracket_rate} exceeds the "
                f"declared bound {self.bracket_bound}"
            )

    @property
    def bracket_rate(self) -> float:
        """d<M>/dt = sigma_bar^2 + lambda E[mark^2]."""
        return self.sigma_bar**2 + self.jump_intensity * self.jump_marks.second_moment

    @property
    def bracket_constant(self) -> float:
        """C-bar: the declared (or implied) bound on the bracket rate."""
        return self.bracket_rate if self.bracket_bound is None else float(self.bracket_bound)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated paths on a shared grid.  Arrays are read-only after construction.

    Shapes: per-step increments are (P, N); levels are (P, N + 1).
    """

    grid: Grid
    config: MarketConfig
    dW: np.ndarray
    jump_sum: np.ndarray
    jump_count: np.ndarray
    M: np.ndarray
    dM: np.ndarray
    S: np.ndarray
    alpha: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_paths(self) -> int:
        return self.M.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def d_bracket(self) -> np.ndarray:
        """Predictable bracket increments, (P, N), deterministic per step."""
        return np.broadcast_to(self.config.bracket_rate * self.grid.dt, self.dM.shape)

    @property
    def bracket(self) -> np.ndarray:
        levels = self.config.bracket_rate * self.grid.times
        return np.broadcast_to(levels, self.M.shape)

    @property
    def dS(self) -> np.ndarray:
        return np.diff(self.S, axis=1)

    @property
    def W(self) -> np.ndarray:
        out = np.zeros(self.M.shape)
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    @property
    def state_names(self) -> tuple[str, ...]:
        return self.config.state

    def state(self, step: int, names: tuple[str, ...] | None = None) -> np.ndarray:
        """State vector X at grid index ``step``, shape (P, d)."""
        cols = []
        for name in names or self.config.state:
            if name == "M":
                cols.append(self.M[:, step])
            elif name == "S":
                cols.append(self.S[:, step])
            elif name == "jumps":
                cols.append(self.jump_count[:, step].astype(float))
            else:
                raise KeyError(name)
        return np.column_stack(cols)


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _simulate_block(config: MarketConfig, grid: Grid, block: int, n: int):
    ss = np.random.SeedSequence(int(config.seed), spawn_key=(block,))
    rng = np.random.Generator(np.random.PCG64(ss))
    N = grid.n_steps
    dW = rng.normal(0.0, math.sqrt(grid.dt), size=(n, N))
    if config.jump_intensity > 0:
        counts = rng.poisson(config.jump_intensity * grid.dt, size=(n, N))
        total = int(counts.sum())
        marks = config.jump_marks.sample(rng, total)
        if not np.all(np.isfinite(marks)):
            raise ValueError("jump mark sampler produced non-finite values")
        cell = np.repeat(np.arange(n * N), counts.ravel())
        jump_sum = np.bincount(cell, weights=marks, minlength=n * N).reshape(n, N)
    else:
        counts = np.zeros((n, N), dtype=np.int64)
        jump_sum = np.zeros((n, N))
    return dW, jump_sum, counts


def build_ensemble(
    config: MarketConfig,
    grid: Grid,
    dW: np.ndarray,
    jump_sum: np.ndarray,
    jump_counts: np.ndarray,
) -> PathEnsemble:
    """Assemble an ensemble from given Brownian increments and jump sums.

    Useful for coupled test ensembles; ``simulate_market`` goes through here.
    """
    dW = np.asarray(dW, dtype=float)
    jump_sum = np.asarray(jump_sum, dtype=float)
    jump_counts = np.asarray(jump_counts)
    P, N = dW.shape
    if N != grid.n_steps or jump_sum.shape != dW.shape or jump_counts.shape != dW.shape:
        raise ValueError("increment arrays must all have shape (n_paths, n_steps)")
    if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(jump_sum))):
        raise ValueError("non-finite increments")

    compensator = config.jump_intensity * config.jump_marks.mean * grid.dt
    dM = config.sigma_bar * dW + jump_sum - compensator
    M = np.empty((P, N + 1))
    M[:, 0] = config.m0
    S = np.empty((P, N + 1))
    S[:, 0] = config.s0
    alpha = np.empty((P, N))
    dbr = config.bracket_rate * grid.dt
    times = grid.times
    K_bar = config.alpha.declared_bound
    for i in range(N):
        a = config.alpha(times[i], M[:, i], S[:, i], config.m0)
        if not np.all(np.abs(a) <= K_bar * (1 + 1e-12)):
            raise ValueError(f"|alpha| exceeds the declared bound {K_bar} at step {i}")
        alpha[:, i] = a
        M[:, i + 1] = M[:, i] + dM[:, i]
        # structure condition, written so the identity check is bitwise exact
        S[:, i + 1] = S[:, i] + (dM[:, i] + a * dbr)
    count = np.zeros((P, N + 1), dtype=np.int64)
    np.cumsum(jump_counts, axis=1, out=count[:, 1:])

    for arr in (dW, jump_sum, M, dM, S, alpha, count):
        arr.setflags(write=False)
    return PathEnsemble(grid, config, dW, jump_sum, count, M, dM, S, alpha)


def simulate_market(config: MarketConfig, grid: Grid) -> PathEnsemble:
    """Simulate ``config.n_paths`` paths of (W, jumps, M, <M>, S).

    Random streams are keyed by (seed, block of BLOCK_PATHS paths), so the
    output does not depend on how blocks are scheduled across threads.
    """
    P = int(config.n_paths)
    blocks = [(b, min(BLOCK_PATHS, P - b * BLOCK_PATHS)) for b in range(-(-P // BLOCK_PATHS))]
    threads = _thread_count()
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda bn: _simulate_block(config, grid, *bn), blocks))
    else:
        parts = [_simulate_block(config, grid, b, n) for b, n in blocks]
    dW = np.concatenate([p[0] for p in parts])
    jump_sum = np.concatenate([p[1] for p in parts])
    counts = np.concatenate([p[2] for p in parts])
    return build_ensemble(config, grid, dW, jump_sum, counts)


def tradeoff_process(ensemble: PathEnsemble) -> np.ndarray:
    """Mean-variance tradeoff K_i = sum_{j<i} alpha_j^2 d<M>_j, shape (P, N + 1)."""
    K = np.zeros(ensemble.M.shape)
    np.cumsum(ensemble.alpha**2 * ensemble.d_bracket, axis=1, out=K[:, 1:])
    return K


def tradeoff_bound(ensemble: PathEnsemble) -> float:
    """K-bar^2 * C-bar * T, the uniform bound on the tradeoff process."""
    cfg = ensemble.config
    return cfg.alpha.declared_bound**2 * cfg.bracket_constant * ensemble.grid.horizon
