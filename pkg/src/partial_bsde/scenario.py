"""Scenario files: TOML with [market], [info], [claim], [bsde] and [run] sections.

Field names carry their units where one applies (``horizon_time``,
``lambda_per_time``, ``tau_time``).  Every key is validated; errors name the
offending field.  The scenario hash covers every field that changes results
and ignores output locations and export switches.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bsde import SCHEMES, Claim, Driver
from .information import InformationModel
from .market import STATE_NAMES, DriftLoading, Grid, MarkDistribution, MarketConfig

CLAIMS = ("constant", "identity", "power", "call", "put")
DRIVERS = ("zero", "constant", "discount", "linear", "sin_z", "follmer_schweizer")
SOLVE_SCHEMES = SCHEMES + ("blocks",)


class ScenarioError(ValueError):
    pass


class _Section:
    """Typed, tracked access to one table so unknown keys can be reported."""

    def __init__(self, name: str, table: dict):
        if not isinstance(table, dict):
            raise ScenarioError(f"[{name}] must be a table")
        self.name = name
        self.table = table
        self.used: set[str] = set()

    def _get(self, key, default, kinds, label):
        self.used.add(key)
        if key not in self.table:
            if default is _REQUIRED:
                raise ScenarioError(f"{self.name}.{key}: required field missing")
            return default
        v = self.table[key]
        if isinstance(v, bool) and bool not in kinds:
            raise ScenarioError(f"{self.name}.{key}: expected {label}, got {v!r}")
        if not isinstance(v, kinds):
            raise ScenarioError(f"{self.name}.{key}: expected {label}, got {v!r}")
        return v

    def num(self, key, default=None):
        v = self._get(key, default, (int, float), "a number")
        return None if v is None else float(v)

    def int(self, key, default=None):
        v = self._get(key, default, (int,), "an integer")
        return None if v is None else int(v)

    def str(self, key, default=None):
        return self._get(key, default, (str,), "a string")

    def bool(self, key, default=None):
        return self._get(key, default, (bool,), "true or false")

    def list(self, key, default=None):
        v = self._get(key, default, (list,), "an array")
        return None if v is None else list(v)

    def sub(self, key) -> "_Section | None":
        self.used.add(key)
        t = self.table.get(key)
        return None if t is None else _Section(f"{self.name}.{key}", t)

    def finish(self):
        extra = sorted(set(self.table) - self.used)
        if extra:
            raise ScenarioError(f"{self.name}: unknown field(s) {', '.join(extra)}")


_REQUIRED = object()


@dataclass(frozen=True)
class RunSettings:
    seed: int = 20261016
    output_dir: str = "out"
    export_ensemble: bool = False
    export_solution: bool = True
    mmm_max_invalid_fraction: float = 0.0
    partition_steps: int = 8
    perturbation_scale: float = 1.0


@dataclass(frozen=True)
class Scenario:
    grid: Grid
    market: MarketConfig
    info: InformationModel
    claim: dict
    driver: dict
    tol: float = 1e-3
    max_iter: int = 20
    scheme: str = "joint"
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        if self.scheme not in SOLVE_SCHEMES:
            raise ScenarioError(f"bsde.scheme: choose from {SOLVE_SCHEMES}")
        if not self.tol > 0:
            raise ScenarioError("bsde.tol must be > 0")
        if self.max_iter < 1:
            raise ScenarioError("bsde.max_iter must be >= 1")
        if not self.info.is_full:
            try:
                self.info.lag_steps(self.grid)
            except ValueError as exc:
                raise ScenarioError(f"info.tau_time: {exc}") from None
        if self.scheme == "blocks":
            if self.info.is_full:
                raise ScenarioError("bsde.scheme = 'blocks' needs info.kind = 'delayed'")
            n = self.grid.horizon / self.info.tau
            if abs(n - round(n)) > 1e-9 * n:
                raise ScenarioError(
                    "bsde.scheme = 'blocks' needs horizon_time to be an integer multiple of tau_time"
                )
            if self.build_driver().depends_on_y:
                raise ScenarioError("bsde.scheme = 'blocks' needs a driver that depends on z only")
        steps = self.run.partition_steps
        if steps < 1 or self.grid.n_steps % steps:
            raise ScenarioError("run.partition_steps must divide market.n_steps")
        # resolve names early so errors surface before any computation
        self.build_claim()
        self.build_driver()

    def build_claim(self) -> Claim:
        c = dict(self.claim)
        name = c.pop("name")
        und = c.get("underlying", "S")
        if name == "constant":
            return Claim.constant(c["value"])
        if name == "identity":
            return Claim.identity(und)
        if name == "power":
            return Claim.power(c["exponent"], und)
        if name == "call":
            return Claim.call(c["strike"], und)
        return Claim.put(c["strike"], und)

    def build_driver(self) -> Driver:
        d = self.driver
        name = d["name"]
        if name == "zero":
            return Driver.zero()
        if name == "constant":
            return Driver.constant(d["value"])
        if name == "discount":
            return Driver.discount(d["rate"])
        if name == "linear":
            return Driver.linear(d["a"], d["b"], d.get("c", 0.0))
        if name == "sin_z":
            return Driver.lipschitz_z(d["scale"])
        a = self.market.alpha
        return Driver.follmer_schweizer(a.declared_bound, a.is_deterministic)

    def canonical(self) -> dict:
        """Semantically relevant content, normalized for hashing."""
        m = self.market
        out = {
            "grid": {"horizon_time": float(self.grid.horizon), "n_steps": int(self.grid.n_steps)},
            "market": {
                "n_paths": int(m.n_paths),
                "sigma_bar": float(m.sigma_bar),
                "lambda_per_time": float(m.jump_intensity),
                "s0": float(m.s0),
                "m0": float(m.m0),
                "bracket_bound": None if m.bracket_bound is None else float(m.bracket_bound),
                "state": list(m.state),
                "jump_marks": {"kind": m.jump_marks.kind, "params": [float(p) for p in m.jump_marks.params]},
                "alpha": {
                    "kind": m.alpha.kind,
                    "value": float(m.alpha.value),
                    "scale": float(m.alpha.scale),
                    "bound": m.alpha.declared_bound,
                },
            },
            "info": {
                "kind": self.info.kind,
                "tau_time": float(self.info.tau),
                "basis_degree": int(self.info.basis_degree),
                "basis_knots": int(self.info.basis_knots),
                "state_columns": None if self.info.state_columns is None else list(self.info.state_columns),
            },
            "claim": _normalize(self.claim),
            "bsde": {
                "driver": _normalize(self.driver),
                "tol": float(self.tol),
                "max_iter": int(self.max_iter),
                "scheme": self.scheme,
            },
            "run": {
                "seed": int(self.run.seed),
                "mmm_max_invalid_fraction": float(self.run.mmm_max_invalid_fraction),
                "partition_steps": int(self.run.partition_steps),
                "perturbation_scale": float(self.run.perturbation_scale),
            },
        }
        return out

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, paths=None, steps=None, seed=None, output_dir=None) -> "Scenario":
        market, grid, run = self.market, self.grid, self.run
        try:
            if paths is not None:
                market = dataclasses.replace(market, n_paths=int(paths))
            if seed is not None:
                market = dataclasses.replace(market, seed=int(seed))
                run = dataclasses.replace(run, seed=int(seed))
            if steps is not None:
                grid = Grid(grid.horizon, int(steps))
            if output_dir is not None:
                run = dataclasses.replace(run, output_dir=str(output_dir))
            return dataclasses.replace(self, market=market, grid=grid, run=run)
        except ScenarioError:
            raise
        except ValueError as exc:
            raise ScenarioError(f"override: {exc}") from None


def _normalize(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v)
            for k, v in sorted(d.items())}


def _parse_market(sec: _Section, seed: int):
    try:
        grid = Grid(sec.num("horizon_time", 1.0), sec.int("n_steps", 64))
    except ValueError as exc:
        raise ScenarioError(f"market: {exc}") from None
    marks = MarkDistribution()
    jm = sec.sub("jump_marks")
    if jm is not None:
        kind = jm.str("kind", "constant")
        params = jm.list("params", [0.0])
        jm.finish()
        try:
            marks = MarkDistribution(kind, tuple(float(p) for p in params))
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"market.jump_marks: {exc}") from None
    alpha = DriftLoading()
    al = sec.sub("alpha")
    if al is not None:
        try:
            alpha = DriftLoading(
                al.str("kind", "constant"), al.num("value", 0.0), al.num("scale", 1.0), al.num("bound")
            )
        except ValueError as exc:
            raise ScenarioError(f"market.alpha: {exc}") from None
        al.finish()
    state = sec.list("state", list(STATE_NAMES))
    try:
        market = MarketConfig(
            sigma_bar=sec.num("sigma_bar", 1.0),
            jump_intensity=sec.num("lambda_per_time", 0.0),
            jump_marks=marks,
            alpha=alpha,
            s0=sec.num("s0", 1.0),
            m0=sec.num("m0", 0.0),
            seed=seed,
            n_paths=sec.int("n_paths", 50_000),
            bracket_bound=sec.num("bracket_bound"),
            state=tuple(state),
        )
    except ValueError as exc:
        raise ScenarioError(f"market: {exc}") from None
    sec.finish()
    return grid, market


def _parse_info(sec: _Section) -> InformationModel:
    kind = sec.str("kind", "full")
    tau = sec.num("tau_time")
    alias = sec.num("tau")
    if tau is not None and alias is not None:
        raise ScenarioError("info: give tau_time or tau, not both")
    tau = tau if tau is not None else alias
    degree = sec.int("basis_degree", 3)
    cols = sec.list("state_columns")
    knots = sec.int("basis_knots", 0)
    sec.finish()
    try:
        return InformationModel(kind, tau or 0.0, degree, None if cols is None else tuple(cols), knots)
    except ValueError as exc:
        raise ScenarioError(f"info: {exc}") from None


_CLAIM_PARAMS = {
    "constant": {"value": "num"},
    "identity": {"underlying": "str"},
    "power": {"exponent": "num", "underlying": "str"},
    "call": {"strike": "num", "underlying": "str"},
    "put": {"strike": "num", "underlying": "str"},
}
_DRIVER_PARAMS = {
    "zero": {},
    "constant": {"value": "num"},
    "discount": {"rate": "num"},
    "linear": {"a": "num", "b": "num", "c": "num"},
    "sin_z": {"scale": "num"},
    "follmer_schweizer": {},
}
_OPTIONAL = {"underlying", "c"}


def _parse_named(sec: _Section, key: str, table: dict, kind: str) -> dict:
    name = sec.str(key, _REQUIRED if kind == "claim" else "zero")
    if name not in table:
        raise ScenarioError(f"{sec.name}.{key}: unknown {kind} {name!r}; choose from {tuple(table)}")
    out = {"name": name}
    for p, t in table[name].items():
        v = getattr(sec, t)(p, None if p in _OPTIONAL else _REQUIRED)
        if v is not None:
            out[p] = v
    if out.get("underlying", "S") not in ("S", "M", "W"):
        raise ScenarioError(f"{sec.name}.underlying: use S, M or W")
    return out


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    unknown = set(doc) - {"market", "info", "claim", "bsde", "run"}
    if unknown:
        raise ScenarioError(f"unknown section(s): {', '.join(sorted(unknown))}")

    run_sec = _Section("run", doc.get("run", {}))
    run = RunSettings(
        seed=run_sec.int("seed", 20261016),
        output_dir=run_sec.str("output_dir", "out"),
        export_ensemble=run_sec.bool("export_ensemble", False),
        export_solution=run_sec.bool("export_solution", True),
        mmm_max_invalid_fraction=run_sec.num("mmm_max_invalid_fraction", 0.0),
        partition_steps=run_sec.int("partition_steps", 8),
        perturbation_scale=run_sec.num("perturbation_scale", 1.0),
    )
    run_sec.finish()
    grid, market = _parse_market(_Section("market", doc.get("market", {})), run.seed)
    info = _parse_info(_Section("info", doc.get("info", {})))

    claim_sec = _Section("claim", doc.get("claim", {}))
    claim = _parse_named(claim_sec, "name", _CLAIM_PARAMS, "claim")
    claim_sec.finish()

    bsde_sec = _Section("bsde", doc.get("bsde", {}))
    driver = _parse_named(bsde_sec, "driver", _DRIVER_PARAMS, "driver")
    tol = bsde_sec.num("tol", 1e-3)
    max_iter = bsde_sec.int("max_iter", 20)
    scheme = bsde_sec.str("scheme", "joint")
    bsde_sec.finish()
    try:
        return Scenario(grid, market, info, claim, driver, tol, max_iter, scheme, run)
    except ScenarioError:
        raise
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"{source}: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), str(path))
