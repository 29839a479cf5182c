"""Monte-Carlo BSDEs, GKW/FS decompositions and local risk minimization
under full and delayed information."""

from .bsde import (
    BsdeSolution,
    Claim,
    Driver,
    DriverContext,
    block_count,
    classical_norm,
    p_norm,
    picard_step,
    reduce_full_to_partial,
    solution_delta,
    solve_bsde_delayed_blocks,
    solve_bsde_full,
    solve_bsde_partial,
)
from .decomposition import Decomposition, fs_decompose, gkw_decompose
from .hedging import (
    MmmWeights,
    RiskProcess,
    RiskQuotient,
    Strategy,
    cost_process,
    mean_self_financing_strategy,
    mmm_density,
    mmm_price,
    optimal_strategy,
    perturbation_battery,
    risk_process,
    risk_quotient,
)
from .information import ConditionalEstimate, InformationModel, cond_expect, dual_project
from .market import (
    DriftLoading,
    Grid,
    MarkDistribution,
    MarketConfig,
    PathEnsemble,
    simulate_market,
    tradeoff_process,
)

__all__ = [
    "BsdeSolution", "Claim", "ConditionalEstimate", "Decomposition", "DriftLoading",
    "Driver", "DriverContext", "Grid", "InformationModel", "MarkDistribution",
    "MarketConfig", "MmmWeights", "PathEnsemble", "RiskProcess", "RiskQuotient",
    "Strategy", "block_count", "classical_norm", "cond_expect", "cost_process",
    "dual_project", "fs_decompose", "gkw_decompose", "mean_self_financing_strategy",
    "mmm_density", "mmm_price", "optimal_strategy", "p_norm", "perturbation_battery",
    "picard_step", "reduce_full_to_partial", "risk_process", "risk_quotient",
    "simulate_market", "solution_delta", "solve_bsde_delayed_blocks", "solve_bsde_full",
    "solve_bsde_partial", "tradeoff_process",
]
