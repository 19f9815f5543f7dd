"""Calibrate-and-transform reward alignment for inference-time procedures."""

__version__ = "0.1.0"

from .analytic import TradeoffPoint, beta_for_kl, build_tilted, kl_divergence, sweep_curve, win_rate
from .calibration import CalibrationTable, RewardRecord, build_table, empirical_calibrate
from .fixedpoint import FixedPointFamily, solve_bon_fp, solve_won_fp
from .procedures import BestOfN, RewindRepeat, WorstOfN, parse_procedure
from .transforms import ExpTilt, Log, Tabulated, parse_transform

__all__ = [
    "BestOfN",
    "CalibrationTable",
    "ExpTilt",
    "FixedPointFamily",
    "Log",
    "RewardRecord",
    "RewindRepeat",
    "Tabulated",
    "TradeoffPoint",
    "WorstOfN",
    "__version__",
    "beta_for_kl",
    "build_table",
    "build_tilted",
    "empirical_calibrate",
    "kl_divergence",
    "parse_procedure",
    "parse_transform",
    "solve_bon_fp",
    "solve_won_fp",
    "sweep_curve",
    "win_rate",
]
