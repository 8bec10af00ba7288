"""Fractional age-of-information learning: simulator, tabular learners,
oracles and an asynchronous multi-agent learner."""
from .aoi import CompletionLog, FractionalCost, TaskRecord, task_costs, time_average_aoi, trapezoid_area
from .fql import FqlConfig, FractionalMdp, random_mdp, run_fql
from .marl import LearnerConfig, MarlRunner
from .mec import MecEnv, Offload, Scenario, Wait
from .nashq import FnqlConfig, MarkovGame, random_game, run_fnql

__all__ = [
    "CompletionLog", "FractionalCost", "TaskRecord", "task_costs", "time_average_aoi", "trapezoid_area",
    "FqlConfig", "FractionalMdp", "random_mdp", "run_fql",
    "LearnerConfig", "MarlRunner",
    "MecEnv", "Offload", "Scenario", "Wait",
    "FnqlConfig", "MarkovGame", "random_game", "run_fnql",
]
__version__ = "0.1.0"
