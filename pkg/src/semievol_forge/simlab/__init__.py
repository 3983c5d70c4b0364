from .backend import SIM_BASE_MODEL, SIM_WARM_MODEL, SimulatedBackend
from .world import OracleSpec, SyntheticWorld, find_task_ids, gen_tasks

__all__ = [
    "OracleSpec",
    "SIM_BASE_MODEL",
    "SIM_WARM_MODEL",
    "SimulatedBackend",
    "SyntheticWorld",
    "find_task_ids",
    "gen_tasks",
]
