"""Discrete-event model of LTE uplink backhauled over DOCSIS, with Bandwidth Report pipelining."""
from .config import ScenarioConfig, load_config
from .sim_core import Engine
from .workload import run_load_sweep, run_ping_experiment

__all__ = ["Engine", "ScenarioConfig", "load_config", "run_ping_experiment", "run_load_sweep"]
__version__ = "0.1.0"
