"""Discrete-event simulator of a migratable-object runtime on a spot fleet."""
from .machine import CheckpointMode, ConfigError, load_calibration
from .simkernel import Engine
from .simulation import RunConfig, RunResult, Simulation, run
from .workload import StencilConfig, SyntheticConfig

__all__ = ["CheckpointMode", "ConfigError", "Engine", "RunConfig", "RunResult", "Simulation",
           "StencilConfig", "SyntheticConfig", "load_calibration", "run"]
__version__ = "0.1.0"
