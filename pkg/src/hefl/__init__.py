"""Hierarchical ensemble federated learning simulator.

FedAVG inside each hospital, secret-shared cross-hospital evaluation,
grid-searched ensemble weights, and hash-consensus ledgers for models and
weights, all in one deterministic process.
"""
from .config import ScenarioConfig, load_config
from .protocol import RunReport, run_scenario

__all__ = ["ScenarioConfig", "load_config", "RunReport", "run_scenario"]
__version__ = "0.1.0"
