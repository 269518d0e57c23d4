"""Simulator for ledger-backed networks-on-demand built from participatory IoT devices."""

from .ledger import Chain, MinerPolicy, verify_chain
from .metrics import MetricsReport, aggregate, emit_csv
from .sim import SimConfig, run_simulation, sweep

__all__ = ["Chain", "MinerPolicy", "verify_chain", "MetricsReport", "aggregate", "emit_csv", "SimConfig",
           "run_simulation", "sweep"]
__version__ = "0.1.0"
