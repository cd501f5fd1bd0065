"""Threshold logical clocks with QSC consensus on a deterministic network simulator."""
from .errors import ConfigError, HarnessBug, ProtocolError, TraceFormatError
from .experiment import ExperimentConfig, Summary, run_experiment
from .qsc import QscConfig, QscNode
from .sim_net import DelaySet, Oblivious, SimConfig, Simulation, TicketAware
from .tlc import TlcConfig, TlcNode
from .trace import Trace
from .trace_check import Violation, check_all, exhaustive_safety

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "HarnessBug", "ProtocolError", "TraceFormatError",
    "ExperimentConfig", "Summary", "run_experiment",
    "QscConfig", "QscNode",
    "DelaySet", "Oblivious", "SimConfig", "Simulation", "TicketAware",
    "TlcConfig", "TlcNode", "Trace",
    "Violation", "check_all", "exhaustive_safety",
]
