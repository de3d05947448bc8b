"""Simulated partitioned, geo-replicated transactional store with a history checker."""

from .store import Protocol
from .simnet import SimConfig, Simulation, HistoryLog, TxnSpec, run, simulate
from .bench import WorkloadConfig, run_experiment
from .oracle import History, check_log

__all__ = [
    "Protocol", "SimConfig", "Simulation", "HistoryLog", "TxnSpec", "run", "simulate",
    "WorkloadConfig", "run_experiment", "History", "check_log",
]
