"""Workloads, the microbenchmark client, history validation and the CLI."""

from .client import client_read, client_write, decode, encode
from .experiment import ExperimentConfig, Metrics, ScriptedEvent, run_experiment
from .history import History, OpRecord, validate_history
from .workload import TraceRecord, WorkloadSpec, gen_synthetic, parse_trace, trace_ops

__all__ = ["ExperimentConfig", "History", "Metrics", "OpRecord", "ScriptedEvent",
           "TraceRecord", "WorkloadSpec", "client_read", "client_write", "decode", "encode",
           "gen_synthetic", "parse_trace", "run_experiment", "trace_ops", "validate_history"]
