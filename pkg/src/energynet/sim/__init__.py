"""Scenario loading, the tick kernel, the radial baseline and run metrics."""

from .baseline import DemandMismatch, check_same_demand, run_baseline
from .kernel import FailureEvent, RunResult, UnknownTarget, World, inject, run, trace_bytes
from .metrics import compute_metrics, resilience_index
from .scenario import InvalidScenario, Scenario, load_scenario, parse_scenario
