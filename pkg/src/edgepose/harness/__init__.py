"""Scenario simulation, metrics and reporting."""

from edgepose.harness.config import ScenarioConfig
from edgepose.harness.runner import MetricsReport, RunResult, run_paired, run_scenario

__all__ = ["MetricsReport", "RunResult", "ScenarioConfig", "run_paired", "run_scenario"]
