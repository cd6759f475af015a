"""Experiment orchestration: data, grid protocol, reports, CLI."""
