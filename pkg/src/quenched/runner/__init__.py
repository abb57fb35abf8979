"""Scenario-driven command-line runner."""

from .cli import main, run, validate

__all__ = ["main", "run", "validate"]
