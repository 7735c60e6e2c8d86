"""Simulated container orchestrator with a state-store fault/error injector."""

__version__ = "0.1.0"
