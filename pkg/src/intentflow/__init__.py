"""Urgency-aware multi-agent orchestration for simulated smart spaces."""

__version__ = "0.1.0"
