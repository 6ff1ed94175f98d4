"""Traces, the sequential oracle, contract checks, stress suite and CLI."""
