"""Core simulation, allocation and accounting logic."""
