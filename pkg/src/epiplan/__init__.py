"""Episodic-memory planning with behavioural priors on a toy racing environment."""
__version__ = "0.1.0"
