"""Offline RL and off-policy evaluation for discrete ventilator settings."""

__version__ = "0.1.0"
