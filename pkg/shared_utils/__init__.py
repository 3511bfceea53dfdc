"""
Shared utilities for the safe RL-MPC experiments.
Contains common configuration, logging, and file helpers.
"""
