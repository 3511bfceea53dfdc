"""
Test suite for the safe RL-MPC simulator.
"""
