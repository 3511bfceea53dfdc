# CLI module for the safe RL-MPC simulator
