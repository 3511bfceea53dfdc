"""
Safe Q-learning with tube-based robust linear MPC as function approximator.
Polytopes, the active-set QP solver, constraint tightening, the MPC, the noise
datastore and the learner.
"""

__version__ = "1.0.0"
