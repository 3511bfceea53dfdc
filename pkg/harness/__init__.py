"""
Closed-loop experiment harness: plant simulation, reference schedule,
learning episodes, reporting and acceptance checks.
"""
