"""Shape-adaptive planning, trajectory optimization and tracking control
for a variable-radius quadrotor."""

__version__ = "0.1.0"
