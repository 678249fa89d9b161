"""Quadrotor motion planning: kinodynamic search, B-spline references, MPCC with
discrete-time high-order CBFs, and a GPIO disturbance observer, plus a
closed-loop simulation harness."""

__version__ = "0.1.0"
