"""
evshare - EV charging as a stochastic resource-sharing network

Radial distribution grids, load-flow constrained charging allocation, fluid
approximations with their invariant points, discrete-event simulation and
weight design for proportionally fair charging.
"""

__version__ = "1.0.0"
__author__ = "evshare developers"
