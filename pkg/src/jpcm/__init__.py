"""Joint positioning and control of a quadrotor as one factor graph."""

__version__ = "0.1.0"
