"""Learning monotone, stable discrete-time dynamics with windowed constrained networks."""

__version__ = "0.1.0"
