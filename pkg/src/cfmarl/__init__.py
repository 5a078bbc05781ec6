"""Mobile cell-free massive MIMO with multi-agent RL power/mobility control."""

__version__ = "0.1.0"
