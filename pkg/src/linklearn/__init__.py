"""Joint learning of Tx/Rx FIR filters over band-limited link models."""

__version__ = "0.1.0"
