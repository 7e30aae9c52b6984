"""Multi-objective search over the Once-for-All subnetwork space."""

__version__ = "0.1.0"
