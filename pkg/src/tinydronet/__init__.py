"""Build, train, quantize, deployment-plan and closed-loop-simulate tiny navigation CNNs."""

__version__ = "0.1.0"
