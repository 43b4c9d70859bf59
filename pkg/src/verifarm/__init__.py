"""Distributed verification task farm: fabric, workers, client and simulator."""

__version__ = "0.1.0"
