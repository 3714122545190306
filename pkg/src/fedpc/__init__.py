"""Peer-to-peer federated continual learning simulator."""

__version__ = "0.1.0"
