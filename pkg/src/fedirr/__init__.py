"""Federated-learning irrigation simulator: soil, sensors, FedAvg, wire protocol, alerts."""

__version__ = "0.1.0"
