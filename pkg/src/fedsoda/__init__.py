"""Deterministic federated segmentation simulator with layer-wise
similarity-weighted aggregation and FedAvg/FedProx/FedBN baselines."""

__version__ = "0.1.0"
