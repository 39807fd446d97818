"""Federated learning with domain-specific residual branches coupled by a graph.

Numpy-only simulator: a from-scratch network engine, FedAvg rounds, a
teacher/student domain classifier, and the GCN-mixed residual layers.
"""

from .config import ExperimentConfig, load_config
from .data import FederatedDataset, SyntheticSpec, generate_synthetic
from .errors import FedGCNError
from .harness import run_experiment

__all__ = [
    "ExperimentConfig",
    "FederatedDataset",
    "FedGCNError",
    "SyntheticSpec",
    "generate_synthetic",
    "load_config",
    "run_experiment",
]
__version__ = "0.1.0"
