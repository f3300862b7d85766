"""Deterministic federated-optimisation simulator.

Local SGD (FedAvg) and its server-side variants (FedAvgM, FedAdam), SCAFFOLD,
and IGFL: a client update corrected by individual and group behaviour plus
attention-weighted server aggregation.
"""

from .engine import RunConfig, run_training, attention_heatmap
from .estimator import FederatedClassifier

__all__ = ["RunConfig", "run_training", "attention_heatmap", "FederatedClassifier"]
__version__ = "0.1.0"
