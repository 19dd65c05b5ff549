"""Deterministic federated-learning simulator for skeleton action recognition.

A lite spatio-temporal graph-convolution backbone is trained across simulated
clients with heterogeneous synthetic skeleton data. The federation supports
fedavg / fedprox / fedbn baselines and the adaptive-topology + multi-grain
distillation strategy, with evaluation protocols (linear, knn) and CKA
representation analysis.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    FedskelError,
    GraftingError,
    ProtocolError,
    TopologyError,
    TrainingAborted,
    UsageError,
)
from .tensor import Tensor, SgdMomentum, backward

__all__ = [
    "Tensor",
    "SgdMomentum",
    "backward",
    "FedskelError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "GraftingError",
    "ProtocolError",
    "TopologyError",
    "TrainingAborted",
    "UsageError",
    "__version__",
]
