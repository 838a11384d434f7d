"""fedlora: momentum-preserving SVD aggregation of LoRA updates, with five
baseline strategies and a deterministic desk-scale federated simulator."""

from . import aggregation, cli, fedsim, linalg, lora, metrics

__all__ = ["aggregation", "cli", "fedsim", "linalg", "lora", "metrics"]
__version__ = "0.1.0"
