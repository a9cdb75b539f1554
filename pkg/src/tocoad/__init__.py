"""Two-stage contrastive anomaly detection: discriminative pre-training,
negative-guided contrastive fine-tuning and memory-bank scoring."""

__version__ = "0.1.0"
