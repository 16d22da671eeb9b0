"""Few-shot SAR target recognition with densely connected prototype graph networks."""

from .config import EmbeddingConfig, GraphConfig, ModelConfig, preset
from .graph import forward_episode, init_model
from .harness import ablation_run, evaluate, robustness_histogram, sample_task, train

__all__ = [
    "EmbeddingConfig",
    "GraphConfig",
    "ModelConfig",
    "preset",
    "forward_episode",
    "init_model",
    "ablation_run",
    "evaluate",
    "robustness_histogram",
    "sample_task",
    "train",
]
