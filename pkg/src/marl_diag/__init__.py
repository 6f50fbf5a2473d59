"""Multi-agent reinforcement-learning classifier for multi-label images, built on a small numpy autodiff core."""
from .data import Dataset, SyntheticConfig, generate_synthetic, load_manifest, split
from .evaluation import MetricsReport, evaluate, roc_auc
from .model import AgentBundle, ModelConfig
from .training import RunConfig, pretrain_priors, train

__all__ = [
    "AgentBundle", "Dataset", "MetricsReport", "ModelConfig", "RunConfig", "SyntheticConfig",
    "evaluate", "generate_synthetic", "load_manifest", "pretrain_priors", "roc_auc", "split", "train",
]
__version__ = "0.1.0"
