"""Debias trained feed-forward classifiers by fine-tuning their weights.

The package splits into: datasets (``data``), a small neural-network
engine (``network``), fairness metrics and thresholding (``metrics``), a
boosted-tree black-box optimizer (``blackbox``), the weight fine-tuning
algorithms (``debias``), post-processing baselines (``postproc``), and an
experiment harness with a CLI (``harness``, ``cli``).
"""

from .data import DataSet, SplitSpec, SyntheticSpec, generate_synthetic, load_csv, split_standardize
from .debias import (
    AdversarialConfig,
    DebiasResult,
    LayerwiseConfig,
    ProtectedAdversaryConfig,
    RandomPerturbConfig,
    adversarial_finetune,
    layerwise_optimization,
    protected_attr_adversarial,
    random_perturbation,
)
from .metrics import (
    BiasMeasure,
    EvalReport,
    ObjectiveSpec,
    balanced_accuracy,
    bias,
    objective,
    select_threshold,
)
from .network import FlatWeights, Network, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdversarialConfig",
    "BiasMeasure",
    "DataSet",
    "DebiasResult",
    "EvalReport",
    "FlatWeights",
    "LayerwiseConfig",
    "Network",
    "ObjectiveSpec",
    "ProtectedAdversaryConfig",
    "RandomPerturbConfig",
    "SplitSpec",
    "SyntheticSpec",
    "TrainConfig",
    "adversarial_finetune",
    "balanced_accuracy",
    "bias",
    "generate_synthetic",
    "layerwise_optimization",
    "load_csv",
    "objective",
    "protected_attr_adversarial",
    "random_perturbation",
    "select_threshold",
    "split_standardize",
    "train",
]
