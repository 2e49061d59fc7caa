"""Two-tower sequential recommender with cross-domain transfer.

Items are encoded from their content (token text and raw images, mixed
per catalog), user state from the interaction sequence. The towers meet
in a dot product, so a model pretrained on one catalog can rank a
disjoint catalog after its item vectors are recomputed.
"""

from .corpus import (
    Dataset,
    InteractionSequence,
    Item,
    Modality,
    SyntheticWorldConfig,
    generate_synthetic_world,
    leave_one_out_split,
    load_domain_dir,
    subsample,
)
from .errors import TransRecError
from .evaluation import MetricsReport, compare, evaluate
from .model import ModelConfig, TransRecModel, arch_hash
from .pipeline import (
    TrainConfig,
    TransferMode,
    adapt_to_target,
    grad_check,
    pretrain_user_encoder,
    standard_grad_checks,
    train_end_to_end,
)
from .runconfig import RunConfig, load_run_config

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "InteractionSequence",
    "Item",
    "MetricsReport",
    "Modality",
    "ModelConfig",
    "RunConfig",
    "SyntheticWorldConfig",
    "TrainConfig",
    "TransRecError",
    "TransRecModel",
    "TransferMode",
    "adapt_to_target",
    "arch_hash",
    "compare",
    "evaluate",
    "generate_synthetic_world",
    "grad_check",
    "leave_one_out_split",
    "load_domain_dir",
    "load_run_config",
    "pretrain_user_encoder",
    "standard_grad_checks",
    "subsample",
    "train_end_to_end",
    "__version__",
]
