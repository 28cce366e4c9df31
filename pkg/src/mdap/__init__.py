"""Cross-domain recommendation with multi-view preference encoding.

Users interacting in two item domains are encoded through a set of
stochastically assigned preference views; per-domain gates mix the view
embeddings and a shared decoder reconstructs each domain's interaction
row. Training minimizes reconstruction error plus a penalty that keeps
the two domains' gate vectors from collapsing onto the same views.
"""

from .data import (DenseInteractionView, InteractionDataset, InteractionRecord,
                   SyntheticSpec, build_dataset, densify, generate_synthetic,
                   k_core_filter, load_domain, split_counts, synthetic_records,
                   view_blocks)
from .errors import (CheckpointError, DataError, MdapError, ParameterError,
                     ParseError, ShapeError, TrainingDivergedError)
from .evaluation import MetricsReport, evaluate, ndcg_at_k, recall_at_k, top_k
from .model import (ModelConfig, ModelParams, ForwardTrace, forward, init_params,
                    load_checkpoint, save_checkpoint)
from .numerics import Rng
from .training import (AblationReport, TrainConfig, TrainLog, backward, loss,
                       run_ablation, train)

__version__ = "0.1.0"

__all__ = [
    "AblationReport", "CheckpointError", "DataError", "DenseInteractionView",
    "ForwardTrace", "InteractionDataset", "InteractionRecord", "MdapError",
    "MetricsReport", "ModelConfig", "ModelParams", "ParameterError", "ParseError",
    "Rng", "ShapeError", "SyntheticSpec", "TrainConfig", "TrainLog",
    "TrainingDivergedError", "backward", "build_dataset", "densify", "evaluate",
    "forward", "generate_synthetic", "init_params", "k_core_filter",
    "load_checkpoint", "load_domain", "loss", "ndcg_at_k", "recall_at_k",
    "run_ablation", "save_checkpoint", "split_counts", "synthetic_records",
    "top_k", "train", "view_blocks",
]
