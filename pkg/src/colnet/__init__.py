"""Column networks for collective classification on multi-relational graphs."""
from .baselines import SlConfig, SlStack, hwn_norel, sl_context, sl_predict, sl_train
from .errors import (
    ColnetError, ConfigError, ConsistencyError, DivergenceError, ParseError, ReferentialError,
    ShapeError, ValidationError,
)
from .metrics import EvalReport, decide_labels, f1_scores
from .model import (
    ActivationCache, ClnParams, backward, forward, init_for_graph, init_params, load_params,
    param_count, relational_context, save_params,
)
from .relgraph import (
    RelGraph, SplitMask, generate_synthetic, hop_distance, load_graph, load_splits, make_split,
    neighbors, save_graph, save_splits, standardize,
)
from .training import (
    TrainConfig, TrainLog, grad_check, grid_search, mean_of_runs, train, train_full_batch,
    train_mini_batch,
)

__version__ = "0.1.0"

__all__ = [
    "SlConfig",
    "SlStack",
    "hwn_norel",
    "sl_context",
    "sl_predict",
    "sl_train",
    "ColnetError",
    "ConfigError",
    "ConsistencyError",
    "DivergenceError",
    "ParseError",
    "ReferentialError",
    "ShapeError",
    "ValidationError",
    "EvalReport",
    "decide_labels",
    "f1_scores",
    "ActivationCache",
    "ClnParams",
    "backward",
    "forward",
    "init_for_graph",
    "init_params",
    "load_params",
    "param_count",
    "relational_context",
    "save_params",
    "RelGraph",
    "SplitMask",
    "generate_synthetic",
    "hop_distance",
    "load_graph",
    "load_splits",
    "make_split",
    "neighbors",
    "save_graph",
    "save_splits",
    "standardize",
    "TrainConfig",
    "TrainLog",
    "grad_check",
    "grid_search",
    "mean_of_runs",
    "train",
    "train_full_batch",
    "train_mini_batch",
]
