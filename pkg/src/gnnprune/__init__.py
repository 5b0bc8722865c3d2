"""GNN inference with LASSO channel pruning, batched planning and a hidden-feature cache."""

from gnnprune.graph import Graph, from_edges, load_graph, normalize, save_graph
from gnnprune.inference import BatchRequest, HiddenFeatureCache, batched_inference, full_inference, run_batches
from gnnprune.model import GnnModel, LayerSpec, fold_mask, init_model, load_model, model_forward, sage_arch, save_model
from gnnprune.pruner import PenaltySchedule, PruneBudget, prune_layer, prune_model
from gnnprune.trainer import TrainConfig, evaluate, retrain, train

__version__ = "0.1.0"

__all__ = [
    "BatchRequest", "GnnModel", "Graph", "HiddenFeatureCache", "LayerSpec", "PenaltySchedule", "PruneBudget",
    "TrainConfig", "batched_inference", "evaluate", "fold_mask", "from_edges", "full_inference", "init_model",
    "load_graph", "load_model", "model_forward", "normalize", "prune_layer", "prune_model", "retrain", "run_batches",
    "sage_arch", "save_graph", "save_model", "train",
]
