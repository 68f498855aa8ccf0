"""p-Laplacian adapters over augmented attention graphs, in plain numpy."""
from .adapters import Adapter, PAdapter, p_adapter_forward
from .attention import AttentionWeights, attention, augment
from .graph import AttentionGraph, build_graph, graph_from_adjacency
from .message_passing import PLaplacianConfig, p_normalize, p_solve, p_step

__version__ = "0.1.0"

__all__ = [
    "Adapter", "PAdapter", "p_adapter_forward", "AttentionWeights", "attention", "augment",
    "AttentionGraph", "build_graph", "graph_from_adjacency", "PLaplacianConfig", "p_normalize",
    "p_solve", "p_step",
]
