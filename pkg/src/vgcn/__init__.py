"""Variational graph convolution and attention networks with Monte Carlo uncertain attention."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, grad_check
from .graph import GraphSpec, PartitionedAdjacency, normalize_adjacency, partition_skeleton, validate_graph
from .models import ArchConfig, GraphBatch, Model
from .rng import RandomStream

__all__ = [
    "ArchConfig",
    "GraphBatch",
    "GraphSpec",
    "Model",
    "PartitionedAdjacency",
    "RandomStream",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "normalize_adjacency",
    "partition_skeleton",
    "validate_graph",
]
