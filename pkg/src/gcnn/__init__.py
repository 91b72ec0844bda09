"""Spectral graph convolutional networks with hand-derived backpropagation."""

from gcnn.errors import (
    CoarseningStall,
    ConfigError,
    FormatError,
    GCNNError,
    InvalidArgument,
    NumericalFailure,
)
from gcnn.graph import Graph, build_grid_graph, laplacian, subsample_graph
from gcnn.spectral import SpectralBasis, eigendecompose, gft, igft

__version__ = "0.1.0"

__all__ = [
    "CoarseningStall",
    "ConfigError",
    "FormatError",
    "GCNNError",
    "Graph",
    "InvalidArgument",
    "NumericalFailure",
    "SpectralBasis",
    "build_grid_graph",
    "eigendecompose",
    "gft",
    "igft",
    "laplacian",
    "subsample_graph",
]
