"""Spectral graph attention: Laplacian eigenpairs, learned positional encodings
and a fully-connected graph Transformer with separate real/added-edge attention."""

from .estimators import LaplacianEigenTransformer, SANGraphClassifier, SANGraphRegressor, SANNodeClassifier
from .graph import Dataset, Graph, GraphError
from .model import ModelConfig, san_forward
from .spectral import EigSelection, LaplacianKind, SpectralDecomposition, decompose_graph
from .train import RunRecord, TrainConfig, train_model

__all__ = [
    "Dataset", "EigSelection", "Graph", "GraphError", "LaplacianEigenTransformer", "LaplacianKind",
    "ModelConfig", "RunRecord", "SANGraphClassifier", "SANGraphRegressor", "SANNodeClassifier",
    "SpectralDecomposition", "TrainConfig", "decompose_graph", "san_forward", "train_model",
]
__version__ = "0.1.0"
