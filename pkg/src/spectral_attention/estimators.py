"""scikit-learn style wrappers around the spectral pipeline and the SAN model.

``X`` is always a sequence of :class:`Graph` objects. Targets default to the
labels the graphs already carry, so ``fit(graphs)`` works on labeled corpora.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.metrics import balanced_accuracy_score
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .graph import Dataset
from .model import ModelConfig, collate, eigen_selection, san_forward
from .spectral import decompose_graph, select_eigpairs
from .train import TrainConfig, train_model
from .validation import check_graph_targets, check_graphs, check_node_targets, feature_widths


class LaplacianEigenTransformer(TransformerMixin, BaseEstimator):
    """Graphs -> the ``m`` lowest Laplacian eigenpairs of each (zero-padded, masked)."""

    def __init__(self, kind: str = "combinatorial", m: int = 8, tol_mult: float = 1e-6):
        self.kind = kind
        self.m = m
        self.tol_mult = tol_mult

    def fit(self, X, y=None):
        check_graphs(X)
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")
        self.n_graphs_seen_ = len(check_graphs(X))
        return self

    def transform(self, X) -> list:
        """One :class:`EigSelection` per graph."""
        check_is_fitted(self, "n_graphs_seen_")
        return [select_eigpairs(decompose_graph(g, self.kind, self.tol_mult), self.m) for g in check_graphs(X)]

    def eigenvalue_matrix(self, X) -> np.ndarray:
        """(n_graphs, m) eigenvalues with padded slots set to 0."""
        return np.stack([sel.eigenvalues for sel in self.transform(X)])


_MODEL_KEYS = ("L", "H", "d", "k_lpe", "m", "gamma", "lpe_kind", "attention", "self_loop_branch",
               "readout", "laplacian", "lpe_layers", "lpe_heads")
_TRAIN_KEYS = ("lr_init", "lr_reduce_factor", "patience", "lr_min", "weight_decay", "dropout",
               "batch_size", "max_epochs", "sign_flip_augment")


class _SANBase(BaseEstimator):
    _task = ""

    def __init__(self, L=2, H=4, d=32, k_lpe=8, m=8, gamma=1.0, lpe_kind="node", attention="full",
                 self_loop_branch="real", readout="mean", laplacian="combinatorial", lpe_layers=1,
                 lpe_heads=4, lr_init=1e-3, lr_reduce_factor=0.5, patience=10, lr_min=1e-5,
                 weight_decay=0.0, dropout=0.0, batch_size=16, max_epochs=50, sign_flip_augment=True,
                 validation_fraction=0.1, random_state=0):
        self.L = L
        self.H = H
        self.d = d
        self.k_lpe = k_lpe
        self.m = m
        self.gamma = gamma
        self.lpe_kind = lpe_kind
        self.attention = attention
        self.self_loop_branch = self_loop_branch
        self.readout = readout
        self.laplacian = laplacian
        self.lpe_layers = lpe_layers
        self.lpe_heads = lpe_heads
        self.lr_init = lr_init
        self.lr_reduce_factor = lr_reduce_factor
        self.patience = patience
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.sign_flip_augment = sign_flip_augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _labeled(self, graphs, y) -> tuple[list, int]:
        raise NotImplementedError

    def _fit(self, X, y):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        graphs = check_graphs(X)
        labeled, out_dim = self._labeled(graphs, y)
        in_dim, edge_dim = feature_widths(graphs)
        self.model_config_ = ModelConfig(task=self._task, in_dim=in_dim, edge_dim=edge_dim, out_dim=out_dim,
                                         **{k: getattr(self, k) for k in _MODEL_KEYS})
        train_cfg = TrainConfig(seed=int(self.random_state), **{k: getattr(self, k) for k in _TRAIN_KEYS})
        order = np.random.default_rng(self.random_state).permutation(len(labeled)).tolist()
        n_val = int(round(self.validation_fraction * len(labeled)))
        if len(labeled) - n_val < 1:
            raise ValueError("validation_fraction leaves no training graphs")
        ds = Dataset(labeled, self._task, {"train": sorted(order[n_val:]), "val": sorted(order[:n_val])})
        self.record_ = train_model(ds, self.model_config_, train_cfg)
        self.params_ = self.record_.params
        self.n_features_in_ = in_dim
        return self

    def _raw_outputs(self, X) -> list:
        """Per-graph network outputs: (N, out) for node tasks, (out,) for graph tasks."""
        check_is_fitted(self, "params_")
        graphs = check_graphs(X)
        cfg = self.model_config_
        if feature_widths(graphs)[0] != cfg.in_dim:
            raise ValueError(f"X has node feature width {feature_widths(graphs)[0]}, fitted on {cfg.in_dim}")
        tensors = {k: ad.Tensor(v) for k, v in self.params_.items()}
        outs = []
        with ad.no_grad():
            for start in range(0, len(graphs), self.batch_size):
                chunk = graphs[start:start + self.batch_size]
                batch = collate(chunk, [eigen_selection(g, cfg) for g in chunk], cfg)
                data = san_forward(batch, tensors, cfg).data
                for i, g in enumerate(chunk):
                    outs.append(data[i, : g.num_nodes] if cfg.task == "node-classification" else data[i])
        return outs


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class SANNodeClassifier(ClassifierMixin, _SANBase):
    """Per-node classification; ``y`` is a list of per-graph label arrays (or None)."""

    _task = "node-classification"

    def _labeled(self, graphs, y):
        labels = check_node_targets(graphs, y)
        self.classes_ = np.unique(np.concatenate(labels))
        coded = [np.searchsorted(self.classes_, lab) for lab in labels]
        return [dataclasses.replace(g, node_labels=c) for g, c in zip(graphs, coded)], len(self.classes_)

    def fit(self, X, y=None):
        return self._fit(X, y)

    def predict_proba(self, X) -> list:
        return [_softmax(z) for z in self._raw_outputs(X)]

    def predict(self, X) -> list:
        return [self.classes_[p.argmax(-1)] for p in self.predict_proba(X)]

    def score(self, X, y=None, sample_weight=None) -> float:
        """Balanced accuracy over all nodes of all graphs."""
        truth = np.concatenate(check_node_targets(check_graphs(X), y))
        return float(balanced_accuracy_score(truth, np.concatenate(self.predict(X))))


class SANGraphRegressor(RegressorMixin, _SANBase):
    _task = "graph-regression"

    def _labeled(self, graphs, y):
        targets = check_graph_targets(graphs, y)
        self._single_output = targets.ndim == 1
        targets = targets.reshape(len(graphs), -1)
        return [dataclasses.replace(g, graph_label=t) for g, t in zip(graphs, targets)], targets.shape[1]

    def fit(self, X, y=None):
        return self._fit(X, y)

    def predict(self, X) -> np.ndarray:
        out = np.stack(self._raw_outputs(X))
        return out[:, 0] if self._single_output else out


class SANGraphClassifier(ClassifierMixin, _SANBase):
    """Binary graph classification with a single logit output."""

    _task = "graph-classification"

    def _labeled(self, graphs, y):
        if y is None:
            targets = check_graph_targets(graphs, None).reshape(-1)
        else:
            # class labels may be any sortable values, not just numbers
            targets = np.asarray(y).reshape(-1)
            if len(targets) != len(graphs):
                raise ValueError(f"got {len(targets)} targets for {len(graphs)} graphs")
        self.classes_ = np.unique(targets)
        if len(self.classes_) > 2:
            raise ValueError(f"binary classifier got {len(self.classes_)} classes")
        coded = (targets == self.classes_[-1]).astype(float) if len(self.classes_) == 2 else np.zeros(len(targets))
        return [dataclasses.replace(g, graph_label=float(c)) for g, c in zip(graphs, coded)], 1

    def fit(self, X, y=None):
        return self._fit(X, y)

    def predict_proba(self, X) -> np.ndarray:
        z = np.stack(self._raw_outputs(X))[:, 0]
        p = 1.0 / (1.0 + np.exp(-z))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)[:, 1]
        return np.where(p > 0.5, self.classes_[-1], self.classes_[0])
