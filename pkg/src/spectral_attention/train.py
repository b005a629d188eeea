"""Training loop, optimizer, scheduler, losses and the gamma-sweep harness.

Random streams are split by purpose so that switching one feature on or off
never shifts another: parameter init, batch shuffling and dropout each get
their own generator, and eigenvector sign flips use a fresh generator per
``(seed, epoch, graph)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from sklearn.metrics import balanced_accuracy_score

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Dataset, Graph
from .model import (ConfigError, GraphBatch, ModelConfig, branch_masses, collate, eigen_selection,
                    init_params, san_forward)
from .spectral import random_sign_flip

GAMMA_SWEEP_DEFAULT = (0.0, 1e-3, 1e-1, 1.0, 10.0)
CSV_COLUMNS = ("epoch", "lr", "train_loss", "val_metric", "test_metric")


class TrainError(RuntimeError):
    pass


class TaskMismatchError(TrainError):
    pass


class DivergenceError(TrainError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_reduce_factor: float = 0.5
    patience: int = 10
    lr_min: float = 1e-5
    weight_decay: float = 0.0
    dropout: float = 0.0
    batch_size: int = 16
    max_epochs: int = 100
    seed: int = 0
    sign_flip_augment: bool = True
    gamma_sweep: Optional[list] = None
    stop_at_lr_min: bool = False

    def __post_init__(self):
        checks = [
            (self.lr_min <= self.lr_init, f"lr_min={self.lr_min} must not exceed lr_init={self.lr_init}"),
            (self.patience >= 1, f"patience must be at least 1, got {self.patience}"),
            (0.0 < self.lr_reduce_factor < 1.0, "lr_reduce_factor must lie in (0, 1)"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.max_epochs >= 0, "max_epochs must be non-negative"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.gamma_sweep is not None:
            self.gamma_sweep = [float(g) for g in self.gamma_sweep]
            if any(g < 0 for g in self.gamma_sweep):
                raise ConfigError("gamma_sweep values must be non-negative")

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        unknown = set(blob) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**blob)

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer and schedule ---------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    b1, b2 = betas
    t = state.t + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        g = np.asarray(grads[name], dtype=float)
        if weight_decay:
            g = g + weight_decay * p
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 10
    lr_min: float = 1e-5
    best: float = math.inf
    num_bad: int = 0
    exhausted: bool = False  # a plateau was hit while already at lr_min


def reduce_on_plateau(state: PlateauState, val_metric: float) -> float:
    """Update ``state`` with a lower-is-better value and return the new learning rate."""
    if val_metric < state.best:
        state.best = val_metric
        state.num_bad = 0
        return state.lr
    state.num_bad += 1
    if state.num_bad >= state.patience:
        if state.lr <= state.lr_min:
            state.exhausted = True
        state.lr = max(state.lr * state.factor, state.lr_min)
        state.num_bad = 0
    return state.lr


# -- losses and metrics -------------------------------------------------------


def _check_targets(task: str, preds: Tensor, targets) -> np.ndarray:
    if targets is None:
        raise TaskMismatchError(f"batch carries no labels for task {task!r}")
    targets = np.asarray(targets)
    if task == "node-classification":
        if preds.ndim != 3 or targets.shape != preds.shape[:2]:
            raise TaskMismatchError(f"node-classification needs (B, N) labels for (B, N, C) logits, "
                                    f"got {targets.shape} and {preds.shape}")
        if targets.max(initial=-1) >= preds.shape[-1]:
            raise TaskMismatchError(f"label {targets.max()} out of range for {preds.shape[-1]} classes")
    else:
        if preds.ndim != 2:
            raise TaskMismatchError(f"{task} needs (B, out) predictions, got {preds.shape}")
        targets = targets.reshape(preds.shape[0], -1)
        if targets.shape[1] != preds.shape[1]:
            raise TaskMismatchError(f"{task} target width {targets.shape[1]} != output width {preds.shape[1]}")
        if task == "graph-classification" and not np.all((targets == 0) | (targets == 1)):
            raise TaskMismatchError("graph-classification targets must be 0 or 1")
    return targets


def loss_fn(task: str, preds: Tensor, targets) -> Tensor:
    """L1 (graph regression), BCE on logits (graph classification) or
    inverse-frequency weighted CE (node classification; label -1 is padding)."""
    targets = _check_targets(task, preds, targets)
    if task == "graph-regression":
        return ad.mean(ad.abs_(preds - targets))
    if task == "graph-classification":
        # max(z, 0) - z y + log(1 + exp(-|z|))
        z = preds
        per = ad.relu(z) - z * targets + ad.log(ad.exp(-ad.abs_(z)) + 1.0)
        return ad.mean(per)
    valid = targets >= 0
    classes, counts = np.unique(targets[valid], return_counts=True)
    weight_of = np.zeros(preds.shape[-1])
    weight_of[classes] = 1.0 / counts
    w = np.where(valid, weight_of[np.where(valid, targets, 0)], 0.0)
    onehot = np.zeros(preds.shape)
    onehot[valid, targets[valid]] = 1.0
    nll = -ad.sum_(ad.log_softmax(preds, axis=-1) * onehot, axis=-1)
    return ad.sum_(nll * (w / w.sum()))


def higher_is_better(task: str) -> bool:
    return task != "graph-regression"


def metric(task: str, preds: np.ndarray, targets: np.ndarray) -> float:
    """Weighted (balanced) accuracy, accuracy, or MAE, depending on the task."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if task == "node-classification":
        valid = targets >= 0
        y_true, y_pred = targets[valid], preds.argmax(-1)[valid]
        if y_true.size == 0:
            return float("nan")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return float(balanced_accuracy_score(y_true, y_pred))
    targets = targets.reshape(preds.shape[0], -1)
    if task == "graph-classification":
        return float(np.mean((preds > 0) == (targets > 0.5)))
    return float(np.mean(np.abs(preds - targets)))


# -- records ------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_metric: float
    test_metric: float


@dataclass
class RunRecord:
    gamma: float
    model_config: dict
    train_config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = float("nan")
    test_metric: float = float("nan")
    test_loss: float = float("nan")
    final_train_loss: float = float("nan")  # last-epoch weights, eval mode, canonical signs
    non_neighbor_mass: float = float("nan")
    expected_non_neighbor_mass: float = float("nan")
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None
    params: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        last = self.epochs[-1].epoch if self.epochs else 0
        if self.best_epoch > last:
            raise TrainError(f"best epoch {self.best_epoch} is after the last epoch {last}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.epochs:
            w.writerow([r.epoch] + [format(float(getattr(r, c)), ".17g") for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self, metadata: bool = True) -> dict:
        """JSON-ready summary; wall-clock time only appears under ``metadata``."""
        out = {
            "gamma": self.gamma,
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_val_metric,
            "test_metric": self.test_metric,
            "test_loss": self.test_loss,
            "final_train_loss": self.final_train_loss,
            "non_neighbor_mass": self.non_neighbor_mass,
            "expected_non_neighbor_mass": self.expected_non_neighbor_mass,
            "checkpoint": self.checkpoint,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "epochs": [asdict(r) for r in self.epochs],
        }
        if metadata:
            out["metadata"] = {"wall_clock_s": self.wall_clock}
        return out


def write_run(record: RunRecord, out_dir, stem: str = "run") -> dict:
    """Write ``<stem>.csv``, ``<stem>.ckpt.json`` and ``<stem>.json``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{stem}.csv", "checkpoint": out_dir / f"{stem}.ckpt.json",
             "summary": out_dir / f"{stem}.json"}
    paths["csv"].write_text(record.to_csv())
    ad.save_checkpoint(record.params, paths["checkpoint"])
    record.checkpoint = paths["checkpoint"].name
    paths["summary"].write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    return paths


# -- training -----------------------------------------------------------------


def _check_task(ds: Dataset, cfg: ModelConfig) -> None:
    if ds.task is None:
        raise TaskMismatchError("dataset has no task; training needs labels")
    if ds.task != cfg.task:
        raise TaskMismatchError(f"dataset task {ds.task!r} does not match model task {cfg.task!r}")
    if ds.task == "node-classification":
        top = max((int(np.max(g.node_labels)) for g in ds.graphs if g.num_nodes), default=-1)
        if top >= cfg.out_dim:
            raise TaskMismatchError(f"node label {top} needs out_dim > {top}, model has {cfg.out_dim}")


def _batches(idx: Sequence[int], size: int) -> list:
    return [list(idx[i:i + size]) for i in range(0, len(idx), size)]


def _eval_batches(graphs, sels, idx, cfg, size) -> list:
    return [collate([graphs[i] for i in b], [sels[i] for i in b], cfg) for b in _batches(idx, size)]


def _predict(batches: Sequence[GraphBatch], params: dict, cfg: ModelConfig):
    """Concatenated predictions and targets over pre-collated batches, plus the mean loss."""
    preds, targets, total, count = [], [], 0.0, 0
    with ad.no_grad():
        for b in batches:
            out = san_forward(b, params, cfg)
            y = b.labels_for(cfg.task)
            total += loss_fn(cfg.task, out, y).item() * b.size
            count += b.size
            p, y = out.data, np.asarray(y)
            if cfg.task == "node-classification":
                # pad to a common width so batches of different N stack
                preds.append(p.reshape(-1, p.shape[-1]))
                targets.append(y.reshape(-1))
            else:
                preds.append(p)
                targets.append(y.reshape(p.shape[0], -1))
    if not count:
        return None, None, float("nan")
    return np.concatenate(preds), np.concatenate(targets), total / count


def _evaluate_batches(batches, params, cfg) -> tuple[float, float]:
    preds, targets, loss = _predict(batches, params, cfg)
    if preds is None:
        return float("nan"), float("nan")
    if cfg.task == "node-classification":
        return loss, metric(cfg.task, preds[:, None, :], targets[:, None])
    return loss, metric(cfg.task, preds, targets)


def probe_non_neighbor_mass(batch: GraphBatch, params: dict, cfg: ModelConfig) -> float:
    """Mean attention mass on added pairs, over queries that have both kinds of pair."""
    with ad.no_grad():
        _, att = san_forward(batch, params, cfg, return_attention=True)
    _, added = branch_masses(att, batch)
    both = (batch.real_mask.any(-1) & batch.added_mask.any(-1))[None, :, None, :]
    both = np.broadcast_to(both, added.shape)
    if not both.any():
        return float("nan")
    return float(np.mean(added[both]))


def _is_better(task: str, new: float, best: float) -> bool:
    if math.isnan(new):
        return False
    if math.isnan(best):
        return True
    return new > best if higher_is_better(task) else new < best


def train_model(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                log: Optional[Callable[[EpochRow], None]] = None) -> RunRecord:
    """Train on ``ds.split['train']``; select by validation metric; test with the best weights."""
    _check_task(ds, model_cfg)
    start = time.perf_counter()
    seed = train_cfg.seed
    graphs = ds.graphs
    sels = [eigen_selection(g, model_cfg) for g in graphs]
    train_idx = list(ds.split.get("train", range(len(graphs))))
    if not train_idx:
        raise TrainError("training split is empty")
    val_batches = _eval_batches(graphs, sels, ds.split.get("val", []), model_cfg, train_cfg.batch_size)
    test_batches = _eval_batches(graphs, sels, ds.split.get("test", []), model_cfg, train_cfg.batch_size)

    params = init_params(model_cfg, np.random.default_rng([seed, 0]))
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    flip = train_cfg.sign_flip_augment and model_cfg.lpe_kind != "none"
    opt = AdamState()
    sched = PlateauState(train_cfg.lr_init, train_cfg.lr_reduce_factor, train_cfg.patience, train_cfg.lr_min)

    def snapshot():
        return {k: t.data.copy() for k, t in params.items()}

    best = snapshot()
    _, best_val = _evaluate_batches(val_batches, params, model_cfg)
    best_epoch = 0
    rows = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        lr = sched.lr
        order = shuffle_rng.permutation(train_idx).tolist()
        total, count = 0.0, 0
        for bi, chunk in enumerate(_batches(order, train_cfg.batch_size)):
            if flip:
                chunk_sels = [random_sign_flip(sels[i], np.random.default_rng([seed, 3, epoch, i])) for i in chunk]
            else:
                chunk_sels = [sels[i] for i in chunk]
            batch = collate([graphs[i] for i in chunk], chunk_sels, model_cfg)
            for t in params.values():
                t.grad = None
            out = san_forward(batch, params, model_cfg, training=True, rng=dropout_rng,
                              dropout=train_cfg.dropout)
            loss = loss_fn(model_cfg.task, out, batch.labels_for(model_cfg.task))
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss {value} at epoch {epoch}, batch {bi} (lr={lr:g})")
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}
            new, opt = adam_step({k: t.data for k, t in params.items()}, grads, opt, lr,
                                 weight_decay=train_cfg.weight_decay)
            for k, t in params.items():
                t.data = new[k]
            total += value * len(chunk)
            count += len(chunk)
        val_loss, val_metric = _evaluate_batches(val_batches, params, model_cfg)
        _, test_metric = _evaluate_batches(test_batches, params, model_cfg)
        row = EpochRow(epoch, lr, total / count, val_loss, val_metric, test_metric)
        rows.append(row)
        if log is not None:
            log(row)
        if _is_better(model_cfg.task, val_metric, best_val):
            best_val, best_epoch, best = val_metric, epoch, snapshot()
        reduce_on_plateau(sched, val_loss if math.isfinite(val_loss) else row.train_loss)
        if train_cfg.stop_at_lr_min and sched.exhausted:
            break

    train_batches = _eval_batches(graphs, sels, train_idx, model_cfg, train_cfg.batch_size)
    final_train_loss, _ = _evaluate_batches(train_batches, params, model_cfg)
    for k, t in params.items():
        t.data = best[k]
    test_loss, test_metric = _evaluate_batches(test_batches, params, model_cfg)
    probe_idx = (ds.split.get("test") or ds.split.get("val") or train_idx)[: train_cfg.batch_size]
    probe = collate([graphs[i] for i in probe_idx], [sels[i] for i in probe_idx], model_cfg)
    gamma = model_cfg.effective_gamma
    return RunRecord(
        gamma=float(model_cfg.gamma),
        model_config=model_cfg.to_dict(),
        train_config=train_cfg.to_dict(),
        epochs=rows,
        best_epoch=best_epoch,
        best_val_metric=best_val,
        test_metric=test_metric,
        test_loss=test_loss,
        final_train_loss=final_train_loss,
        non_neighbor_mass=probe_non_neighbor_mass(probe, params, model_cfg),
        expected_non_neighbor_mass=gamma / (1.0 + gamma),
        wall_clock=time.perf_counter() - start,
        params=best,
    )


def gamma_sweep(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                gammas: Optional[Sequence[float]] = None) -> list:
    """One run per gamma, all from the same seed; attention is forced to ``full``."""
    gammas = train_cfg.gamma_sweep if gammas is None else gammas
    gammas = GAMMA_SWEEP_DEFAULT if gammas is None else gammas
    return [train_model(ds, replace(model_cfg, gamma=float(g), attention="full"), train_cfg) for g in gammas]


def evaluate(ds: Dataset, params: Mapping, model_cfg: ModelConfig, split: Optional[str] = None,
             batch_size: int = 16) -> dict:
    """Loss and metric of fixed parameters on one split (or every graph)."""
    _check_task(ds, model_cfg)
    tensors = {k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=float)) for k, v in params.items()}
    expected = set(init_params(model_cfg, 0))
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise ConfigError(f"checkpoint does not fit the model config (missing {missing[:3]}, extra {extra[:3]})")
    idx = ds.split.get(split, []) if split else list(range(len(ds.graphs)))
    sels = [eigen_selection(g, model_cfg) for g in ds.graphs]
    loss, value = _evaluate_batches(_eval_batches(ds.graphs, sels, idx, model_cfg, batch_size), tensors, model_cfg)
    return {"split": split or "all", "num_graphs": len(idx), "loss": loss, "metric": value}
