import json
import math

import numpy as np
import pytest

from spectral_attention import train as T
from spectral_attention.autodiff import Tensor
from spectral_attention.graph import Dataset, Graph, gen_cycle, gen_path, sbm_cluster_dataset
from spectral_attention.model import ConfigError, ModelConfig

TINY = dict(L=1, H=2, d=8, k_lpe=4, m=4, lpe_heads=2, in_dim=4, out_dim=3)


@pytest.fixture(scope="module")
def sbm():
    return sbm_cluster_dataset(6, 3, 3, num_nodes=9, num_communities=3, p_in=0.8, p_out=0.1, seed=5)


def test_first_adam_step_moves_by_lr():
    new, state = T.adam_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, T.AdamState(), lr=0.1)
    assert new["w"][0] == pytest.approx(0.9, abs=1e-7)
    assert state.t == 1


def test_adam_weight_decay_enters_the_gradient():
    new, _ = T.adam_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, T.AdamState(), lr=0.1, weight_decay=1.0)
    assert new["w"][0] == pytest.approx(1.9, abs=1e-7)


def test_plateau_reduces_after_patience_and_floors():
    s = T.PlateauState(lr=1e-3, factor=0.5, patience=2, lr_min=3e-4)
    assert T.reduce_on_plateau(s, 1.0) == 1e-3
    T.reduce_on_plateau(s, 1.0)
    assert T.reduce_on_plateau(s, 1.0) == 5e-4
    T.reduce_on_plateau(s, 2.0)
    assert T.reduce_on_plateau(s, 2.0) == 3e-4 and not s.exhausted
    T.reduce_on_plateau(s, 2.0)
    T.reduce_on_plateau(s, 2.0)
    assert s.lr == 3e-4 and s.exhausted


def test_train_config_validation():
    with pytest.raises(ConfigError):
        T.TrainConfig(lr_min=1.0, lr_init=0.1)
    with pytest.raises(ConfigError):
        T.TrainConfig(gamma_sweep=[-1.0])
    with pytest.raises(ConfigError, match="unknown"):
        T.TrainConfig.from_dict({"epochs": 3})
    assert T.TrainConfig.from_dict(T.TrainConfig().to_dict()) == T.TrainConfig()


def test_loss_values():
    zero2 = Tensor(np.zeros((1, 2, 2)))
    assert T.loss_fn("node-classification", zero2, np.array([[0, 1]])).item() == pytest.approx(math.log(2))
    bce = T.loss_fn("graph-classification", Tensor(np.zeros((3, 1))), np.array([0, 1, 1]))
    assert bce.item() == pytest.approx(math.log(2))
    l1 = T.loss_fn("graph-regression", Tensor(np.array([[1.0], [3.0]])), np.array([2.0, 2.0]))
    assert l1.item() == pytest.approx(1.0)


def test_node_loss_weights_classes_equally_and_ignores_padding():
    logits = np.zeros((1, 4, 2))
    logits[0, :, 0] = [2.0, 2.0, 2.0, 50.0]
    y = np.array([[0, 0, 1, -1]])
    lp = logits[0, :3] - np.log(np.exp(logits[0, :3]).sum(-1, keepdims=True))
    expected = 0.5 * (-lp[0, 0]) + 0.5 * (-lp[2, 1])
    assert T.loss_fn("node-classification", Tensor(logits), y).item() == pytest.approx(expected)


def test_task_mismatch_errors():
    with pytest.raises(T.TaskMismatchError):
        T.loss_fn("node-classification", Tensor(np.zeros((1, 2, 2))), None)
    with pytest.raises(T.TaskMismatchError):
        T.loss_fn("node-classification", Tensor(np.zeros((1, 2, 2))), np.array([[0, 2]]))
    with pytest.raises(T.TaskMismatchError):
        T.loss_fn("graph-classification", Tensor(np.zeros((2, 1))), np.array([0, 2]))
    with pytest.raises(T.TaskMismatchError):
        T.loss_fn("graph-regression", Tensor(np.zeros((2, 1))), np.zeros((2, 2)))


def test_balanced_accuracy_and_other_metrics():
    # always predicting the majority class scores 0.5 on two classes
    preds = np.tile([1.0, 0.0], (4, 1))[:, None, :]
    assert T.metric("node-classification", preds, np.array([[0], [0], [0], [1]])) == pytest.approx(0.5)
    assert T.metric("graph-classification", np.array([[1.0], [-1.0]]), np.array([1, 1])) == 0.5
    assert T.metric("graph-regression", np.array([[1.0], [2.0]]), np.array([0.0, 0.0])) == 1.5
    assert T.higher_is_better("node-classification") and not T.higher_is_better("graph-regression")


def test_training_is_deterministic_and_records_are_consistent(sbm):
    cfg = ModelConfig(**TINY)
    tc = T.TrainConfig(max_epochs=3, batch_size=4, lr_init=5e-3, dropout=0.1)
    a, b = T.train_model(sbm, cfg, tc), T.train_model(sbm, cfg, tc)
    assert a.to_csv() == b.to_csv()
    assert json.dumps(a.summary(metadata=False)) == json.dumps(b.summary(metadata=False))
    assert [r.epoch for r in a.epochs] == [1, 2, 3]
    assert 0 <= a.best_epoch <= 3
    assert a.to_csv().splitlines()[0] == ",".join(T.CSV_COLUMNS)
    assert a.non_neighbor_mass == pytest.approx(0.5, abs=1e-12)
    c = T.train_model(sbm, cfg, T.TrainConfig(max_epochs=3, batch_size=4, lr_init=5e-3, dropout=0.1, seed=1))
    assert c.to_csv() != a.to_csv()


def test_sign_flips_do_not_touch_edge_lpe_training(sbm):
    cfg = ModelConfig(**{**TINY, "lpe_kind": "edge"})
    on = T.train_model(sbm, cfg, T.TrainConfig(max_epochs=2, batch_size=4, sign_flip_augment=True))
    off = T.train_model(sbm, cfg, T.TrainConfig(max_epochs=2, batch_size=4, sign_flip_augment=False))
    assert on.to_csv().split("\n")[1:] == off.to_csv().split("\n")[1:]


def test_sign_flips_change_node_lpe_training(sbm):
    cfg = ModelConfig(**TINY)
    on = T.train_model(sbm, cfg, T.TrainConfig(max_epochs=2, batch_size=4, sign_flip_augment=True))
    off = T.train_model(sbm, cfg, T.TrainConfig(max_epochs=2, batch_size=4, sign_flip_augment=False))
    assert on.to_csv() != off.to_csv()


def test_zero_epochs_keeps_initial_weights(sbm):
    rec = T.train_model(sbm, ModelConfig(**TINY), T.TrainConfig(max_epochs=0))
    assert rec.epochs == [] and rec.best_epoch == 0


def test_stop_at_lr_min(sbm):
    # frozen weights plateau at once, and the floor is already reached
    tc = T.TrainConfig(max_epochs=50, patience=1, lr_init=0.0, lr_min=0.0, stop_at_lr_min=True)
    rec = T.train_model(sbm, ModelConfig(**TINY), tc)
    assert len(rec.epochs) == 2


def test_divergence_is_reported(sbm, monkeypatch):
    monkeypatch.setattr(T, "loss_fn", lambda task, p, y: T.ad.sum_(p * float("nan")))
    with pytest.raises(T.DivergenceError, match="epoch 1"):
        T.train_model(sbm, ModelConfig(**TINY), T.TrainConfig(max_epochs=1))


def test_task_checks(sbm):
    with pytest.raises(T.TaskMismatchError):
        T.train_model(sbm, ModelConfig(**{**TINY, "task": "graph-regression"}), T.TrainConfig(max_epochs=1))
    with pytest.raises(T.TaskMismatchError, match="out_dim"):
        T.train_model(sbm, ModelConfig(**{**TINY, "out_dim": 2}), T.TrainConfig(max_epochs=1))
    with pytest.raises(T.TaskMismatchError):
        T.train_model(Dataset([gen_cycle(3)]), ModelConfig(**TINY), T.TrainConfig(max_epochs=1))


def test_graph_regression_training_runs():
    graphs = [Graph(n, gen_path(n).edges, graph_label=float(n)) for n in range(2, 10)]
    ds = Dataset(graphs, "graph-regression", {"train": list(range(6)), "val": [6], "test": [7]})
    cfg = ModelConfig(**{**TINY, "in_dim": 1, "out_dim": 1, "task": "graph-regression"})
    rec = T.train_model(ds, cfg, T.TrainConfig(max_epochs=2, batch_size=3))
    assert math.isfinite(rec.test_metric) and rec.best_val_metric >= 0


def test_gamma_sweep_masses(sbm):
    cfg = ModelConfig(**{**TINY, "attention": "sparse"})
    recs = T.gamma_sweep(sbm, cfg, T.TrainConfig(max_epochs=1, batch_size=4), [0.0, 0.1, 10.0])
    assert [r.gamma for r in recs] == [0.0, 0.1, 10.0]
    for r in recs:
        assert r.model_config["attention"] == "full"
        assert abs(r.non_neighbor_mass - r.gamma / (1 + r.gamma)) < 1e-12


def test_write_run_and_evaluate(sbm, tmp_path):
    cfg = ModelConfig(**TINY)
    rec = T.train_model(sbm, cfg, T.TrainConfig(max_epochs=1, batch_size=4))
    paths = T.write_run(rec, tmp_path, "r")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["r.ckpt.json", "r.csv", "r.json"]
    summary = json.loads(paths["summary"].read_text())
    assert summary["checkpoint"] == "r.ckpt.json" and "wall_clock_s" in summary["metadata"]
    params = T.ad.load_checkpoint(paths["checkpoint"])
    res = T.evaluate(sbm, params, cfg, "test", batch_size=4)
    assert res["metric"] == pytest.approx(rec.test_metric) and res["num_graphs"] == 3
    with pytest.raises(ConfigError, match="checkpoint"):
        T.evaluate(sbm, params, ModelConfig(**{**TINY, "lpe_kind": "none"}), "test")


def test_best_epoch_must_exist():
    with pytest.raises(T.TrainError):
        T.RunRecord(gamma=1.0, model_config={}, train_config={}, best_epoch=2)
