import numpy as np
import pytest

from memloc import data as D
from memloc import model as M
from memloc.checkpoint import CheckpointError, CheckpointStore, IncompatibleCheckpoint, load_checkpoint, save_checkpoint
from memloc.trainer import EMPTY, TrainConfig, TrainingDiverged, evaluate, train


def small(ds, hidden=(16, 16), norm=False, seed=0, dtype="f32"):
    return M.build_model(M.ModelSpec.mlp(ds.inputs.shape[1], list(hidden), ds.num_classes, norm=norm), seed, dtype)


def test_epoch_zero_run_keeps_init(toy_ds, tmp_path):
    m = small(toy_ds)
    init = {k: v.copy() for k, v in m.params.items()}
    store = CheckpointStore(tmp_path, m.spec)
    _, _, curves = train(m, toy_ds, TrainConfig(epochs=0), store=store)
    assert store.epochs() == [0] and len(curves) == 1
    assert all(np.array_equal(store.tensors(0)[k], init[k]) for k in init)


def test_curves_length_and_epoch0_is_init(toy_ds, tmp_path):
    m = small(toy_ds, seed=2)
    init = {k: v.copy() for k, v in m.params.items()}
    store = CheckpointStore(tmp_path, m.spec)
    _, _, curves = train(m, toy_ds, TrainConfig(epochs=4, batch_size=16), store=store)
    assert len(curves) == 5 and store.epochs() == list(range(5))
    assert all(np.array_equal(store.tensors(0)[k], init[k]) for k in init)
    assert curves.rows[0]["lr"] is None and curves.rows[-1]["lr"] > 0


def test_freeze_everything_is_noop(toy_ds):
    m = small(toy_ds, norm=True)
    state = {k: v.copy() for k, v in m.state().items()}
    train(m, toy_ds, TrainConfig(epochs=2, batch_size=16, freeze=range(m.n_layers)), evaluate_curves=False)
    assert all(np.array_equal(m.state()[k], state[k]) for k in state)


def test_frozen_layer_params_unchanged_but_bn_may_update(toy_ds):
    m = small(toy_ds, norm=True)
    w0 = m.params["l0.weight"].copy()
    rm0 = m.buffers["l0.running_mean"].copy()
    train(m, toy_ds, TrainConfig(epochs=1, batch_size=16, freeze={0}, bn_update_frozen=True), evaluate_curves=False)
    assert np.array_equal(m.params["l0.weight"], w0)
    assert not np.array_equal(m.buffers["l0.running_mean"], rm0)


def test_unknown_freeze_layer(toy_ds):
    with pytest.raises(ValueError):
        train(small(toy_ds), toy_ds, TrainConfig(epochs=1, freeze={7}))


def test_train_ids_restrict_batches(toy_ds):
    log = []
    ids = toy_ds.clean_ids
    train(small(toy_ds), toy_ds, TrainConfig(epochs=2, batch_size=8), train_ids=ids, id_log=log,
          evaluate_curves=False)
    seen = np.concatenate(log)
    assert set(seen) == set(ids) and len(seen) == 2 * len(ids)


def test_divergence_reports_epoch_and_batch(toy_ds):
    m = small(toy_ds)
    with pytest.raises(TrainingDiverged, match=r"epoch 1, batch \d+"), np.errstate(all="ignore"):
        train(m, toy_ds, TrainConfig(epochs=3, batch_size=8, peak_lr=1e12, peak_epoch=1), evaluate_curves=False)


def test_training_is_deterministic(toy_ds):
    a, b = small(toy_ds, seed=5), small(toy_ds, seed=5)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4, dropout=M.StandardDropout(0.3))
    _, _, ca = train(a, toy_ds, cfg)
    _, _, cb = train(b, toy_ds, cfg)
    assert ca.rows == cb.rows
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_evaluate_markers_and_chance():
    ds = D.from_arrays(np.eye(10, dtype=np.float32).repeat(10, axis=0), np.arange(100) // 10, 10)
    m = M.build_model(M.ModelSpec.mlp(10, [4], 10))
    assert evaluate(m, ds, "probe") is EMPTY or evaluate(m, ds, "probe").empty
    m.params["l1.weight"][:] = 0  # constant predictor
    m.params["l1.bias"][:] = 0
    m.params["l1.bias"][3] = 1
    s = evaluate(m, ds, "clean")
    assert s.accuracy == pytest.approx(0.1) and s == evaluate(m, ds, "clean")
    assert evaluate(m, ds, "test").empty


def test_evaluate_perfect_predictor():
    ds = D.from_arrays(np.eye(4, dtype=np.float32), np.arange(4), 4)
    spec = M.ModelSpec((4,), 4, [M.LayerSpec("dense", 4, act=None)])
    m = M.build_model(spec)
    m.params["l0.weight"] = np.eye(4, dtype=np.float32) * 10
    assert evaluate(m, ds, "all").accuracy == 1.0


def test_memorizing_regime_on_synthetic_clusters():
    base = D.synth_clusters(10, 100, 64, 6.0, seed=0)
    ds = D.inject_label_noise(base, 0.1, seed=0)
    m = M.build_model(M.ModelSpec.mlp(64, [256, 256, 256], 10), seed=0)
    _, _, c = train(m, ds, TrainConfig(epochs=30, batch_size=128))
    assert c.rows[-1]["clean_acc"] > 0.95 and c.rows[-1]["probe_acc"] > 0.9


# -- checkpoints


def test_checkpoint_roundtrip_bitwise(toy_ds, tmp_path):
    m = small(toy_ds, norm=True, dtype="f64")
    train(m, toy_ds, TrainConfig(epochs=1, batch_size=16), evaluate_curves=False)
    store = CheckpointStore(tmp_path, m.spec)
    save_checkpoint(store, m, 7)
    back = load_checkpoint(store, 7)
    assert back.dtype == np.float64
    assert all(np.array_equal(back.state()[k], m.state()[k]) for k in m.state())
    assert list(back.state()) == list(m.state())


def test_checkpoint_errors(toy_ds, tmp_path):
    m = small(toy_ds)
    store = CheckpointStore(tmp_path, m.spec)
    with pytest.raises(CheckpointError):
        store.load(3)
    store.save(m, 0)
    with pytest.raises(CheckpointError):
        store.save(m, 0)
    other = CheckpointStore(tmp_path, small(toy_ds, hidden=(16, 8)).spec)
    with pytest.raises(IncompatibleCheckpoint):
        other.load(0)
    with pytest.raises(IncompatibleCheckpoint):
        store.save(small(toy_ds, hidden=(16, 8)), 1)


def test_param_digest_differs_across_seeds(toy_ds, tmp_path):
    a, b = small(toy_ds, seed=0), small(toy_ds, seed=1)
    sa = CheckpointStore(tmp_path / "a", a.spec).save(a, 0)
    sb = CheckpointStore(tmp_path / "b", b.spec).save(b, 0)
    assert sa["param_digest"] != sb["param_digest"] and sa["spec_digest"] == sb["spec_digest"]


def test_no_partial_files_left(toy_ds, tmp_path):
    m = small(toy_ds)
    CheckpointStore(tmp_path, m.spec).save(m, 0)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest_0.json", "weights_0.bin"]
