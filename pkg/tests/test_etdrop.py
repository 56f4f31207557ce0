import numpy as np
import pytest

from memloc import data as D
from memloc import etdrop as E
from memloc import model as M
from memloc.trainer import TrainConfig, train

CFG = TrainConfig(epochs=3, batch_size=16, peak_epoch=1)


@pytest.fixture(scope="module")
def ds():
    return D.inject_label_noise(D.synth_clusters(4, 20, 12, 4.0, seed=2, test_per_class=5), 0.2, seed=2)


@pytest.fixture(scope="module")
def spec():
    return M.ModelSpec.mlp(12, [8, 8], 4)


def test_no_mem_units_means_before_equals_after(ds, spec):
    # floor(0.05 * 8) = 0 memorization units per layer
    out = E.run_etdrop(ds, spec, 0.5, 0.05, CFG)
    assert out.before == out.after
    m, drop = out.model, out.dropout
    ids = np.arange(len(ds))
    assert np.array_equal(m.predict(ds.inputs, dropout=drop, ids=ids), m.predict(ds.inputs, dropout=drop, drop_mem=True))


def test_outcome_ranges_and_test_always_drop_mem(ds, spec):
    out = E.run_etdrop(ds, spec, 0.4, 0.2, CFG)
    for side in (out.before, out.after):
        assert all(0 <= v <= 1 for v in side.values())
    assert out.before["test"] == out.after["test"]
    assert set(out.to_dict()) == {"config", "before_drop", "after_drop"}


def test_bad_fractions_propagate(ds, spec):
    with pytest.raises(ValueError):
        E.run_etdrop(ds, spec, 0.8, 0.4, CFG)


def test_grid_cells_complete_and_isolated(ds, spec):
    g = E.run_grid(ds, spec, [0.4, 0.5], [0.1, 0.2], CFG, base_seed=3)
    assert len(g) == 4 and set(g.cells) == {(pm, pg) for pm in (0.1, 0.2) for pg in (0.4, 0.5)}
    alone = E.run_grid(ds, spec, [0.5], [0.2], CFG, base_seed=3)
    assert alone[(0.2, 0.5)] == g[(0.2, 0.5)]


def test_grid_two_by_six_has_twelve_cells(ds, spec):
    cfg = TrainConfig(epochs=0)
    g = E.run_grid(ds, spec, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.1, 0.2], cfg)
    assert len(g) == 12


def test_failed_cell_is_marked_and_grid_continues(ds, spec):
    g = E.run_grid(ds, spec, [0.4, 0.95], [0.1], TrainConfig(epochs=0))
    assert g[(0.1, 0.95)].failed and not g[(0.1, 0.4)].failed


def test_grid_parallel_matches_serial(ds, spec):
    a = E.run_grid(ds, spec, [0.4], [0.1, 0.2], CFG)
    b = E.run_grid(ds, spec, [0.4], [0.1, 0.2], CFG, jobs=2)
    assert a.cells == b.cells


def test_cell_seed_depends_only_on_cell():
    assert E.cell_seed(0, 0.1, 0.4) == E.cell_seed(0, 0.1, 0.4)
    assert E.cell_seed(0, 0.1, 0.4) != E.cell_seed(0, 0.4, 0.1)


def test_zero_dropout_baseline_equals_plain_training(ds, spec):
    a = M.build_model(spec, seed=0)
    train(a, ds, CFG, evaluate_curves=False)
    b = M.build_model(spec, seed=0)
    train(b, ds, TrainConfig(**{**CFG.__dict__, "dropout": M.StandardDropout(0.0)}), evaluate_curves=False)
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)


def test_baselines_arms(ds, spec):
    recs = E.run_baselines(ds, spec, 0.4, CFG)
    assert [r.arm for r in recs] == ["standard_dropout", "static_sparse"]
    assert all(0 <= r.noisy_acc <= 1 for r in recs)


def test_forgotten_report_accounting_identity(ds, spec):
    out = E.run_etdrop(ds, spec, 0.4, 0.2, TrainConfig(epochs=6, batch_size=8, peak_epoch=2))
    rep = E.forgotten_clean_report(out, ds)
    assert rep == E.forgotten_clean_report(out, ds)
    m, drop, ids = out.model, out.dropout, ds.clean_ids
    y = ds.training_labels[ids]
    before = m.predict(ds.inputs[ids], dropout=drop, ids=ids).argmax(axis=1) == y
    after = m.predict(ds.inputs[ids], dropout=drop, drop_mem=True).argmax(axis=1) == y
    assert len(rep) == int((before & ~after).sum())
    # exact when nothing goes wrong -> right
    if not (~before & after).any():
        assert len(rep) == round(len(ids) * (out.before["clean"] - out.after["clean"]))
    assert all(f.label != f.predicted_after for f in rep)


def test_forgotten_report_empty_when_clean_perfect(ds, spec):
    out = E.run_etdrop(ds, spec, 0.5, 0.05, CFG)
    if out.after["clean"] == 1.0:
        assert E.forgotten_clean_report(out, ds) == []
    out.model = None
    with pytest.raises(ValueError):
        E.forgotten_clean_report(out, ds)
