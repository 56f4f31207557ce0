import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from memloc import model as M
from memloc import tensor as T
from memloc.data import ProbeDataset, synth_clusters
from memloc.trainer import TrainConfig, train


def mlp(hidden=(8, 8), d=6, c=3, seed=0, dtype="f64"):
    return M.build_model(M.ModelSpec.mlp(d, list(hidden), c), seed=seed, dtype=dtype)


def cnn(dtype="f64"):
    spec = M.ModelSpec((1, 8, 8), 3, [
        M.LayerSpec("conv", 4, pad=1, norm=True, pool="max"),
        M.LayerSpec("conv", 6, pad=1, pool="max"),
        M.LayerSpec("dense", 3, act=None),
    ])
    return M.build_model(spec, seed=0, dtype=dtype)


def test_same_seed_bitwise_identical():
    a, b = mlp(seed=4), mlp(seed=4)
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    assert not np.array_equal(a.params["l0.weight"], mlp(seed=5).params["l0.weight"])


def test_mlp_parameter_count():
    # (784*256 + 256) + (256*256 + 256) + (256*10 + 10)
    m = M.build_model(M.ModelSpec.mlp(784, [256, 256], 10))
    assert m.n_params() == 269_322


def test_unit_counts():
    assert len(M.list_units(M.build_model(M.ModelSpec.mlp(784, [256], 10)))) == 266
    spec = M.ModelSpec((3, 8, 8), 10, [M.LayerSpec("conv", 16, pad=1), M.LayerSpec("conv", 32, pad=1),
                                       M.LayerSpec("dense", 10, act=None)])
    units = M.list_units(M.build_model(spec))
    assert len(units) == 58 and sum(1 for l, _ in units if l == 0) == 16


def test_list_units_stable_across_processes():
    code = ("from memloc import model as M; "
            "print(M.list_units(M.build_model(M.ModelSpec.mlp(5, [3, 4], 2))))")
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_spec_validation():
    with pytest.raises(M.SpecError):
        M.ModelSpec((4,), 3, [M.LayerSpec("dense", 5)])  # head width != classes
    with pytest.raises(M.SpecError):
        M.ModelSpec((4,), 3, [M.LayerSpec("dense", 5, act=None), M.LayerSpec("dense", 3, act=None)])
    with pytest.raises(M.SpecError):
        M.ModelSpec((1, 2, 2), 3, [M.LayerSpec("conv", 4, kernel=3), M.LayerSpec("dense", 3, act=None)])


def test_spec_roundtrip_and_digest_ignores_seed():
    s = M.ModelSpec.small_cnn((1, 28, 28), 10, seed=3)
    assert M.ModelSpec.from_dict(s.to_dict()) == s
    assert s.digest() == M.ModelSpec.small_cnn((1, 28, 28), 10, seed=9).digest()
    assert s.digest() != M.ModelSpec.small_cnn((1, 28, 28), 10, channels=(16, 64)).digest()


def test_groups_partition_layers():
    s = M.ModelSpec((4,), 2, [M.LayerSpec("dense", 3, group="a"), M.LayerSpec("dense", 3, group="a"),
                              M.LayerSpec("dense", 2, act=None)])
    assert s.layers_in_group("a") == [0, 1] and s.layers_in_group("layer2") == [2]


def test_all_ones_gates_identity():
    m = cnn()
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
    assert np.array_equal(m.forward(x).data, m.forward(x, gates=M.GateSet.ones(m)).data)


def test_gate_length_mismatch():
    m = mlp()
    with pytest.raises(T.ShapeError):
        m.forward(np.ones((1, 6)), gates=[np.ones(8), np.ones(3)])


def test_zero_unit_idempotent_and_invalid():
    m = mlp()
    g1 = M.zero_unit(M.GateSet.ones(m), (0, 2))
    assert all(np.array_equal(a, b) for a, b in zip(g1.gates, M.zero_unit(g1, (0, 2)).gates))
    assert g1.zeroed_units() == [(0, 2)]
    with pytest.raises(IndexError):
        M.zero_unit(g1, (0, 99))


def test_zeroing_dead_unit_keeps_logits():
    m = mlp()
    x = np.random.default_rng(1).standard_normal((1, 6))
    h = np.maximum(x @ m.params["l0.weight"] + m.params["l0.bias"], 0)
    dead = int(np.flatnonzero(h[0] == 0)[0]) if (h == 0).any() else None
    if dead is None:
        m.params["l0.bias"][0] = -1e3
        dead = 0
    g = M.zero_unit(M.GateSet.ones(m), (0, dead))
    assert np.array_equal(m.forward(x).data, m.forward(x, gates=g).data)


def test_zeroing_conv_channel_zeroes_feature_map():
    m = cnn()
    x = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
    seen = {}
    orig = T.max_pool2d

    def spy(h):
        seen.setdefault("first", h.data.copy())
        return orig(h)

    T.max_pool2d, saved = spy, T.max_pool2d
    try:
        m.forward(x, gates=M.zero_unit(M.GateSet.ones(m), (0, 1)))
    finally:
        T.max_pool2d = saved
    assert np.all(seen["first"][:, 1] == 0) and np.any(seen["first"][:, 0] != 0)


# -- example-tied dropout


def test_etdrop_gen_count_on_64_channels():
    d = M.ExampleTiedDropout(0.4, 0.1, 10)
    assert d.mask(0, 64, drop_mem=True).sum() == 25


@given(U=st.integers(1, 300), p_gen=st.floats(0.05, 0.9), p_mem=st.floats(0.0, 0.1),
       seed=st.integers(0, 2**32), layer=st.integers(0, 5))
def test_etdrop_set_invariants(U, p_gen, p_mem, seed, layer):
    d = M.ExampleTiedDropout(p_gen, p_mem, 50, seed=seed)
    gen, pool = d.gen_set(layer, U), d.mem_pool(layer, U)
    assert len(gen) == int(np.floor(p_gen * U + 1e-9))
    assert not set(gen) & set(pool) and len(gen) + len(pool) == U
    mem = d.mem_sets(layer, U, np.arange(50))
    n_mem = d.counts(U)[1]
    assert mem.shape == (50, n_mem if pool.size else 0)
    for row in mem:
        assert len(set(row)) == len(row) and set(row) <= set(pool)
    np.testing.assert_array_equal(mem, d.mem_sets(layer, U, np.arange(50)))


def test_etdrop_same_id_same_mask_and_eval_gen_only():
    d = M.ExampleTiedDropout(0.4, 0.2, 10, seed=7)
    a = d.mask(1, 20, ids=[3, 3, 4])
    assert np.array_equal(a[0], a[1]) and a.sum(axis=1).tolist() == [12, 12, 12]
    gen = d.mask(1, 20, drop_mem=True)
    assert np.all(a >= gen)


def test_etdrop_forward_needs_ids():
    m = mlp()
    with pytest.raises(ValueError):
        m.forward(np.ones((2, 6)), dropout=M.ExampleTiedDropout(0.4, 0.1, 5))


def test_etdrop_bad_fractions():
    for pg, pm in [(0, 0.1), (0.8, 0.3), (0.4, -0.1)]:
        with pytest.raises(ValueError):
            M.ExampleTiedDropout(pg, pm, 5)


# -- sparse masks, reinit


@given(keep=st.floats(0.05, 1.0), seed=st.integers(0, 1000))
def test_sparse_mask_fraction(keep, seed):
    m = mlp()
    mask = M.StaticSparseMask.random(m, keep, seed)
    for n, a in mask.masks.items():
        assert abs(a.mean() - keep) <= 1.0 / a.size + 1e-12


def _tiny_ds():
    return synth_clusters(3, 10, 6, 3.0, seed=0)


def test_sparse_mask_persists_through_training():
    ds = _tiny_ds()
    m = M.apply_sparse_mask(mlp(), M.StaticSparseMask.random(mlp(), 0.4, 1))
    train(m, ds, TrainConfig(epochs=3, batch_size=8), evaluate_curves=False)
    for n, a in m.sparse.masks.items():
        assert np.all(m.params[n][~a] == 0)
        assert abs((m.params[n] != 0).mean() - 0.4) < 0.05


def test_sparse_keep_one_equals_unmasked():
    ds = _tiny_ds()
    a = mlp()
    b = M.apply_sparse_mask(mlp(), M.StaticSparseMask.random(mlp(), 1.0, 0))
    cfg = TrainConfig(epochs=2, batch_size=8)
    train(a, ds, cfg, evaluate_curves=False)
    train(b, ds, cfg, evaluate_curves=False)
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)


def test_sparse_mask_shape_mismatch():
    bad = M.StaticSparseMask(0.5, {"l0.weight": np.ones((2, 2), dtype=bool)})
    with pytest.raises(T.ShapeError):
        M.apply_sparse_mask(mlp(), bad)


def test_reinit_identity_and_locality():
    m = mlp(hidden=(8, 8, 8))
    same = M.reinit_layer(m, 1, m.params)
    assert all(np.array_equal(same.params[n], m.params[n]) for n in m.params)
    other = mlp(hidden=(8, 8, 8), seed=9)
    r = M.reinit_layer(m, 1, other.params)
    for n in m.params:
        expect = other.params[n] if n.startswith("l1.") else m.params[n]
        assert np.array_equal(r.params[n], expect), n
    with pytest.raises(T.ShapeError):
        M.reinit_layer(m, 1, {"l1.weight": np.ones((2, 2)), "l1.bias": np.ones(2)})


def test_bn_train_updates_running_stats_and_eval_does_not():
    m = cnn()
    x = np.random.default_rng(0).standard_normal((4, 1, 8, 8)) * 3 + 1
    before = m.buffers["l0.running_mean"].copy()
    m.forward(x, mode="eval")
    assert np.array_equal(before, m.buffers["l0.running_mean"])
    m.forward(x, mode="train")
    assert not np.array_equal(before, m.buffers["l0.running_mean"])


def test_predict_chunks_match_single_pass():
    m = cnn()
    x = np.random.default_rng(3).standard_normal((7, 1, 8, 8))
    np.testing.assert_allclose(m.predict(x, batch=3), m.forward(x).data, rtol=1e-12, atol=1e-12)
