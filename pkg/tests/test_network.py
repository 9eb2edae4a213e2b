import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
from autograd import ParamStore
from config import ConfigError, NetConfig
from gradcheck import STEPS, grad_check, network_problem, run_check
from network import (
    ablation_ladder,
    build,
    count_flops,
    count_params,
    describe,
    describe_ladder,
    forward,
    from_store,
    predict,
)
from tensor import ShapeError

TINY = NetConfig(base_channels=8, depths=(1, 1, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(5)


class TestBuild:

    def test_same_seed_same_parameters(self):
        a, _ = build(TINY, seed=3)
        b, _ = build(TINY, seed=3)
        assert a.names() == b.names()
        for name in a.names():
            np.testing.assert_array_equal(a.value(name), b.value(name))

    def test_different_seed_differs(self):
        a, _ = build(TINY, seed=3)
        b, _ = build(TINY, seed=4)
        assert not np.array_equal(a.value("stem.w"), b.value("stem.w"))

    def test_default_dtype(self):
        store, _ = build(TINY)
        assert isinstance(store, ParamStore)
        assert store.dtype == np.float32

    def test_widths_and_multiple(self):
        _, net = build(TINY)
        assert net.widths == [8, 16, 32]
        assert net.multiple == 4

    def test_parameter_names(self):
        store, _ = build(TINY)
        names = store.names()
        assert names[0] == "stem.w"
        assert "down1.w" in names and "down2.w" in names
        assert "level2.block.0.mlp.project.w" in names
        assert "cmim0.alpha" in names and "cmim1.alpha" in names
        assert "fuse0.alpha" in names
        assert names[-2:] == ["head.w", "head.b"]
        assert not any(name.startswith("decoder") for name in names)

    def test_baseline_topology(self):
        label, cfg = ablation_ladder()[0]
        store, net = build(cfg)
        names = store.names()
        assert label == "Baseline"
        assert net.cmims == ()
        assert "decoder0.block.0.partial.w" in names
        assert "fuse0.fuse.w" in names
        assert store.value("head.w").shape == (3, 8, 3, 3)


class TestForward:

    def test_batch_shape(self, rng):
        _, net = build(TINY)
        out = forward(net, rng.uniform(size=(2, 3, 64, 64)))
        assert out.shape == (2, 3, 64, 64)
        assert out.value.dtype == np.float32

    def test_odd_size_is_padded_and_cropped(self, rng):
        _, net = build(TINY, zero_init=False)
        assert forward(net, rng.uniform(size=(1, 3, 50, 50))).shape == (1, 3, 50, 50)

    def test_identity_at_init(self, rng):
        _, net = build(TINY)
        hazy = rng.uniform(size=(1, 3, 32, 48)).astype(np.float32)
        assert np.max(np.abs(forward(net, hazy).value - hazy)) < 1e-6

    def test_not_identity_without_soft_residual(self, rng):
        _, net = build(NetConfig(base_channels=8, depths=(1, 1, 1), src=False))
        hazy = rng.uniform(size=(1, 3, 16, 16))
        assert np.max(np.abs(forward(net, hazy).value - hazy)) > 1e-3

    def test_rejects_non_rgb(self):
        _, net = build(TINY)
        with pytest.raises(ShapeError):
            forward(net, np.zeros((1, 4, 16, 16)))

    def test_predict_single_image_is_clipped(self, rng):
        _, net = build(TINY, zero_init=False)
        out = predict(net, rng.uniform(size=(3, 20, 24)))
        assert out.shape == (3, 20, 24)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_every_ablation_rung_runs(self, rng):
        hazy = rng.uniform(size=(1, 3, 16, 16))
        for _, cfg in ablation_ladder():
            _, net = build(cfg, zero_init=False)
            assert forward(net, hazy).shape == (1, 3, 16, 16)


class TestFromStore:

    def test_round_trip(self, rng):
        store, net = build(TINY, seed=9, zero_init=False)
        rebuilt = from_store(TINY, store)
        hazy = rng.uniform(size=(1, 3, 16, 16))
        np.testing.assert_array_equal(forward(rebuilt, hazy).value, forward(net, hazy).value)

    def test_mismatched_config(self):
        store, _ = build(TINY)
        with pytest.raises(ConfigError):
            from_store(NetConfig(base_channels=8, depths=(1, 1, 1), cmim=False), store)

    def test_wrong_shapes(self):
        store, _ = build(NetConfig(base_channels=12, depths=(1, 1, 1)))
        with pytest.raises(ShapeError):
            from_store(TINY, store)


class TestCost:

    def test_describe_total_matches_store(self):
        _, net = build(TINY)
        table = describe(net, (64, 64))
        assert list(table.columns) == ["name", "kind", "shape", "params", "flops"]
        assert int(table["params"].sum()) == count_params(net)

    def test_params_do_not_depend_on_input_size(self):
        small, large = describe(TINY, (32, 32)), describe(TINY, (256, 512))
        assert small["params"].sum() == large["params"].sum()
        assert large["flops"].sum() > small["flops"].sum()

    def test_count_flops_matches_table(self):
        _, net = build(TINY)
        assert count_flops(net, (64, 64)) == int(describe(net, (64, 64))["flops"].sum())

    def test_stem_row(self):
        row = describe(TINY, (64, 64)).iloc[0]
        assert row["name"] == "stem"
        assert row["params"] == 3 * 8 * 9 + 8
        assert row["flops"] == 2 * 9 * 3 * 8 * 64 * 64

    def test_ladder_deltas(self):
        table = describe_ladder(8, (1, 1, 1), (64, 64))
        assert list(table["rung"]) == ["Baseline", "+EDF", "+ITFM", "+CMIM", "+MPEB", "+SRC"]
        assert list(table["delta_params"]) == [0, -1538, 1770, 4154, 532, 73]

    def test_ladder_ends_at_full_model(self):
        label, cfg = ablation_ladder()[-1]
        assert label == "+SRC"
        assert (cfg.block, cfg.fusion, cfg.cmim, cfg.src, cfg.edf) == ("mpeb", "itfm", True, True, True)


class TestNetworkGradient:

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_tiny_network(self, seed):
        assert run_check("network", seed)["max_rel_err"] < 1e-4

    @pytest.mark.slow
    def test_dense_sampling_holds_tolerance(self):
        rng = np.random.default_rng(0)
        store, f = network_problem(rng)
        assert grad_check(f, store, step=STEPS["network"], max_coords=24, rng=rng) < 1e-4
