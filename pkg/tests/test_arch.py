import math

import numpy as np
import pytest

from pdunet.arch import (MODEL_NAMES, Model, NetSpec, ResidualBlock, build,
                         parse_netspec)
from pdunet.errors import ConfigError, ShapeError
from pdunet.layers import softmax_xent
from pdunet.tensor import Tensor

from helpers import check_gradients_sampled


class TestNetSpec:
    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            NetSpec("unet_bigger")

    @pytest.mark.parametrize("kwargs", [
        dict(base_width=0), dict(classes=1), dict(input_size=100),
        dict(input_size=0), dict(in_channels=0)])
    def test_bad_fields(self, kwargs):
        with pytest.raises(ConfigError):
            NetSpec("unet_baseline", **kwargs)

    def test_widths_double(self):
        spec = NetSpec("unet_progressive", base_width=32)
        assert spec.widths == (32, 64, 128, 256)
        assert spec.bridge_width == 512

    def test_progressive_blocks(self):
        for blk in NetSpec("unet_progressive").blocks():
            assert blk.dilations == (1, 2, 4)

    def test_dilated_head_blocks(self):
        dils = [blk.dilations for blk in NetSpec("unet_dilated").blocks()]
        assert dils == [(1, 1, 1), (2, 1, 1), (4, 1, 1), (8, 1, 1)]

    def test_baseline_blocks(self):
        for blk in NetSpec("unet_baseline").blocks():
            assert blk.dilations == (1, 1, 1)

    def test_original_blocks_two_convs(self):
        for blk in NetSpec("unet_original").blocks():
            assert blk.dilations == (1, 1)

    def test_conv_layer_counts(self):
        counts = NetSpec("unet_progressive").conv_layer_counts()
        assert counts == {"encoder": 16, "bridge": 4, "decoder": 17}
        counts = NetSpec("unet_original").conv_layer_counts()
        assert counts == {"encoder": 8, "bridge": 2, "decoder": 13}

    def test_rf_path_segments(self):
        rows = NetSpec("unet_progressive").rf_path()
        assert len(rows) == 20
        assert [seg for *_, seg in rows].count("encoder") == 16
        assert rows[-1][0] == "bridge.res.conv2"
        rows = NetSpec("unet_original").rf_path()
        assert sum(1 for label, *_ in rows if label.endswith(".pool")) == 4
        assert all(seg != "residual" for *_, seg in rows)


class TestParseNetspec:
    def test_round_trip(self):
        spec = parse_netspec(
            "# tiny run\n"
            "name = unet_progressive\n"
            "base_width = 8   # desk scale\n"
            "classes=4\n"
            "\n"
            "input_size = 64\n")
        assert spec.name == "unet_progressive"
        assert spec.base_width == 8
        assert spec.classes == 4
        assert spec.input_size == 64

    def test_defaults_apply(self):
        spec = parse_netspec("name = unet_baseline\n")
        assert spec.base_width == 32
        assert spec.input_size == 128

    @pytest.mark.parametrize("text", [
        "base_width = 8\n",                          # missing name
        "name = unet_baseline\nname = unet_dilated\n",
        "name = unet_baseline\nlearning_rate = 3\n",
        "name = unet_baseline\nbase_width = wide\n",
        "name unet_baseline\n",
    ])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_netspec(text)


class TestBuild:
    def test_parameter_parity(self):
        counts = {}
        names = {}
        for name in ("unet_baseline", "unet_dilated", "unet_progressive"):
            model = build(name, base_width=4)
            counts[name] = model.parameter_count()
            names[name] = [n for n, _ in model.params()]
        assert len(set(counts.values())) == 1
        assert names["unet_baseline"] == names["unet_progressive"]
        assert names["unet_baseline"] == names["unet_dilated"]

    def test_first_conv_parameter_count(self):
        model = build("unet_baseline", base_width=32)
        table = dict(model.params())
        n = (table["enc1.conv1.conv.weight"].data.size
             + table["enc1.conv1.conv.bias"].data.size)
        assert n == 320

    def test_conv_weight_tally(self):
        blocked = build("unet_progressive", base_width=2)
        weights = [n for n, _ in blocked.params() if n.endswith(".weight")]
        assert len(weights) == 16 + 4 + 16 + 1
        original = build("unet_original", base_width=2)
        weights = [n for n, _ in original.params() if n.endswith(".weight")]
        assert len(weights) == 8 + 2 + 12 + 1

    def test_registry_names_unique(self):
        model = build("unet_progressive", base_width=2)
        names = [n for n, _ in model.params()]
        assert len(names) == len(set(names))

    def test_init_deterministic(self):
        a = build("unet_dilated", base_width=2, seed=3)
        b = build("unet_dilated", base_width=2, seed=3)
        for (na, pa), (nb, pb) in zip(a.params(), b.params()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)
        c = build("unet_dilated", base_width=2, seed=4)
        diffs = sum(not np.array_equal(pa.data, pc.data)
                    for (_, pa), (_, pc) in zip(a.params(), c.params()))
        assert diffs > 0

    def test_glorot_bound_on_first_layer(self):
        model = build("unet_progressive", base_width=32)
        w = dict(model.params())["enc1.conv1.conv.weight"].data
        bound = math.sqrt(6.0 / (1 * 9 + 32 * 9))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound

    def test_dilation_changes_no_shapes(self):
        base = dict(build("unet_baseline", base_width=4).params())
        prog = dict(build("unet_progressive", base_width=4).params())
        for name in base:
            assert base[name].shape == prog[name].shape

    def test_build_accepts_netspec(self):
        spec = NetSpec("unet_baseline", base_width=2, classes=3)
        model = build(spec)
        assert model.spec.classes == 3
        head = dict(model.params())["head.conv.weight"]
        assert head.shape[0] == 3


class TestForward:
    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_shape_contract(self, name):
        model = build(name, base_width=2)
        x = Tensor(np.random.default_rng(0).normal(
            size=(2, 1, 64, 64)).astype(np.float32))
        assert model.forward(x).shape == (2, 4, 64, 64)

    def test_full_resolution(self):
        model = build("unet_progressive", base_width=2)
        x = Tensor(np.zeros((1, 1, 128, 128), dtype=np.float32))
        assert model.forward(x).shape == (1, 4, 128, 128)

    def test_indivisible_extent_rejected(self):
        model = build("unet_progressive", base_width=2)
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((1, 1, 100, 100),
                                          dtype=np.float32)))

    def test_wrong_channels_rejected(self):
        model = build("unet_baseline", base_width=2)
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))

    def test_inference_is_pure(self):
        model = build("unet_dilated", base_width=2)
        x = Tensor(np.random.default_rng(1).normal(
            size=(1, 1, 32, 32)).astype(np.float32))
        a = model.forward(x)
        b = model.forward(x)
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("name", ["unet_original", "unet_progressive"])
    def test_batch_permutation_equivariance(self, name):
        model = build(name, base_width=2)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 1, 32, 32)).astype(np.float32)
        perm = np.array([2, 0, 1])
        y = model.forward(Tensor(x)).data
        yp = model.forward(Tensor(np.ascontiguousarray(x[perm]))).data
        assert np.array_equal(y[perm], yp)


class TestResidual:
    def test_zeroed_convs_identity(self):
        model = build("unet_progressive", base_width=2)
        res = model._units["bridge.res"]
        for name, p in res.params():
            if name.endswith((".weight", ".bias")):
                p.data[...] = 0.0
        x = Tensor(np.random.default_rng(3).normal(
            size=(2, 32, 4, 4)).astype(np.float32))
        for train in (False, True):
            assert np.array_equal(res.forward(x, train=train).data, x.data)

    def test_projection_when_widths_differ(self):
        block = ResidualBlock(4, 6, dtype=np.float64)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 4, 8, 8)))
        y = block.forward(x)
        assert y.shape == (1, 6, 8, 8)
        g = block.backward(Tensor(np.ones_like(y.data)))
        assert g.shape == x.shape
        assert any(n == "proj.weight" for n, _ in block.params())


class TestEndToEndGradients:
    @pytest.mark.parametrize("name", ["unet_progressive", "unet_original"])
    def test_sampled_finite_differences(self, name):
        model = build(name, base_width=2, seed=0, dtype=np.float64)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 1, 16, 16))
        labels = rng.integers(0, 4, size=(2, 16, 16))
        saved = [(b, b.data.copy()) for _, b in model.buffers()]

        def loss():
            out = softmax_xent(model.forward(Tensor(x), train=True),
                               labels)[0]
            for b, snap in saved:
                b.data[...] = snap
            return out

        model.zero_grad()
        logits = model.forward(Tensor(x), train=True)
        _, gl = softmax_xent(logits, labels)
        gx = model.backward(gl)
        for b, snap in saved:
            b.data[...] = snap

        check_gradients_sampled(loss, x, gx.data, rng, n=6)
        table = dict(model.params())
        probe = ["enc1.conv1.conv.weight", "bridge.conv1.bn.gamma",
                 "dec2.conv1.act.slope", "head.conv.weight"]
        if name == "unet_progressive":
            probe += ["enc2.down.conv.bias", "bridge.res.conv1.conv.weight",
                      "enc4.conv3.bn.beta"]
        else:
            probe += ["enc2.conv2.conv.bias", "dec4.upconv.conv.weight"]
        for pname in probe:
            p = table[pname]
            check_gradients_sampled(loss, p.data, p.grad, rng, n=4)

    def test_backward_returns_input_shape(self):
        model = build("unet_baseline", base_width=2, dtype=np.float64)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 1, 32, 32)))
        y = model.forward(x, train=True)
        g = model.backward(Tensor(np.ones_like(y.data)))
        assert g.shape == x.shape
