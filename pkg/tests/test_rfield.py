import numpy as np
import pytest

from pdunet.arch import NetSpec
from pdunet.errors import DomainError, UnsupportedConfigurationError
from pdunet.layers import Conv2d
from pdunet.rfield import (accounting_note, compose_rf, effective_kernel,
                           gridding_coverage, network_rf, network_rf_summary)
from pdunet.tensor import Tensor


def impulse_footprint(layer_list):
    """Empirical receptive field measured on a real convolution stack.

    Builds single-channel convs with all-ones weights sized so the stack
    emits exactly one output unit, then routes a unit gradient back to
    the input.  Returns (span, count) of the nonzero input-gradient
    positions: span is the receptive-field extent per dimension, count
    the number of contributing 2D positions.
    """
    size = 1
    for k, d, s in reversed(layer_list):
        size = (size - 1) * s + k + (k - 1) * (d - 1)
    convs = []
    for k, d, s in layer_list:
        c = Conv2d(1, 1, k, stride=s, dilation=d, padding=0, dtype=np.float64)
        c.weight.data[...] = 1.0
        convs.append(c)
    h = Tensor(np.zeros((1, 1, size, size)))
    for c in convs:
        h = c.forward(h)
    assert h.shape[2:] == (1, 1)
    g = Tensor(np.ones((1, 1, 1, 1)))
    for c in reversed(convs):
        g = c.backward(g)
    rows, cols = np.nonzero(g.data[0, 0])
    span_r = int(rows.max() - rows.min() + 1)
    span_c = int(cols.max() - cols.min() + 1)
    assert span_r == span_c
    return span_r, int(rows.size)


class TestEffectiveKernel:
    @pytest.mark.parametrize("k,d,want", [
        (3, 1, 3), (3, 2, 5), (3, 4, 9), (3, 8, 17), (1, 7, 1), (5, 2, 9)])
    def test_values(self, k, d, want):
        assert effective_kernel(k, d) == want

    @pytest.mark.parametrize("k,d", [(0, 1), (3, 0), (-1, 2)])
    def test_domain(self, k, d):
        with pytest.raises(DomainError):
            effective_kernel(k, d)


class TestComposeRF:
    def test_progressive_schedule(self):
        report = compose_rf([(3, 1, 1), (3, 2, 1), (3, 4, 1)])
        assert report.rf == 15
        assert report.jump == 1
        assert [r.rf for r in report.rows] == [3, 7, 15]
        assert [r.effective for r in report.rows] == [3, 5, 9]

    def test_constant_schedule(self):
        assert compose_rf([(3, 2, 1)] * 3).rf == 13

    def test_single_heavily_dilated(self):
        assert compose_rf([(3, 8, 1)]).rf == 17

    def test_strided_chain(self):
        report = compose_rf([(3, 1, 1), (3, 1, 2), (3, 2, 1)])
        assert [r.rf for r in report.rows] == [3, 5, 13]
        assert [r.jump for r in report.rows] == [1, 2, 2]
        assert report.coverage is None

    def test_labels(self):
        report = compose_rf([("a", 3, 1, 1), ("b", 3, 1, 2)])
        assert [r.label for r in report.rows] == ["a", "b"]
        auto = compose_rf([(3, 1, 1), (3, 1, 1)])
        assert auto.rows[1].label == "layer2"

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            compose_rf([])

    def test_monotone_rf(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(1, 7)
            spec = [(int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                     int(rng.integers(1, 3))) for _ in range(n)]
            rfs = [r.rf for r in compose_rf(spec).rows]
            assert all(b >= a for a, b in zip(rfs, rfs[1:]))

    def test_table_layout(self):
        text = compose_rf([("enc1.conv1", 3, 2, 1)]).table()
        lines = text.splitlines()
        assert lines[0].split() == ["layer", "k", "D", "s", "eff", "RF", "jump"]
        assert lines[1].split() == ["enc1.conv1", "3", "2", "1", "5", "5", "1"]


@pytest.mark.parametrize("dilations", [(1, 1, 1), (1, 2, 4), (2, 2, 2),
                                       (4, 4, 4), (1, 2, 4, 8), (8, 1, 1)])
def test_compose_matches_impulse_response(dilations):
    spec = [(3, d, 1) for d in dilations]
    span, count = impulse_footprint(spec)
    report = compose_rf(spec)
    assert report.rf == span
    assert report.coverage[0] == count


def test_compose_matches_impulse_response_with_stride():
    spec = [(3, 1, 1), (3, 1, 2), (3, 2, 1), (2, 1, 2), (3, 1, 1)]
    span, _ = impulse_footprint(spec)
    assert compose_rf(spec).rf == span


class TestGridding:
    def test_constant_dilation_leaves_holes(self):
        assert gridding_coverage([(3, 2, 1)] * 3) == (49, 169)

    def test_progressive_is_dense(self):
        contributing, window = gridding_coverage(
            [(3, 1, 1), (3, 2, 1), (3, 4, 1)])
        assert (contributing, window) == (225, 225)

    def test_single_standard_conv(self):
        assert gridding_coverage([(3, 1, 1)]) == (9, 9)

    def test_stride_unsupported(self):
        with pytest.raises(UnsupportedConfigurationError):
            gridding_coverage([(3, 1, 2)])

    def test_counts_match_impulse_response(self):
        for dils in [(2, 2, 2), (3, 3, 3), (1, 2, 4), (4, 2, 1), (2, 4, 8)]:
            spec = [(3, d, 1) for d in dils]
            _, count = impulse_footprint(spec)
            contributing, _ = gridding_coverage(spec)
            assert contributing == count

    def test_doubling_schedules_dense_constant_sparse(self):
        for m in range(1, 5):
            doubling = [(3, 2 ** i, 1) for i in range(m)]
            report = compose_rf(doubling)
            assert report.density == 1.0
        for c in (2, 3, 4):
            report = compose_rf([(3, c, 1)] * 3)
            assert report.density < 1.0


class TestNetworkRF:
    def test_headline_values(self):
        assert network_rf(NetSpec("unet_progressive")).rf == 305
        assert network_rf(NetSpec("unet_dilated")).rf == 325
        assert network_rf(NetSpec("unet_baseline")).rf == 185
        assert network_rf(NetSpec("unet_original")).rf == 140

    def test_scope_summary(self):
        summary = network_rf_summary(NetSpec("unet_progressive"))
        assert summary == {"encoder": 241, "bridge": 305, "full": 369}
        assert network_rf_summary(NetSpec("unet_dilated")) == {
            "encoder": 261, "bridge": 325, "full": 389}

    def test_baseline_smaller_than_progressive(self):
        base = network_rf(NetSpec("unet_baseline")).rf
        prog = network_rf(NetSpec("unet_progressive")).rf
        assert base < prog

    def test_context_covers_input(self):
        prog = network_rf(NetSpec("unet_progressive")).rf
        assert prog >= 128

    def test_independent_of_width(self):
        thin = NetSpec("unet_progressive", base_width=2)
        wide = NetSpec("unet_progressive", base_width=32)
        assert network_rf(thin).rf == network_rf(wide).rf

    @pytest.mark.parametrize("name", ["unet_original", "unet_baseline",
                                      "unet_dilated", "unet_progressive"])
    @pytest.mark.parametrize("scope", ["encoder", "bridge", "full"])
    def test_matches_impulse_response(self, name, scope):
        spec = NetSpec(name)
        report = network_rf(spec, scope=scope)
        chain = [(r.kernel, r.dilation, r.stride) for r in report.rows]
        span, _ = impulse_footprint(chain)
        assert report.rf == span

    def test_unknown_scope(self):
        with pytest.raises(DomainError):
            network_rf(NetSpec("unet_baseline"), scope="decoder")

    def test_accounting_note(self):
        assert "residual" in accounting_note("bridge")
        with pytest.raises(DomainError):
            accounting_note("everything")
