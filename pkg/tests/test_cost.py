"""Cost model: worked counts, the (1/L, 2/L] band, and cross-checks against
instantiated blocks."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drnkit.blocks import DenseBlock, DenseBlockSpec, RefinedDenseBlock
from drnkit.cost import (compare_blocks, cost_dense_block,
                         cost_refined_dense_block, count_conv, format_report)
from drnkit.rng import Rng


def spec(layers=4, k=12, c0=24, flavor="depthwise_separable", rule="sum"):
    return DenseBlockSpec(num_layers=layers, growth_rate=k, in_channels=c0,
                          combine_rule=rule, conv_flavor=flavor)


class TestCountConv:
    def test_standard_3x3(self):
        assert count_conv(16, 32, (3, 3), "standard", (1, 1)).params == 4608

    def test_depthwise_separable_3x3(self):
        assert count_conv(16, 32, (3, 3), "depthwise_separable", (1, 1)).params == 656

    def test_pointwise_standard(self):
        assert count_conv(64, 16, (1, 1), "standard", (1, 1)).params == 1024

    def test_macs_scale_with_spatial(self):
        cost = count_conv(16, 32, (3, 3), "standard", (28, 28))
        assert cost.macs == 4608 * 28 * 28

    def test_bad_extent(self):
        with pytest.raises(ValueError):
            count_conv(0, 4, (3, 3), "standard", (1, 1))


class TestBlockCosts:
    def test_dense_per_layer_params(self):
        block = cost_dense_block(spec(), "standard", (1, 1))
        assert [c.params for c in block.layers] == [2592, 3888, 5184, 6480]
        assert block.total.params == 18144

    def test_refined_per_layer_params(self):
        block = cost_refined_dense_block(spec(), "standard", (1, 1))
        assert [c.params for c in block.layers] == [2592, 1296, 1296, 1296]
        assert block.total.params == 6480

    def test_single_layer_uses_input_width(self):
        d = cost_dense_block(spec(layers=1), "standard", (1, 1))
        r = cost_refined_dense_block(spec(layers=1), "standard", (1, 1))
        assert d.total.params == r.total.params == 24 * 12 * 9

    def test_zero_growth_rejected(self):
        with pytest.raises(Exception):
            cost_dense_block(spec(k=0), "standard", (1, 1))


class TestCompareBlocks:
    def test_worked_pair_ratio(self):
        report = compare_blocks(spec(), "standard")
        assert report.standard.total.params == 18144
        assert report.refined.total.params == 6480
        assert report.param_ratio == pytest.approx(0.357142857, abs=1e-9)
        assert report.band == (0.25, 0.5)
        assert report.in_band

    def test_alpha_one_closed_form(self):
        # c0 == k gives ratio 2 / (L + 1)
        report = compare_blocks(spec(layers=8, k=16, c0=16), "standard")
        assert report.param_ratio == pytest.approx(2 / 9, abs=1e-12)
        assert report.in_band

    def test_alpha_four_l3(self):
        report = compare_blocks(spec(layers=3, k=8, c0=32), "standard")
        assert report.param_ratio == pytest.approx(0.4, abs=1e-12)
        assert report.in_band

    def test_alpha_four_l8(self):
        report = compare_blocks(spec(layers=8, k=8, c0=32), "standard")
        assert report.param_ratio == pytest.approx(11 / 60, abs=1e-12)
        assert report.in_band

    def test_l2_alpha_one_hits_band_edge(self):
        report = compare_blocks(spec(layers=2, k=10, c0=10), "standard")
        assert report.param_ratio == pytest.approx(2 / 3, abs=1e-12)
        assert report.in_band  # band is (0.5, 1.0], edge inclusive

    @given(layers=st.integers(3, 8), k=st.integers(1, 32), alpha=st.integers(1, 4))
    @settings(max_examples=80, deadline=None)
    def test_band_property(self, layers, k, alpha):
        report = compare_blocks(spec(layers=layers, k=k, c0=alpha * k), "standard")
        lo, hi = report.band
        assert lo < report.param_ratio <= hi

    @given(k=st.integers(1, 16), alpha=st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_ratio_strictly_decreasing_in_depth(self, k, alpha):
        ratios = [
            compare_blocks(spec(layers=layers, k=k, c0=alpha * k), "standard").param_ratio
            for layers in range(2, 9)
        ]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_report_text_carries_band(self):
        text = format_report(compare_blocks(spec(), "standard"))
        assert "18144" in text and "6480" in text
        assert "0.3571" in text
        assert "(0.2500, 0.5000]" in text


class TestConsistencyWithBlocks:
    @pytest.mark.parametrize("flavor", ["standard", "depthwise_separable"])
    def test_refined_block_kernel_params_match(self, flavor):
        s = spec(layers=3, k=6, c0=10, flavor=flavor)
        block = RefinedDenseBlock(s, rng=Rng(0))
        cost = cost_refined_dense_block(s, flavor, (1, 1))
        assert block.inner_kernel_param_count() == cost.total.params

    @pytest.mark.parametrize("flavor", ["standard", "depthwise_separable"])
    def test_dense_block_kernel_params_match(self, flavor):
        s = spec(layers=4, k=5, c0=7, flavor=flavor, rule="concat")
        block = DenseBlock(s, rng=Rng(0))
        cost = cost_dense_block(s, flavor, (1, 1))
        assert block.inner_kernel_param_count() == cost.total.params

    def test_flagged_extras_are_separate(self):
        report = compare_blocks(spec(), "standard")
        assert report.refined.bias_params == 4 * 12
        assert report.refined.bn_params == 2 * (24 + 12 + 12 + 12)
        assert report.fusion.params == (24 + 48) * 24
