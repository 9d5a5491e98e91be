"""Analytical parameter and MAC accounting for dense vs refined dense blocks.

The headline ratio compares inner-layer convolution kernels only; biases,
batch-norm affine parameters, and the 1x1 fusion convolution are reported
separately and excluded, because the block's compute is dominated by the
inner layers. For an inner kernel area K^2 and width ratio a = c0/k, the
kernel-parameter ratio has the closed form

    refined / standard = (a + L - 1) / (L*a + L*(L-1)/2)

which lies in (1/L, 2/L] for every L >= 2 and a >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

from .blocks import DenseBlockSpec


@dataclass(frozen=True)
class LayerCost:
    """Kernel parameter count and MACs at a given output spatial size."""

    params: int
    macs: int

    def __post_init__(self):
        if self.params < 0 or self.macs < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    def __add__(self, other: "LayerCost") -> "LayerCost":
        return LayerCost(self.params + other.params, self.macs + other.macs)


@dataclass(frozen=True)
class BlockCost:
    """One block variant: per-layer costs plus separately flagged extras."""

    layers: tuple[LayerCost, ...]
    bias_params: int
    bn_params: int

    @property
    def total(self) -> LayerCost:
        acc = LayerCost(0, 0)
        for c in self.layers:
            acc = acc + c
        return acc


@dataclass(frozen=True)
class CostReport:
    """Standard vs refined dense-block accounting and the reduction ratio."""

    spec: DenseBlockSpec
    flavor: str
    spatial: tuple[int, int]
    standard: BlockCost
    refined: BlockCost
    fusion: LayerCost                    # 1x1 compression, reported separately

    @property
    def param_ratio(self) -> float:
        return self.refined.total.params / self.standard.total.params

    @property
    def mac_ratio(self) -> float:
        return self.refined.total.macs / self.standard.total.macs

    @property
    def band(self) -> tuple[float, float]:
        l = self.spec.num_layers
        return (1.0 / l, 2.0 / l)

    @property
    def in_band(self) -> bool:
        lo, hi = self.band
        return lo < self.param_ratio <= hi


def count_conv(in_ch: int, out_ch: int, kernel, flavor: str, spatial) -> LayerCost:
    """Kernel parameters and MACs for one convolution.

    MACs follow the convention params * output positions; biases and
    batch-norm parameters are never included here.
    """
    kh, kw = kernel
    h, w = spatial
    if min(in_ch, out_ch, kh, kw, h, w) < 1:
        raise ValueError(
            f"count_conv extents must be positive: in={in_ch} out={out_ch} "
            f"kernel={kernel} spatial={spatial}"
        )
    if flavor == "standard":
        params = in_ch * out_ch * kh * kw
    elif flavor == "depthwise_separable":
        params = in_ch * kh * kw + in_ch * out_ch
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    return LayerCost(params, params * h * w)


def _block_cost(spec: DenseBlockSpec, flavor: str, spatial, refined: bool) -> BlockCost:
    spec.validate()
    l, k, c0 = spec.num_layers, spec.growth_rate, spec.in_channels
    layers = []
    for i in range(1, l + 1):
        if refined:
            in_ch = c0 if i == 1 else k
        else:
            in_ch = c0 + (i - 1) * k
        layers.append(count_conv(in_ch, k, spec.kernel, flavor, spatial))
    bias = l * k
    bn = sum(
        2 * ((c0 if i == 1 else k) if refined else c0 + (i - 1) * k)
        for i in range(1, l + 1)
    )
    return BlockCost(tuple(layers), bias_params=bias, bn_params=bn)


def cost_dense_block(spec: DenseBlockSpec, flavor: str, spatial) -> BlockCost:
    """Inner-layer costs with concatenation wiring: layer i reads c0 + (i-1)k."""
    return _block_cost(spec, flavor, spatial, refined=False)


def cost_refined_dense_block(spec: DenseBlockSpec, flavor: str, spatial) -> BlockCost:
    """Inner-layer costs with sum wiring: layer 1 reads c0, the rest read k."""
    return _block_cost(spec, flavor, spatial, refined=True)


def compare_blocks(spec: DenseBlockSpec, flavor: str, spatial=(1, 1)) -> CostReport:
    """Assemble both variants and flag whether the ratio lands in (1/L, 2/L]."""
    standard = cost_dense_block(spec, flavor, spatial)
    refined = cost_refined_dense_block(spec, flavor, spatial)
    fusion = count_conv(spec.out_channels, spec.in_channels, (1, 1), "standard", spatial)
    return CostReport(
        spec=spec, flavor=flavor, spatial=tuple(spatial),
        standard=standard, refined=refined, fusion=fusion,
    )


def format_report(report: CostReport) -> str:
    """Aligned human-readable table for the CLI."""
    spec = report.spec
    lines = [
        f"dense-block cost report  (L={spec.num_layers}, k={spec.growth_rate}, "
        f"c0={spec.in_channels}, kernel={spec.kernel[0]}x{spec.kernel[1]}, "
        f"flavor={report.flavor}, spatial={report.spatial[0]}x{report.spatial[1]})",
        "",
        f"{'layer':>6} {'standard params':>16} {'refined params':>15} "
        f"{'standard MACs':>14} {'refined MACs':>13}",
    ]
    for i, (s, r) in enumerate(zip(report.standard.layers, report.refined.layers), 1):
        lines.append(f"{i:>6} {s.params:>16} {r.params:>15} {s.macs:>14} {r.macs:>13}")
    st, rt = report.standard.total, report.refined.total
    lo, hi = report.band
    lines += [
        f"{'total':>6} {st.params:>16} {rt.params:>15} {st.macs:>14} {rt.macs:>13}",
        "",
        f"ratio (refined/standard): {report.param_ratio:.4f}",
        f"band (1/L, 2/L]: ({lo:.4f}, {hi:.4f}]  -> {'inside' if report.in_band else 'OUTSIDE'}",
        f"excluded from ratio: biases {report.standard.bias_params} (std) / "
        f"{report.refined.bias_params} (ref), BN affine {report.standard.bn_params} (std) / "
        f"{report.refined.bn_params} (ref), 1x1 fusion {report.fusion.params}",
    ]
    return "\n".join(lines)


def report_rows(report: CostReport) -> list[str]:
    """Delimited rows (one per layer plus totals) for machine consumption."""
    rows = ["layer\tvariant\tparams\tmacs"]
    for i, c in enumerate(report.standard.layers, 1):
        rows.append(f"{i}\tstandard\t{c.params}\t{c.macs}")
    for i, c in enumerate(report.refined.layers, 1):
        rows.append(f"{i}\trefined\t{c.params}\t{c.macs}")
    st, rt = report.standard.total, report.refined.total
    rows.append(f"total\tstandard\t{st.params}\t{st.macs}")
    rows.append(f"total\trefined\t{rt.params}\t{rt.macs}")
    rows.append(f"ratio\trefined/standard\t{report.param_ratio:.6f}\t{report.mac_ratio:.6f}")
    return rows
