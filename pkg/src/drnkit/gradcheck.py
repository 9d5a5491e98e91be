"""Finite-difference gradient verification for primitives and blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .rng import Rng
from .tensor import NonFiniteError, Tape, Tensor, backward

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    """Max relative error per named input, plus the overall verdict."""

    errors: dict[str, float]
    step: float
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        lines = [f"  {name}: {err:.3e}" for name, err in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        return f"grad_check {verdict} (tol {self.tol:g})\n" + "\n".join(lines)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def nudge_from_kinks(arr: np.ndarray, margin: float) -> np.ndarray:
    """Push values within ``margin`` of zero out to the margin (ReLU kinks)."""
    out = arr.copy()
    small = np.abs(out) < margin
    out[small] = np.where(out[small] >= 0, margin, -margin)
    return out


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    sample: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the named input tensors to a scalar loss Tensor. All inputs
    must be float64 and, for ops with kinks, already nudged so that
    |x| > 10 * step. When ``sample`` is set, at most that many elements per
    input are probed (deterministically, via ``rng``).
    """
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check inputs must be float64, {name} is {t.dtype}")
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = fn(inputs)
    backward(loss, tape)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in inputs.items()}

    def eval_loss() -> float:
        out = fn(inputs)
        v = float(out.data)
        if not np.isfinite(v):
            raise NonFiniteError("non-finite loss during finite differencing")
        return v

    f0 = abs(eval_loss())
    pick = rng if rng is not None else Rng(0)
    errors: dict[str, float] = {}
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = np.sort(pick.permutation(flat.size)[:sample])
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        floor = _noise_floor(f0, step)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_loss()
            flat[i] = orig - step
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"non-finite numeric gradient for {name}[{i}]")
            if max(abs(float(a_flat[i])), abs(numeric)) <= floor:
                continue  # both below finite-difference resolution: agreement
            worst = max(worst, relative_error(float(a_flat[i]), numeric))
        errors[name] = worst
    return GradCheckReport(errors=errors, step=step, tol=tol)


def _noise_floor(f_magnitude: float, step: float) -> float:
    """Smallest derivative a central difference can resolve: cancellation of
    two ~f-sized float64 values divided by 2h, with safety margin."""
    eps = np.finfo(np.float64).eps
    return 64.0 * eps * max(1.0, f_magnitude) / (2.0 * step)


def grad_check_directional(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    directions: int = 4,
    rng: Optional[Rng] = None,
) -> GradCheckReport:
    """Directional finite differences: per input tensor, compare v . grad
    against (f(x + h v) - f(x - h v)) / 2h for random sign directions v.

    Composite networks make per-element probing misleading in two ways:
    some directions have exactly-zero true gradients (bias shifts absorbed
    by a downstream train-mode batch norm), where differences only measure
    float64 roundoff, and full-tensor perturbations of early layers can
    push some downstream ReLU input across its kink. Probes therefore
    (a) treat values below the finite-difference noise floor as agreement,
    and (b) validate each estimate against a 4x smaller step, shrinking the
    step when the interval straddles a kink.
    """
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check inputs must be float64, {name} is {t.dtype}")
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = fn(inputs)
    backward(loss, tape)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in inputs.items()}
    f0 = abs(float(loss.data))

    pick = rng if rng is not None else Rng(0)

    def delta(t: Tensor, v: np.ndarray, h: float) -> float:
        base = t.data.copy()
        t.data += h * v
        f_plus = float(fn(inputs).data)
        t.data[...] = base - h * v
        f_minus = float(fn(inputs).data)
        t.data[...] = base
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError("non-finite loss during finite differencing")
        return (f_plus - f_minus) / (2.0 * h)

    def probe(t: Tensor, v: np.ndarray) -> tuple[float, float] | None:
        for h in (step, step / 16.0, step / 256.0):
            d_full = delta(t, v, h)
            d_half = delta(t, v, h / 4.0)
            floor = _noise_floor(f0, h / 4.0)
            if abs(d_full - d_half) <= max(
                0.25 * tol * max(abs(d_full), abs(d_half)), 4.0 * floor
            ):
                return d_full, _noise_floor(f0, h)
        return None

    errors: dict[str, float] = {}
    for name, t in inputs.items():
        worst = 0.0
        done = 0
        attempts = 0
        while done < directions:
            attempts += 1
            if attempts > 8 * directions:
                raise NonFiniteError(f"{name}: too many kink-contaminated probes")
            v = np.sign(pick.uniform(-1.0, 1.0, t.shape))
            result = probe(t, v)
            if result is None:
                continue
            numeric, floor = result
            a_dir = float((analytic[name] * v).sum())
            done += 1
            if max(abs(a_dir), abs(numeric)) <= floor:
                continue  # below finite-difference resolution: agreement
            worst = max(worst, relative_error(a_dir, numeric))
        errors[name] = worst
    return GradCheckReport(errors=errors, step=step, tol=tol)


# ---------------------------------------------------------------------------
# standard suite: every primitive plus composed blocks
# ---------------------------------------------------------------------------

def standard_suite(seed: int = 0, tol: float = DEFAULT_TOL) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference checks for all primitives and composed blocks,
    including a tiny end-to-end network with both heads."""
    from . import ops
    from .blocks import (ConvGroupSpec, DenseBlockSpec, DownsampleSpec, DrnConfig,
                         DrnNet, GdbSpec, Rrdb, RrdbSpec, residual_block_forward)
    from .ctc import ctc_loss

    rng = Rng(seed).child("gradcheck")

    def randn(*shape, kink_margin=None):
        arr = rng.uniform(-1.0, 1.0, shape)
        if kink_margin:
            arr = nudge_from_kinks(arr, kink_margin)
        return Tensor(arr, dtype=np.float64)

    margin = 10 * DEFAULT_STEP
    results: list[tuple[str, GradCheckReport]] = []

    def run(name, fn, inputs, sample=None):
        results.append((name, grad_check(fn, inputs, tol=tol, sample=sample,
                                         rng=Rng(seed).child(f"sample/{name}"))))

    def run_directional(name, fn, inputs):
        results.append((name, grad_check_directional(
            fn, inputs, tol=tol, rng=Rng(seed).child(f"dir/{name}"))))

    run("relu", lambda i: ops.reduce_sum(ops.relu(i["x"])),
        {"x": randn(3, 4, kink_margin=margin)})
    run("conv2d", lambda i: ops.reduce_sum(ops.conv2d(i["x"], i["w"], i["b"], (2, 1), (1, 1))),
        {"x": randn(2, 2, 5, 5), "w": randn(3, 2, 3, 3), "b": randn(3)})
    run("depthwise_separable_conv",
        lambda i: ops.reduce_sum(
            ops.depthwise_separable_conv(i["x"], i["dw"], i["pw"], i["b"], (1, 2), (1, 1))),
        {"x": randn(2, 3, 4, 5), "dw": randn(3, 1, 3, 3), "pw": randn(4, 3, 1, 1),
         "b": randn(4)})

    def bn_loss(i):
        rm, rv = np.zeros(3), np.ones(3)
        return ops.reduce_sum(
            ops.relu(ops.batch_norm(i["x"], i["g"], i["b"], rm, rv, training=True)))

    run("batch_norm", bn_loss, {"x": randn(4, 3, 4, 4), "g": randn(3), "b": randn(3)})
    run("fully_connected",
        lambda i: ops.reduce_sum(ops.fully_connected(i["x"], i["w"], i["b"])),
        {"x": randn(3, 4), "w": randn(4, 5), "b": randn(5)})
    run("concat_sum",
        lambda i: ops.reduce_sum(ops.sum_features(
            [ops.concat_channels([i["a"], i["b"]]), ops.concat_channels([i["b"], i["a"]])])),
        {"a": randn(1, 2, 3, 3), "b": randn(1, 2, 3, 3)})
    run("softmax_xent",
        lambda i: ops.softmax_xent(i["x"], [1, 0, 2])[0],
        {"x": randn(3, 4)})
    run("ctc_loss",
        lambda i: ctc_loss(i["x"], [(1, 2), (2,), (1, 1)]),
        {"x": randn(3, 5, 3)})
    run("residual_block",
        lambda i: ops.reduce_sum(residual_block_forward(i["x"], i["w1"], i["w2"])),
        {"x": randn(2, 3, kink_margin=margin), "w1": randn(3, 3), "w2": randn(3, 3)})

    rrdb_spec = RrdbSpec(DenseBlockSpec(num_layers=3, growth_rate=3, in_channels=4,
                                        combine_rule="sum"))
    rrdb = Rrdb(rrdb_spec, rng=rng.child("rrdb"), dtype=np.float64)
    rrdb.eval()
    rrdb_params = {name.replace("/", "."): p.value for name, p in rrdb.named_parameters()}

    def rrdb_loss(i):
        return ops.reduce_sum(ops.relu(rrdb(i["x"])))

    run_directional("rrdb", rrdb_loss, {"x": randn(1, 4, 5, 5), **rrdb_params})

    tiny = DrnConfig(
        gdb=GdbSpec(
            shallow=ConvGroupSpec(1, 16, kernel=(5, 5), padding=(2, 2)),
            rrdb=RrdbSpec(DenseBlockSpec(num_layers=3, growth_rate=8, in_channels=16,
                                         combine_rule="sum")),
            num_blocks=2,
        ),
        down=DownsampleSpec(ConvGroupSpec(16, 24, stride=(2, 2)),
                            ConvGroupSpec(24, 32, stride=(2, 2))),
        head="classify", image_size=(12, 12), num_classes=4,
    )
    net = DrnNet(tiny, seed=seed, dtype=np.float64)
    net.train()  # exercise batch-norm batch statistics in the composite check
    net_params = {name.replace("/", "."): p.value for name, p in net.named_parameters()}
    x_img = Tensor(rng.uniform(0.0, 1.0, (2, 1, 12, 12)), dtype=np.float64)
    targets = [1, 3]

    def net_loss(i):
        return ops.softmax_xent(net(i["image"]), targets)[0]

    run_directional("tiny_drn_classify", net_loss, {"image": x_img, **net_params})

    seq = DrnConfig(
        gdb=GdbSpec(
            shallow=ConvGroupSpec(1, 8, kernel=(5, 5), stride=(2, 2), padding=(2, 2)),
            rrdb=RrdbSpec(DenseBlockSpec(num_layers=2, growth_rate=6, in_channels=8,
                                         combine_rule="sum")),
            num_blocks=2,
        ),
        down=DownsampleSpec(ConvGroupSpec(8, 12, stride=(2, 2)),
                            ConvGroupSpec(12, 16, stride=(2, 1))),
        head="sequence", image_size=(16, 40), alphabet_size=4, max_label_len=2,
    )
    seq_net = DrnNet(seq, seed=seed + 1, dtype=np.float64)
    seq_net.train()
    seq_params = {name.replace("/", "."): p.value for name, p in seq_net.named_parameters()}
    seq_img = Tensor(rng.uniform(0.0, 1.0, (2, 1, 16, 40)), dtype=np.float64)

    def seq_loss(i):
        return ctc_loss(seq_net(i["image"]), [(1, 2), (3,)])

    run_directional("tiny_drn_sequence", seq_loss, {"image": seq_img, **seq_params})
    return results
