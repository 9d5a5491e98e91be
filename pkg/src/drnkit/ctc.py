"""Connectionist temporal classification: loss, gradients, and decoding.

The loss sums, over all frame-level paths that collapse to the target
(merge adjacent repeats, then drop blanks), the product of per-frame
probabilities. The forward/backward recursions run in log space with
float64 accumulators regardless of the network dtype. Blank is index 0
everywhere.

Per-sample losses are summed over the sequence; the batched tape op
averages them over the batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ops import log_softmax
from .tensor import ShapeMismatchError, Tensor, record

BLANK = 0
NEG_INF = -np.inf

LabelSeq = tuple[int, ...]


class InfeasibleTargetError(ValueError):
    """Target cannot be emitted in the given number of frames."""


@dataclass(frozen=True)
class AlphabetSpec:
    """Symbol table with a reserved blank at index 0.

    ``symbols[i]`` is the printable character for label index i + 1, so the
    total alphabet size (blank included) is ``len(symbols) + 1``.
    """

    symbols: str = "0123456789"

    def __post_init__(self):
        if len(self.symbols) < 1:
            raise ValueError("alphabet needs at least one non-blank symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError(f"alphabet symbols must be unique: {self.symbols!r}")

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    def encode(self, text: str) -> LabelSeq:
        try:
            return tuple(self.symbols.index(ch) + 1 for ch in text)
        except ValueError:
            raise ValueError(f"character not in alphabet {self.symbols!r}: {text!r}") from None

    def decode(self, labels: Sequence[int]) -> str:
        out = []
        for l in labels:
            if not 1 <= l < self.size:
                raise ValueError(f"label index {l} outside [1, {self.size})")
            out.append(self.symbols[l - 1])
        return "".join(out)


def validate_target(target: Sequence[int], num_classes: int) -> LabelSeq:
    t = tuple(int(v) for v in target)
    for v in t:
        if not 1 <= v < num_classes:
            raise ValueError(
                f"target label {v} outside [1, {num_classes}); blank (0) is reserved"
            )
    return t


def extend_with_blanks(target: Sequence[int]) -> LabelSeq:
    """Interleave blanks: (-, l1, -, l2, ..., -), length 2*len + 1."""
    ext = [BLANK]
    for l in target:
        ext.append(int(l))
        ext.append(BLANK)
    return tuple(ext)


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit the target: its length plus one extra
    blank frame per adjacent repeated label."""
    t = tuple(target)
    repeats = sum(1 for a, b in zip(t, t[1:]) if a == b)
    return len(t) + repeats


def collapse_path(path: Sequence[int]) -> LabelSeq:
    """Merge adjacent repeats, then delete blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_greedy_decode(log_probs: np.ndarray) -> LabelSeq:
    """Per-frame argmax then collapse; ties break toward the lowest index."""
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse_path(arr.argmax(axis=-1))


def ctc_brute_force(probs: np.ndarray, target: Sequence[int]) -> float:
    """Oracle: sum path probabilities over all V^T paths collapsing to target."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    t_len, v = arr.shape
    if v**t_len > 10**6:
        raise ValueError(f"brute force limited to V^T <= 1e6, got {v}^{t_len}")
    want = tuple(int(x) for x in target)
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        if collapse_path(path) == want:
            p = 1.0
            for t, k in enumerate(path):
                p *= arr[t, k]
            total += p
    return total


# ---------------------------------------------------------------------------
# forward-backward recursion
# ---------------------------------------------------------------------------

def _shift_right(a: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    out[:, by:] = a[:, :-by]
    return out


def _shift_left(a: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    out[:, :-by] = a[:, by:]
    return out


def _logadd3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_batch_loss_grad(
    log_probs: np.ndarray, targets: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Batched negative log likelihoods and gradients w.r.t. logits.

    ``log_probs`` is (B, T, V) of log-soft-max rows. Returns (nll (B,),
    grad (B, T, V)); each frame's gradient row sums to zero because the
    gradient is propagated through the soft-max.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 3:
        raise ShapeMismatchError(f"log_probs must be (B, T, V), got {lp.shape}")
    b, t_len, v = lp.shape
    if len(targets) != b:
        raise ShapeMismatchError(f"{b} samples but {len(targets)} targets")

    exts = []
    for i, tgt in enumerate(targets):
        tgt = validate_target(tgt, v)
        need = min_frames(tgt)
        if need > t_len:
            raise InfeasibleTargetError(
                f"sample {i}: target of length {len(tgt)} needs >= {need} frames, got {t_len}"
            )
        exts.append(extend_with_blanks(tgt))

    s_max = max(len(e) for e in exts)
    labels = np.zeros((b, s_max), dtype=np.int64)
    valid = np.zeros((b, s_max), dtype=bool)
    s_lens = np.array([len(e) for e in exts])
    for i, e in enumerate(exts):
        labels[i, : len(e)] = e
        valid[i, : len(e)] = True

    # skip transition s-2 -> s allowed only onto a non-blank differing
    # from the label two slots back
    allow_skip = np.zeros((b, s_max), dtype=bool)
    if s_max > 2:
        allow_skip[:, 2:] = (labels[:, 2:] != BLANK) & (labels[:, 2:] != labels[:, :-2])
    allow_skip &= valid

    # lp_lab[i, t, s] = lp[i, t, labels[i, s]]
    lp_lab = np.take_along_axis(lp, labels[:, None, :].repeat(t_len, axis=1), axis=2)

    with np.errstate(invalid="ignore"):
        alpha = np.full((t_len, b, s_max), NEG_INF)
        alpha[0, :, 0] = lp_lab[:, 0, 0]
        has2 = s_lens > 1
        if s_max > 1:
            alpha[0, has2, 1] = lp_lab[has2, 0, 1]
        for t in range(1, t_len):
            prev = alpha[t - 1]
            stay = prev
            step = _shift_right(prev, 1)
            skip = np.where(allow_skip, _shift_right(prev, 2), NEG_INF)
            nxt = _logadd3(stay, step, skip) + lp_lab[:, t, :]
            nxt[~valid] = NEG_INF
            alpha[t] = nxt

        last = alpha[t_len - 1]
        rows = np.arange(b)
        end1 = last[rows, s_lens - 1]
        end2 = np.where(s_lens >= 2, last[rows, np.maximum(s_lens - 2, 0)], NEG_INF)
        log_p = np.logaddexp(end1, end2)
        nll = -log_p

        # beta excludes the emission at t, so alpha + beta is the log
        # probability mass of paths passing state s at time t
        beta = np.full((t_len, b, s_max), NEG_INF)
        beta[t_len - 1][rows, s_lens - 1] = 0.0
        beta[t_len - 1][rows[has2], s_lens[has2] - 2] = 0.0
        for t in range(t_len - 2, -1, -1):
            contrib = lp_lab[:, t + 1, :] + beta[t + 1]
            stay = contrib
            step = _shift_left(contrib, 1)
            skip_src = np.where(allow_skip, contrib, NEG_INF)
            skip = _shift_left(skip_src, 2)
            cur = _logadd3(stay, step, skip)
            cur[~valid] = NEG_INF
            beta[t] = cur

        occupancy = alpha + beta - log_p[None, :, None]     # (T, B, S) in log space
        occ = np.exp(occupancy.transpose(1, 0, 2))          # (B, T, S)

    gamma = np.zeros((b, t_len, v))
    for s in range(s_max):
        np.add.at(gamma, (rows[:, None], np.arange(t_len)[None, :], labels[:, s, None]),
                  np.where(valid[:, s, None], occ[:, :, s], 0.0))
    grad = np.exp(lp) - gamma
    return nll, grad


def ctc_loss_grad(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Single-sample loss and gradient w.r.t. logits; log_probs is (T, V)."""
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"log_probs must be (T, V), got {arr.shape}")
    nll, grad = ctc_batch_loss_grad(arr[None], [tuple(target)])
    return float(nll[0]), grad[0]


def ctc_loss(logits: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Tape op: mean negative log likelihood over the batch.

    ``logits`` is (B, T, V) pre-soft-max; the op applies a stable
    log-soft-max internally and backpropagates through it.
    """
    if logits.ndim != 3:
        raise ShapeMismatchError(f"ctc_loss logits must be (B, T, V), got {logits.shape}")
    lp = log_softmax(logits.data.astype(np.float64))
    nll, grad = ctc_batch_loss_grad(lp, targets)
    loss = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))
    saved = (grad, logits.dtype, logits.shape[0])
    return record("ctc_loss", [logits], loss, saved, _ctc_backward)


def _ctc_backward(saved, g):
    grad, dtype, batch = saved
    return ((grad * (float(g) / batch)).astype(dtype, copy=False),)


def oracle_suite(cases: int = 200, seed: int = 0, tol: float = 1e-10,
                 max_t: int = 5, max_v: int = 4, max_len: int = 3):
    """Randomized equivalence check: exp(-loss) vs brute-force enumeration.

    Returns (worst absolute difference, number of instances run). Instances
    draw T, V, a feasible target, and a random row-stochastic probability
    table; failures raise AssertionError naming the instance.
    """
    from .rng import Rng

    rng = Rng(seed).child("ctc-oracle")
    worst = 0.0
    run = 0
    while run < cases:
        t_len = int(rng.integers(1, max_t + 1))
        v = int(rng.integers(2, max_v + 1))
        n = int(rng.integers(0, max_len + 1))
        target = tuple(int(rng.integers(1, v)) for _ in range(n))
        if min_frames(target) > t_len:
            continue
        probs = rng.uniform(1e-3, 1.0, (t_len, v))
        probs /= probs.sum(axis=1, keepdims=True)
        nll, _ = ctc_loss_grad(np.log(probs), target)
        reference = ctc_brute_force(probs, target)
        diff = abs(np.exp(-nll) - reference)
        if diff > tol:
            raise AssertionError(
                f"oracle mismatch: T={t_len} V={v} target={target} "
                f"recursion={np.exp(-nll)!r} brute={reference!r} diff={diff:g}"
            )
        worst = max(worst, diff)
        run += 1
    return worst, run
