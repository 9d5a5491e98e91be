"""CTC loss against the brute-force path oracle, decoding, and stability."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drnkit.ctc import (AlphabetSpec, InfeasibleTargetError, collapse_path,
                        ctc_batch_loss_grad, ctc_brute_force,
                        ctc_greedy_decode, ctc_loss_grad, extend_with_blanks,
                        min_frames, oracle_suite)

BLANK, A, B = 0, 1, 2


def uniform_log_probs(t, v):
    return np.log(np.full((t, v), 1.0 / v))


class TestWorkedExamples:
    def test_two_frames_uniform_single_symbol(self):
        # paths aa, a-, -a collapse to "a": P = 3/4
        nll, _ = ctc_loss_grad(uniform_log_probs(2, 2), (A,))
        np.testing.assert_allclose(np.exp(-nll), 0.75, rtol=1e-12)
        np.testing.assert_allclose(nll, -np.log(0.75), rtol=1e-12)

    def test_three_frames_uniform_two_symbols(self):
        # exactly {aab, abb, ab-, a-b, -ab} collapse to "ab": P = 5/27
        nll, _ = ctc_loss_grad(uniform_log_probs(3, 3), (A, B))
        np.testing.assert_allclose(np.exp(-nll), 5 / 27, rtol=1e-12)
        np.testing.assert_allclose(nll, 1.686399, atol=1e-6)

    def test_single_frame_single_path(self):
        probs = np.array([[0.3, 0.7]])
        nll, _ = ctc_loss_grad(np.log(probs), (A,))
        np.testing.assert_allclose(nll, -np.log(0.7), rtol=1e-12)

    def test_brute_force_matches_worked_example(self):
        assert ctc_brute_force(np.full((2, 2), 0.5), (A,)) == pytest.approx(0.75, abs=1e-15)


class TestCollapseAndDecode:
    def test_merge_then_drop(self):
        assert collapse_path([A, A, BLANK, B, B]) == (A, B)

    def test_all_blank(self):
        assert collapse_path([BLANK, BLANK, BLANK]) == ()

    def test_blank_separates_repeats(self):
        assert collapse_path([A, BLANK, A]) == (A, A)

    def test_greedy_decode(self):
        frames = np.log(np.array([
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
        ]))
        assert ctc_greedy_decode(frames) == (A, B)

    def test_greedy_all_blank(self):
        frames = np.log(np.array([[0.9, 0.05, 0.05]] * 3))
        assert ctc_greedy_decode(frames) == ()

    def test_greedy_tie_breaks_low_index(self):
        frames = np.zeros((2, 3))  # all tied: argmax picks index 0 (blank)
        assert ctc_greedy_decode(frames) == ()

    def test_extend_with_blanks(self):
        assert extend_with_blanks((A, B)) == (BLANK, A, BLANK, B, BLANK)
        assert len(extend_with_blanks((A, A, B))) == 2 * 3 + 1


class TestFeasibility:
    def test_min_frames_counts_repeats(self):
        assert min_frames((A,)) == 1
        assert min_frames((A, B)) == 2
        assert min_frames((A, A)) == 3
        assert min_frames((A, A, B, B)) == 6

    def test_too_short_raises_not_inf(self):
        with pytest.raises(InfeasibleTargetError, match="needs >= 3 frames"):
            ctc_loss_grad(uniform_log_probs(2, 2), (A, A))

    def test_brute_force_infeasible_is_zero(self):
        assert ctc_brute_force(np.full((2, 2), 0.5), (A, A, A)) == 0.0

    @given(
        t_len=st.integers(1, 4),
        extra=st.integers(1, 3),
        labels=st.lists(st.integers(1, 2), max_size=2),
    )
    @settings(max_examples=40, deadline=None)
    def test_appending_frames_preserves_feasibility(self, t_len, extra, labels):
        target = tuple(labels)
        if min_frames(target) > t_len:
            return
        nll_short, _ = ctc_loss_grad(uniform_log_probs(t_len, 3), target)
        nll_long, _ = ctc_loss_grad(uniform_log_probs(t_len + extra, 3), target)
        assert np.isfinite(nll_short) and np.isfinite(nll_long)


class TestOracleEquivalence:
    def test_randomized_instances(self):
        worst, run = oracle_suite(cases=120, seed=9)
        assert run == 120
        assert worst < 1e-10

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        lp = np.log(rng.dirichlet(np.ones(4), size=(3, 5)))
        targets = [(1, 2), (3,), (2, 2)]
        nll_b, grad_b = ctc_batch_loss_grad(lp, targets)
        for i, target in enumerate(targets):
            nll_i, grad_i = ctc_loss_grad(lp[i], target)
            np.testing.assert_allclose(nll_b[i], nll_i, rtol=1e-12)
            np.testing.assert_allclose(grad_b[i], grad_i, rtol=1e-12)


class TestBatchMeanConvention:
    def test_tape_loss_is_batch_mean_of_sequence_sums(self):
        from drnkit.ctc import ctc_loss
        from drnkit.ops import log_softmax
        from drnkit.tensor import Tensor
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((3, 5, 4)).astype(np.float64)
        targets = [(1, 2), (3,), (2,)]
        loss = ctc_loss(Tensor(logits), targets)
        per_sample = [ctc_loss_grad(log_softmax(logits[i]), targets[i])[0]
                      for i in range(3)]
        np.testing.assert_allclose(loss.item(), np.mean(per_sample), rtol=1e-9)


class TestGradient:
    def test_rows_sum_to_zero(self):
        rng = np.random.default_rng(1)
        lp = np.log(rng.dirichlet(np.ones(4), size=6))
        _, grad = ctc_loss_grad(lp, (1, 3, 1))
        assert np.abs(grad.sum(axis=1)).max() < 1e-10

    def test_matches_finite_differences_through_softmax(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((5, 4))
        target = (1, 2)

        def loss_of(u):
            z = u - u.max(axis=1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            nll, _ = ctc_loss_grad(lp, target)
            return nll

        z = logits - logits.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        _, grad = ctc_loss_grad(lp, target)
        h = 1e-6
        worst = 0.0
        for t in range(5):
            for k in range(4):
                logits[t, k] += h
                f_plus = loss_of(logits)
                logits[t, k] -= 2 * h
                f_minus = loss_of(logits)
                logits[t, k] += h
                numeric = (f_plus - f_minus) / (2 * h)
                worst = max(worst, abs(grad[t, k] - numeric) /
                            max(abs(grad[t, k]), abs(numeric), 1e-8))
        assert worst < 1e-4


class TestStability:
    def test_tiny_probabilities_stay_finite(self):
        probs = np.full((6, 3), 1e-30)
        probs[:, 0] = 1.0 - 2e-30
        nll, grad = ctc_loss_grad(np.log(probs), (1, 2))
        assert np.isfinite(nll)
        assert np.all(np.isfinite(grad))

    def test_empty_target(self):
        probs = np.array([[0.9, 0.1], [0.8, 0.2]])
        nll, _ = ctc_loss_grad(np.log(probs), ())
        np.testing.assert_allclose(np.exp(-nll), 0.9 * 0.8, rtol=1e-12)

    def test_blank_in_target_rejected(self):
        with pytest.raises(ValueError, match="blank"):
            ctc_loss_grad(uniform_log_probs(3, 3), (0, 1))

    def test_brute_force_instance_guard(self):
        with pytest.raises(ValueError, match="1e6"):
            ctc_brute_force(np.full((12, 4), 0.25), (1,))


class TestAlphabet:
    def test_round_trip(self):
        alphabet = AlphabetSpec("0123456789")
        assert alphabet.size == 11
        seq = alphabet.encode("407")
        assert seq == (5, 1, 8)
        assert alphabet.decode(seq) == "407"

    def test_unknown_character(self):
        with pytest.raises(ValueError, match="not in alphabet"):
            AlphabetSpec("01").encode("7")

    def test_duplicate_symbols_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            AlphabetSpec("aa")
